"""Command-line entry point: ``daa <subcommand> [options]``.

Every run writes its results plus ``manifest.json`` (configuration, package
versions, seed and SHA-256 of every input file) into ``--out``.  Results do
not depend on ``--jobs``, so the manifest leaves it out.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy

from . import __version__
from .assoc import (DEFAULT_ALPHA, DEFAULT_N_PERM, Method, detection_curve, run_method)
from .classify import DEFAULT_FOLDS, DEFAULT_REPEATS, cross_validate, write_cv_summary
from .ingest import DataError, Labels, filter_prevalence, parse_count_table, parse_labels, \
    write_count_table, write_labels
from .maxent import DEFAULT_LAMBDA_MIN, fit_model, spectrum, validate_moments
from .network import (DEFAULT_NEG_CUTOFF, DEFAULT_NETWORK_PERM, DEFAULT_POS_CUTOFF, EdgeKind,
                      edge_significance, extract_edges)
from .robustness import (DEFAULT_STABILITY_REPEATS, compare_group_covariances, lambda_sweep,
                         normalization_comparison, subsample_stability)
from .synth import (DEFAULT_DEPTH, DEFAULT_MODEL_SEED, PRESETS, REFERENCE_CASES,
                    REFERENCE_CONTROLS, SyntheticSpec, fit_ground_truth, generate_cohort,
                    make_ground_truth, to_counts, write_truth)
from .transform import LogAbundanceMatrix, Scheme, log_transform, parse_log_table, write_log_table

_EXCLUDED_FROM_MANIFEST = {"jobs", "out", "func"}


# argparse value checks -------------------------------------------------------

def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {text}")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0 < v <= 1:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1], got {text}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


# parser ----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, inputs: bool = True) -> None:
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--seed", type=_nonneg_int, default=0, help="master random seed")
    p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads")
    if inputs:
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--counts", type=Path, help="taxa x samples read-count TSV")
        src.add_argument("--logabund", type=Path, help="taxa x samples log-abundance TSV")
        p.add_argument("--labels", type=Path, required=True, help="sample/group TSV")
        p.add_argument("--norm", choices=[s.value for s in Scheme], default="tss")
        p.add_argument("--pseudocount", type=_positive_float, default=1.0)
        p.add_argument("--css-quantile", type=_unit_interval, default=0.5)
        p.add_argument("--prevalence", type=_fraction, default=0.6,
                       help="keep taxa present in more than this fraction of either group")
        p.add_argument("--no-prevalence-filter", action="store_true")


def _add_test_opts(p: argparse.ArgumentParser, method: bool = True) -> None:
    if method:
        p.add_argument("--method", choices=[m.value for m in Method], default="daa")
    p.add_argument("--lambda-min", type=_positive_float, default=DEFAULT_LAMBDA_MIN)
    p.add_argument("--permutations", type=_positive_int, default=DEFAULT_N_PERM)
    p.add_argument("--fdr", type=_fraction, default=DEFAULT_ALPHA)
    p.add_argument("--unsmoothed", action="store_true",
                   help="p = exceedances / n_perm instead of (1 + exceedances) / (n_perm + 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="daa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"daa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the maximum-entropy model")
    _add_common(p)
    p.add_argument("--lambda-min", type=_positive_float, default=DEFAULT_LAMBDA_MIN)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("assoc", help="per-taxon association test (naive or DAA)")
    _add_common(p)
    _add_test_opts(p)
    p.set_defaults(func=cmd_assoc)

    p = sub.add_parser("curve", help="detection counts versus cohort size")
    _add_common(p)
    _add_test_opts(p)
    p.add_argument("--sizes", type=_int_list, required=True, help="comma-separated sample counts")
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("synth", help="generate a synthetic cohort with planted effects")
    _add_common(p, inputs=False)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--preset", choices=sorted(PRESETS), default="table-s2-main")
    group.add_argument("--spec", type=Path, help="SyntheticSpec JSON (overrides sizes and preset)")
    p.add_argument("--n-cases", type=_positive_int, default=REFERENCE_CASES)
    p.add_argument("--n-controls", type=_positive_int, default=REFERENCE_CONTROLS)
    p.add_argument("--dim", type=_positive_int, default=47)
    p.add_argument("--density", type=_unit_interval, default=0.3)
    p.add_argument("--model-seed", type=_nonneg_int, default=DEFAULT_MODEL_SEED,
                   help="seed of the procedurally generated ground truth")
    p.add_argument("--depth", type=_positive_float, default=DEFAULT_DEPTH,
                   help="mean reads per sample in the written count table")
    p.add_argument("--real-counts", type=Path,
                   help="fit the ground truth to this count table and draw controls from it")
    p.add_argument("--real-labels", type=Path)
    p.add_argument("--norm", choices=[s.value for s in Scheme], default="tss")
    p.add_argument("--pseudocount", type=_positive_float, default=1.0)
    p.add_argument("--lambda-min", type=_positive_float, default=DEFAULT_LAMBDA_MIN)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("network", help="significant correlation / interaction edges")
    _add_common(p)
    p.add_argument("--kind", choices=["interaction", "correlation", "both"], default="both")
    p.add_argument("--lambda-min", type=_positive_float, default=DEFAULT_LAMBDA_MIN)
    p.add_argument("--permutations", type=_positive_int, default=DEFAULT_NETWORK_PERM)
    p.add_argument("--fdr", type=_fraction, default=DEFAULT_ALPHA)
    p.add_argument("--pos-cutoff", type=float, default=DEFAULT_POS_CUTOFF)
    p.add_argument("--neg-cutoff", type=float, default=DEFAULT_NEG_CUTOFF)
    p.set_defaults(func=cmd_network)

    p = sub.add_parser("classify", help="cross-validated L1 logistic accuracy of feature subsets")
    _add_common(p)
    _add_test_opts(p, method=False)
    p.add_argument("--features", action="append", default=[], metavar="NAME=TAXA",
                   help="named subset, e.g. planted=taxon_01,taxon_11 (repeatable)")
    p.add_argument("--folds", type=_positive_int, default=DEFAULT_FOLDS)
    p.add_argument("--repeats", type=_positive_int, default=DEFAULT_REPEATS)
    p.add_argument("--penalty", type=_positive_float, default=None)
    p.add_argument("--auc", action="store_true", help="report ROC AUC instead of accuracy")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("validate", help="compare 3rd/4th moments with the Gaussian prediction")
    _add_common(p)
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("robustness", help="stability and sensitivity diagnostics")
    _add_common(p)
    p.add_argument("--analysis", choices=["stability", "covariance", "lambda", "normalization", "all"],
                   default="all")
    p.add_argument("--lambda-min", type=_positive_float, default=DEFAULT_LAMBDA_MIN)
    p.add_argument("--permutations", type=_positive_int, default=DEFAULT_N_PERM)
    p.add_argument("--fdr", type=_fraction, default=DEFAULT_ALPHA)
    p.add_argument("--method", choices=[m.value for m in Method], default="daa")
    p.add_argument("--fraction", type=_fraction, default=0.5)
    p.add_argument("--repeats", type=_positive_int, default=DEFAULT_STABILITY_REPEATS)
    p.add_argument("--retained", type=_int_list, default=None,
                   help="retained-eigenvalue counts for the cutoff sweep (default: all)")
    p.add_argument("--sizes", type=_int_list, default=None,
                   help="cohort sizes for the normalization comparison (default: full cohort)")
    p.set_defaults(func=cmd_robustness)
    return parser


# helpers ---------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_paths(args: argparse.Namespace) -> dict[str, Path]:
    keys = ("counts", "logabund", "labels", "spec", "real_counts", "real_labels")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def write_manifest(args: argparse.Namespace, out: Path) -> None:
    config = {}
    for key, value in sorted(vars(args).items()):
        if key in _EXCLUDED_FROM_MANIFEST:
            continue
        config[key] = str(value) if isinstance(value, Path) else value
    doc = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in _input_paths(args).items()},
        "versions": {
            "daa": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "notes": {
            "tss_denominator": "raw read total without pseudocount",
            "network_null": "one shared permutation stream; each taxon permuted independently",
        },
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _check_inputs(args: argparse.Namespace) -> None:
    for name, path in _input_paths(args).items():
        if not path.is_file():
            raise DataError(f"--{name.replace('_', '-')}: file not found: {path}")


def load_data(args: argparse.Namespace) -> tuple[LogAbundanceMatrix, Labels]:
    labels = parse_labels(args.labels)
    if args.logabund is not None:
        l = parse_log_table(args.logabund)
        labels.case_mask(l.samples)
        return l, labels
    counts = parse_count_table(args.counts)
    if not args.no_prevalence_filter:
        counts = filter_prevalence(counts, labels, args.prevalence)
    return log_transform(counts, args.norm, args.pseudocount, args.css_quantile), labels


def _test_kwargs(args: argparse.Namespace) -> dict:
    return {"n_perm": args.permutations, "seed": args.seed, "alpha": args.fdr,
            "smoothed": not args.unsmoothed, "lambda_min": args.lambda_min, "jobs": args.jobs}


# subcommands -----------------------------------------------------------------

def cmd_fit(args: argparse.Namespace) -> None:
    l, _ = load_data(args)
    model = fit_model(l, args.lambda_min)
    model.save(args.out / "model.json")
    lines = ["index,eigenvalue,retained"]
    for i, v in enumerate(spectrum(model.C)):
        lines.append(f"{i + 1},{v:.10g},{int(i < model.retained)}")
    (args.out / "spectrum.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_assoc(args: argparse.Namespace) -> None:
    l, labels = load_data(args)
    table = run_method(args.method, l, labels, **_test_kwargs(args))
    table.to_tsv(args.out / f"assoc_{args.method}.tsv")


def cmd_curve(args: argparse.Namespace) -> None:
    l, labels = load_data(args)
    curve = detection_curve(l, labels, args.sizes, args.repeats, args.method, args.seed,
                            args.permutations, args.fdr, args.lambda_min, args.jobs)
    curve.to_csv(args.out / f"curve_{args.method}.csv")


def cmd_synth(args: argparse.Namespace) -> None:
    if args.spec is not None:
        spec = SyntheticSpec.from_json(args.spec.read_text(encoding="utf-8"))
        spec = SyntheticSpec(spec.planted, spec.n_cases, spec.n_controls, args.seed)
    else:
        spec = SyntheticSpec.preset(args.preset, args.n_cases, args.n_controls, args.seed)
    real = None
    if args.real_counts is not None:
        if args.real_labels is None:
            raise DataError("--real-counts requires --real-labels")
        real_labels = parse_labels(args.real_labels)
        counts = parse_count_table(args.real_counts)
        l_real = log_transform(counts, args.norm, args.pseudocount)
        truth = fit_ground_truth(l_real, real_labels, args.lambda_min)
        is_case = real_labels.case_mask(l_real.samples)
        real = l_real.select_samples(np.flatnonzero(~is_case))
    else:
        truth = make_ground_truth(args.dim, args.density, args.model_seed)
    cohort = generate_cohort(truth, spec, real)
    out = args.out
    write_log_table(cohort.data, out / "logabundance.tsv")
    write_count_table(to_counts(cohort.data, args.depth), out / "counts.tsv")
    write_labels(cohort.labels, cohort.data.samples, out / "labels.tsv")
    (out / "spec.json").write_text(spec.to_json(), encoding="utf-8")
    (out / "ground_truth.json").write_text(truth.model.to_json(), encoding="utf-8")
    write_truth(out / "truth.json", spec, truth, cohort.data.taxa)


def cmd_network(args: argparse.Namespace) -> None:
    l, _ = load_data(args)
    kinds = [EdgeKind.INTERACTION, EdgeKind.CORRELATION] if args.kind == "both" else [EdgeKind(args.kind)]
    for kind in kinds:
        sig = edge_significance(l, kind, args.permutations, args.seed, args.lambda_min, args.jobs)
        edges = extract_edges(sig.weights, sig.q, l.taxa, kind, args.pos_cutoff, args.neg_cutoff,
                              args.fdr)
        edges.to_tsv(args.out / f"network_{kind.value}.tsv")


def _parse_feature_sets(specs: Sequence[str], taxa: Sequence[str]) -> list[tuple[str, list[int]]]:
    index = {t: i for i, t in enumerate(taxa)}
    out = []
    for spec in specs:
        name, sep, members = spec.partition("=")
        if not sep or not name:
            raise DataError(f"--features expects NAME=TAXON[,TAXON...], got {spec!r}")
        idx = []
        for t in (m.strip() for m in members.split(",") if m.strip()):
            if t not in index:
                raise DataError(f"--features {name}: unknown taxon {t!r}")
            idx.append(index[t])
        out.append((name, idx))
    return out


def cmd_classify(args: argparse.Namespace) -> None:
    l, labels = load_data(args)
    subsets = _parse_feature_sets(args.features, l.taxa)
    if not subsets:
        kw = _test_kwargs(args)
        for method in (Method.DAA, Method.NAIVE):
            table = run_method(method, l, labels, **kw)
            subsets.append((f"{method.value}_significant", list(table.significant_indices())))
    reports = []
    for name, idx in subsets:
        if not idx:
            print(f"warning: subset {name!r} is empty; skipped", file=sys.stderr)
            continue
        rep = cross_validate(l, labels, idx, args.folds, args.repeats, args.penalty, args.seed,
                             "auc" if args.auc else "accuracy", args.jobs, name)
        rep.save(args.out / f"cv_{name}.json")
        reports.append(rep)
    write_cv_summary(reports, args.out / "cv_summary.csv")


def cmd_validate(args: argparse.Namespace) -> None:
    l, _ = load_data(args)
    rep = validate_moments(l, args.seed, baseline=not args.no_baseline)
    doc = {
        "n_samples": rep.n_samples,
        "n_triples": int(len(rep.triples)),
        "n_quadruples": int(len(rep.quads)),
        "pearson_r": rep.pearson_r,
        "baseline_r": rep.baseline_r,
    }
    (args.out / "moments.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def cmd_robustness(args: argparse.Namespace) -> None:
    l, labels = load_data(args)
    todo = {"stability", "covariance", "lambda", "normalization"} if args.analysis == "all" \
        else {args.analysis}
    out = args.out
    if "stability" in todo:
        rep = subsample_stability(l, labels, args.fraction, args.repeats, args.lambda_min, args.seed)
        rep.to_csv(out / "stability.csv")
    if "covariance" in todo:
        cmp = compare_group_covariances(l, labels, args.repeats, args.seed)
        (out / "covariance_pairs.csv").write_text(cmp.format_csv(), encoding="utf-8")
        doc = {"slope": cmp.slope, "r": cmp.r, "baseline_r": cmp.baseline_r,
               "baseline_sd": cmp.baseline_sd}
        (out / "covariance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")
    if "lambda" in todo:
        counts = args.retained or list(range(1, l.shape[0] + 1))
        sweep = lambda_sweep(l, labels, counts, args.permutations, args.seed, args.fdr, args.jobs)
        (out / "lambda_sweep.csv").write_text(sweep.format_csv(), encoding="utf-8")
        (out / "spectrum.csv").write_text(sweep.format_spectrum_csv(), encoding="utf-8")
    if "normalization" in todo:
        if args.counts is None:
            raise DataError("the normalization comparison needs --counts")
        counts = parse_count_table(args.counts)
        if not args.no_prevalence_filter:
            counts = filter_prevalence(counts, labels, args.prevalence)
        sizes = args.sizes or [len(counts.samples)]
        cmp = normalization_comparison(counts, labels, list(Scheme), sizes, args.repeats,
                                       args.method, args.permutations, args.seed, args.fdr,
                                       args.lambda_min, args.pseudocount, args.css_quantile, args.jobs)
        (out / "normalization.csv").write_text(cmp.format_csv(), encoding="utf-8")
        (out / "normalization_delta_h.csv").write_text(cmp.format_delta_h_csv(), encoding="utf-8")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _check_inputs(args)
        args.out.mkdir(parents=True, exist_ok=True)
        args.func(args)
        write_manifest(args, args.out)
    except DataError as exc:
        print(f"daa {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


run = main


if __name__ == "__main__":
    sys.exit(main())
