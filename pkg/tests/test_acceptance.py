"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the pytest terminal
summary under "acceptance criteria".  Synthetic data come from the default
ground-truth model; cohort seeds are 0..9.
"""

import time

import numpy as np
import pytest
from scipy import linalg

from conftest import ACCEPTANCE
from daa.assoc import (bh_fdr, daa, detection_curve, naive_mwas, pvalue_calibration,
                       small_pvalue_excess)
from daa.classify import cross_validate
from daa.cli import main
from daa.ingest import filter_prevalence
from daa.maxent import fit_model, infer_fields, pseudo_inverse, sample, validate_moments
from daa.synth import SyntheticSpec, generate_cohort, make_ground_truth, score, to_counts
from daa.transform import Scheme, log_transform

N_PERM = 10_000
ALPHA = 0.05
COHORT_SEEDS = range(10)


def record(number, ok, detail):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def model():
    return make_ground_truth()


def _cohort(truth, n_case, n_ctrl, seed):
    return generate_cohort(truth, SyntheticSpec.preset("table-s2-main", n_case, n_ctrl, seed))


def _recovery(truth, n_case, n_ctrl):
    rows = []
    for s in COHORT_SEEDS:
        c = _cohort(truth, n_case, n_ctrl, s)
        start = time.perf_counter()
        table = daa(c.data, c.labels, n_perm=N_PERM, seed=s, alpha=ALPHA)
        elapsed = time.perf_counter() - start
        hits, fps = score(table, c.truth)
        rows.append((len(hits), len(fps), elapsed))
    return rows


def test_criterion_01_planted_recovery(model):
    rows = _recovery(model, 275, 189)
    good = sum(h >= 4 and f == 0 for h, f, _ in rows)
    slowest = max(t for *_, t in rows)
    detail = (f"{good}/10 seeds with >=4 of 6 planted and no false positives "
              f"(hits/fp: {' '.join(f'{h}/{f}' for h, f, _ in rows)}); slowest run {slowest:.1f}s")
    record(1, good >= 8 and slowest < 300, detail)


def test_criterion_02_saturation(model):
    rows = _recovery(model, 889, 611)
    good = sum(h == 6 and f == 0 for h, f, _ in rows)
    detail = (f"{good}/10 seeds with 6/6 planted and no false positives at n=1500 "
              f"(hits/fp: {' '.join(f'{h}/{f}' for h, f, _ in rows)})")
    record(2, good >= 8, detail)


SIZES = [400, 800, 1200, 1600, 2000]


@pytest.fixture(scope="module")
def curves(model):
    # subsamples of a 2500-sample cohort with the reference case fraction
    base = _cohort(model, 1482, 1018, 0)
    naive = detection_curve(base.data, base.labels, SIZES, 10, "naive", seed=0, n_perm=N_PERM,
                            alpha=ALPHA)
    direct = detection_curve(base.data, base.labels, SIZES, 10, "daa", seed=0, n_perm=N_PERM,
                             alpha=ALPHA)
    return naive, direct


def test_criterion_03_spurious_inflation(curves):
    naive, direct = curves
    ok = naive.mean[-1] > 30 and naive.mean[-1] > naive.mean[0] and np.all(direct.mean <= 7)
    detail = (f"NAIVE mean {naive.mean[0]:.1f} (n=400) -> {naive.mean[-1]:.1f} (n=2000); "
              f"DAA means {np.round(direct.mean, 1).tolist()} (per-repeat max "
              f"{direct.counts.max()})")
    record(3, ok, detail)


def test_criterion_04_effect_size_floor(curves):
    naive, _ = curves
    fc400 = float(np.nanmedian(naive.median_effect[0]))
    fc2000 = float(np.nanmedian(naive.median_effect[-1]))
    drop = (fc400 - fc2000) / fc400
    detail = (f"median NAIVE fold change {fc400:.3f} (n=400) -> {fc2000:.3f} (n=2000), "
              f"relative drop {drop:.1%}")
    record(4, drop < 0.5, detail)


def test_criterion_05_calibration(model):
    c = _cohort(model, 275, 189, 0)
    null = pvalue_calibration(c.data, c.labels, "daa", 20, seed=0, n_perm=N_PERM)
    naive = naive_mwas(c.data, c.labels, n_perm=N_PERM, seed=0)
    count, upper = small_pvalue_excess(naive.p, 0.05, 0.95)
    ok = null.ks_pvalue > 0.01 and count > upper
    detail = (f"DAA null KS p={null.ks_pvalue:.3f} over {null.pvalues.size} p-values; "
              f"NAIVE {count}/47 p<0.05 vs binomial 95% upper edge {upper}")
    record(5, ok, detail)


def _oracle_pinv(C, lambda_min):
    w, V = linalg.eig(C)
    w, V = w.real, V.real
    V = V / np.linalg.norm(V, axis=0)
    keep = w >= lambda_min
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def test_criterion_06_linear_algebra_oracles():
    rng = np.random.default_rng(2024)
    worst_oracle = worst_mp = worst_h = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 31))
        rank = int(rng.integers(1, d + 1))
        A = rng.normal(size=(d, rank)) / np.sqrt(rank)
        C = A @ A.T + np.diag(rng.uniform(0, 0.5, d)) * (rng.random() < 0.5)
        C = (C + C.T) / 2
        J, _ = pseudo_inverse(C, 0.01)
        worst_oracle = max(worst_oracle, np.abs(J - _oracle_pinv(C, 0.01)).max())
        lam = np.linalg.eigvalsh(C)
        if np.all((lam >= 0.01) | (np.abs(lam) < 1e-9)):  # threshold only removes null modes
            worst_mp = max(worst_mp, np.abs(C @ J @ C - C).max(), np.abs(J @ C @ J - J).max(),
                           np.abs((C @ J).T - C @ J).max())
        m = rng.normal(size=d)
        h = infer_fields(J, m)
        ref = np.array([sum(J[i, k] * m[k] for k in range(d)) for i in range(d)])
        worst_h = max(worst_h, np.abs(h - ref).max() / max(np.abs(ref).max(), 1e-300))
    ok = worst_oracle < 1e-10 and worst_mp < 1e-8 and worst_h < 1e-12
    detail = (f"max |J - oracle| {worst_oracle:.1e}; Moore-Penrose residual {worst_mp:.1e}; "
              f"h = J m relative error {worst_h:.1e}")
    record(6, ok, detail)


def _bh_bruteforce(p, alpha):
    m = len(p)
    srt = sorted(p)
    q = []
    for x in p:
        rank = max(k for k in range(1, m + 1) if srt[k - 1] <= x)
        q.append(min(1.0, min(srt[k - 1] * m / k for k in range(rank, m + 1))))
    return np.array(q), np.array(q) < alpha


def test_criterion_07_bh_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        size = int(rng.integers(1, 101))
        if trial % 3 == 0:  # coarse grid: many ties
            p = rng.integers(1, 21, size) / 20.0
        else:
            p = rng.uniform(1e-6, 1.0, size) ** rng.uniform(1, 4)
        alpha = float(rng.choice([0.01, 0.05, 0.1]))
        q, flags = bh_fdr(p, alpha)
        q0, f0 = _bh_bruteforce(p.tolist(), alpha)
        mismatches += not (np.array_equal(q, q0) and np.array_equal(flags, f0))
    record(7, mismatches == 0, f"{1000 - mismatches}/1000 vectors identical to brute force")


def test_criterion_08_higher_moments(model):
    fitted = fit_model(_cohort(model, 275, 189, 0).data)
    draw = sample(fitted.m, fitted.C, 464, seed=8, taxa=fitted.taxa)
    rep = validate_moments(draw, seed=0, baseline=False)
    r3 = rep.pearson_r["third_noncentral"]
    r4 = rep.pearson_r["fourth_central"]
    record(8, r3 >= 0.99 and r4 >= 0.75, f"r(3rd noncentral) = {r3:.4f}, r(4th central) = {r4:.4f}")


def test_criterion_09_classifier(model):
    c = _cohort(model, 275, 189, 0)
    naive = naive_mwas(c.data, c.labels, n_perm=N_PERM, seed=0)
    planted = sorted(c.truth)
    pool = [i for i in naive.significant_indices() if i not in c.truth]
    rng = np.random.default_rng(9)
    random6 = sorted(rng.choice(pool, 6, replace=False).tolist()) if len(pool) >= 6 else None
    if random6 is None:  # too few spurious hits: top up with the next-ranked non-planted taxa
        order = [i for i in np.argsort(naive.p, kind="stable") if i not in c.truth]
        random6 = sorted(int(i) for i in order[:6])
    all_sig = naive.significant_indices().tolist()
    kw = dict(folds=5, repeats=100, seed=0)
    direct = cross_validate(c.data, c.labels, planted, name="planted", **kw)
    spurious = cross_validate(c.data, c.labels, random6, name="random", **kw)
    everything = cross_validate(c.data, c.labels, all_sig, name="naive", **kw)
    margin = direct.mean - spurious.mean
    within = abs(direct.mean - everything.mean) <= direct.sd
    detail = (f"planted {direct.mean:.3f}+-{direct.sd:.3f}, random non-planted significant "
              f"{spurious.mean:.3f} (margin {100 * margin:.1f} pp), all {len(all_sig)} NAIVE-"
              f"significant {everything.mean:.3f}")
    record(9, margin >= 0.05 and within, detail)


def test_criterion_10_normalization(model):
    c = _cohort(model, 275, 189, 0)
    counts = filter_prevalence(to_counts(c.data), c.labels, 0.6)
    found = {}
    for scheme in Scheme:
        l = log_transform(counts, scheme, 1.0)
        found[scheme.value] = daa(l, c.labels, n_perm=N_PERM, seed=0, alpha=ALPHA).n_significant
    spread = max(found.values()) - min(found.values())
    detail = f"DAA detections {found} on {counts.shape[0]} taxa; spread {spread}"
    record(10, spread <= 1, detail)


def _run_twice(tmp_path, name, argv):
    outs = []
    for jobs in ("1", "3"):
        out = tmp_path / f"{name}_{jobs}"
        assert main([*argv, "--jobs", jobs, "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    return outs[0] == outs[1] and len(outs[0]) > 1


def test_criterion_11_determinism(tmp_path):
    synth = tmp_path / "cohort"
    assert main(["synth", "--n-cases", "60", "--n-controls", "50", "--seed", "3",
                 "--out", str(synth)]) == 0
    data = ["--counts", str(synth / "counts.tsv"), "--labels", str(synth / "labels.tsv")]
    log = ["--logabund", str(synth / "logabundance.tsv"), "--labels", str(synth / "labels.tsv")]
    runs = {
        "synth": ["synth", "--n-cases", "60", "--n-controls", "50", "--seed", "3"],
        "fit": ["fit", *data],
        "assoc": ["assoc", *data, "--permutations", "2000", "--seed", "5"],
        "curve": ["curve", *log, "--sizes", "60,110", "--repeats", "2", "--permutations", "600",
                  "--method", "naive"],
        "network": ["network", *log, "--permutations", "150", "--seed", "2"],
        "classify": ["classify", *log, "--features", "p=taxon_01,taxon_11,taxon_19",
                     "--repeats", "4"],
        "validate": ["validate", *log, "--seed", "1"],
        "robustness": ["robustness", *data, "--repeats", "3", "--permutations", "300",
                       "--retained", "5,30", "--sizes", "80"],
    }
    same = {name: _run_twice(tmp_path, name, argv) for name, argv in runs.items()}
    bad = [k for k, v in same.items() if not v]
    record(11, not bad, f"byte-identical reruns at --jobs 1 vs 3 for {sum(same.values())}/"
                        f"{len(same)} subcommands" + (f"; differing: {bad}" if bad else ""))
