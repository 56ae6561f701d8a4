"""Case/control association tests on mean log-abundance (naive) and on host fields (DAA).

Both tests share one permutation engine.  Labelings are generated in fixed
blocks whose random streams depend only on ``(seed, block index)``, so the
result does not depend on how many worker threads process the blocks.
"""

from __future__ import annotations

import enum
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from ._rng import derive_rng, derive_seed
from .ingest import DataError, Labels
from .maxent import DEFAULT_LAMBDA_MIN, estimate_moments, pseudo_inverse
from .transform import LogAbundanceMatrix

PERM_BLOCK = 512
DEFAULT_N_PERM = 10_000
DEFAULT_ALPHA = 0.05
_TIE_RTOL = 1e-9


class Method(str, enum.Enum):
    NAIVE = "naive"
    DAA = "daa"


def bh_fdr(
    p: Sequence[float] | np.ndarray, alpha: float = DEFAULT_ALPHA, allow_zero: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up q-values and ``q < alpha`` flags.

    ``q_(i) = min_{j >= i} p_(j) * m / j`` clipped at 1.  Zero p-values are
    only accepted with ``allow_zero`` (unsmoothed permutation tests).
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise DataError("p-values must be a vector")
    lo_ok = (p >= 0) if allow_zero else (p > 0)
    if not np.all(lo_ok & (p <= 1)):
        raise DataError("p-values must lie in (0, 1]")
    m = p.size
    if m == 0:
        return np.empty(0), np.empty(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(ranked, 1.0)
    return q, q < alpha


def _group_weights(masks: np.ndarray) -> np.ndarray:
    # rows are labelings; weight vector w gives mean_case - mean_ctrl = w . x
    masks = np.atleast_2d(masks)
    n_case = masks.sum(axis=1, keepdims=True)
    n_ctrl = masks.shape[1] - n_case
    return np.where(masks, 1.0 / n_case, -1.0 / n_ctrl)


def _check_groups(is_case: np.ndarray, minimum: int = 2) -> None:
    n_case = int(is_case.sum())
    n_ctrl = is_case.size - n_case
    if n_case < minimum or n_ctrl < minimum:
        raise DataError(
            f"each group needs at least {minimum} samples (cases={n_case}, controls={n_ctrl})"
        )


def _block_masks(is_case: np.ndarray, seed: int, block: int, size: int) -> np.ndarray:
    rng = derive_rng(seed, "assoc.permutation", block)
    return rng.permuted(np.broadcast_to(is_case, (size, is_case.size)), axis=1)


def permutation_exceedances(
    values: np.ndarray,
    is_case: np.ndarray,
    n_perm: int,
    seed: int,
    projector: np.ndarray | None = None,
    jobs: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Observed statistic and, per taxon, how many relabelings reach its magnitude.

    The statistic is the case-minus-control mean difference of each row of
    ``values``, optionally mapped through ``projector`` (``J`` for DAA).
    """
    values = np.asarray(values, dtype=float)
    observed = _group_weights(is_case) @ values.T
    if projector is not None:
        observed = observed @ projector
    observed = observed[0]
    row_scale = np.abs(values).max(axis=1) if values.size else np.zeros(0)
    if projector is not None:
        row_scale = np.abs(projector) @ row_scale
    threshold = np.abs(observed) * (1 - _TIE_RTOL) - _TIE_RTOL * (row_scale + 1e-300)

    def run_block(b: int) -> np.ndarray:
        size = min(PERM_BLOCK, n_perm - b * PERM_BLOCK)
        stat = _group_weights(_block_masks(is_case, seed, b, size)) @ values.T
        if projector is not None:
            stat = stat @ projector
        return (np.abs(stat) >= threshold).sum(axis=0)

    n_blocks = math.ceil(n_perm / PERM_BLOCK)
    if jobs > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            counts = list(pool.map(run_block, range(n_blocks)))
    else:
        counts = [run_block(b) for b in range(n_blocks)]
    total = np.sum(counts, axis=0) if counts else np.zeros(values.shape[0], dtype=int)
    return observed, total


def exact_exceedances(
    values: np.ndarray, is_case: np.ndarray, projector: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Like :func:`permutation_exceedances` but over every distinct labeling."""
    n = is_case.size
    k = int(is_case.sum())
    combos = list(itertools.combinations(range(n), k))
    masks = np.zeros((len(combos), n), dtype=bool)
    for r, idx in enumerate(combos):
        masks[r, list(idx)] = True
    observed = (_group_weights(is_case) @ values.T)
    stat = _group_weights(masks) @ values.T
    if projector is not None:
        observed = observed @ projector
        stat = stat @ projector
    observed = observed[0]
    scale = np.abs(values).max(axis=1)
    if projector is not None:
        scale = np.abs(projector) @ scale
    threshold = np.abs(observed) * (1 - _TIE_RTOL) - _TIE_RTOL * (scale + 1e-300)
    return observed, (np.abs(stat) >= threshold).sum(axis=0), len(combos)


def permutation_pvalues(exceed: np.ndarray, n_perm: int, smoothed: bool = True) -> np.ndarray:
    """``(1 + exceedances) / (n_perm + 1)``, or ``exceedances / n_perm`` unsmoothed."""
    exceed = np.asarray(exceed, dtype=float)
    if smoothed:
        return (1.0 + exceed) / (n_perm + 1.0)
    return exceed / n_perm


@dataclass(frozen=True)
class AssociationTable:
    taxa: tuple[str, ...]
    method: Method
    statistic: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    significant: np.ndarray = field(repr=False)
    mean_case: np.ndarray = field(repr=False)
    mean_ctrl: np.ndarray = field(repr=False)
    field_case: np.ndarray | None = field(default=None, repr=False)
    field_ctrl: np.ndarray | None = field(default=None, repr=False)
    alpha: float = DEFAULT_ALPHA
    n_perm: int = DEFAULT_N_PERM
    retained: int | None = None

    @property
    def n_significant(self) -> int:
        return int(self.significant.sum())

    def significant_indices(self) -> np.ndarray:
        return np.flatnonzero(self.significant)

    def significant_taxa(self) -> list[str]:
        return [self.taxa[i] for i in self.significant_indices()]

    def to_tsv(self, path: str | Path) -> None:
        Path(path).write_text(self.format_tsv(), encoding="utf-8")

    def format_tsv(self) -> str:
        g = lambda x: format(float(x), ".10g")  # noqa: E731
        lines = []
        if self.method is Method.DAA:
            lines.append("taxon\th_case\th_ctrl\tdelta_h\tdelta_h_rel\tp\tq\tsignificant")
            for i, taxon in enumerate(self.taxa):
                hc, hk = self.field_case[i], self.field_ctrl[i]
                rel = g(self.statistic[i] / abs(hk)) if hk != 0 else ""
                lines.append("\t".join([taxon, g(hc), g(hk), g(self.statistic[i]), rel,
                                        g(self.p[i]), g(self.q[i]), str(int(self.significant[i]))]))
        else:
            lines.append("taxon\tl_case\tl_ctrl\tfold_change\tdelta_l\tp\tq\tsignificant")
            for i, taxon in enumerate(self.taxa):
                lines.append("\t".join([
                    taxon, g(self.mean_case[i]), g(self.mean_ctrl[i]),
                    g(math.exp(self.statistic[i])), g(self.statistic[i]),
                    g(self.p[i]), g(self.q[i]), str(int(self.significant[i])),
                ]))
        return "\n".join(lines) + "\n"


def _split_means(values: np.ndarray, is_case: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return values[:, is_case].mean(axis=1), values[:, ~is_case].mean(axis=1)


def _exceed(values, is_case, n_perm, seed, projector, exact, jobs):
    if exact:
        return exact_exceedances(values, is_case, projector)
    obs, exc = permutation_exceedances(values, is_case, n_perm, seed, projector, jobs)
    return obs, exc, n_perm


def naive_mwas(
    l: LogAbundanceMatrix,
    labels: Labels,
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    smoothed: bool = True,
    exact: bool = False,
    jobs: int = 1,
) -> AssociationTable:
    """Two-sided permutation test on the difference of mean log-abundance."""
    is_case = labels.case_mask(l.samples)
    _check_groups(is_case)
    stat, exceed, n_perm = _exceed(l.values, is_case, n_perm, seed, None, exact, jobs)
    p = permutation_pvalues(exceed, n_perm, smoothed)
    q, flags = bh_fdr(p, alpha, allow_zero=not smoothed)
    mc, mk = _split_means(l.values, is_case)
    return AssociationTable(l.taxa, Method.NAIVE, stat, p, q, flags, mc, mk,
                            alpha=alpha, n_perm=n_perm)


def daa(
    l: LogAbundanceMatrix,
    labels: Labels,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    smoothed: bool = True,
    exact: bool = False,
    retained: int | None = None,
    jobs: int = 1,
) -> AssociationTable:
    """Direct association analysis: permutation test on ``delta_h = J delta_m``.

    ``J`` is the thresholded inverse of the covariance of all samples pooled,
    so it does not depend on the labels and is reused for every relabeling.
    """
    is_case = labels.case_mask(l.samples)
    _check_groups(is_case)
    _, C = estimate_moments(l)
    J, kept = pseudo_inverse(C, lambda_min, retained)
    if kept == 0:
        raise DataError(f"every eigenvalue of C is below lambda_min={lambda_min}")
    stat, exceed, n_perm = _exceed(l.values, is_case, n_perm, seed, J, exact, jobs)
    p = permutation_pvalues(exceed, n_perm, smoothed)
    q, flags = bh_fdr(p, alpha, allow_zero=not smoothed)
    mc, mk = _split_means(l.values, is_case)
    return AssociationTable(l.taxa, Method.DAA, stat, p, q, flags, mc, mk, J @ mc, J @ mk,
                            alpha=alpha, n_perm=n_perm, retained=kept)


def run_method(method: Method | str, l: LogAbundanceMatrix, labels: Labels, **kw) -> AssociationTable:
    method = Method(method)
    if method is Method.NAIVE:
        kw.pop("lambda_min", None)
        kw.pop("retained", None)
        return naive_mwas(l, labels, **kw)
    return daa(l, labels, **kw)


def effect_sizes(l: LogAbundanceMatrix, labels: Labels) -> np.ndarray:
    """Fold change ``exp(|mean_case - mean_ctrl|)`` of each taxon (always >= 1)."""
    is_case = labels.case_mask(l.samples)
    _check_groups(is_case, minimum=1)
    mc, mk = _split_means(l.values, is_case)
    return np.exp(np.abs(mc - mk))


def stratified_subsample(
    is_case: np.ndarray, size: int, rng: np.random.Generator
) -> np.ndarray:
    """Sorted sample indices of a subsample that keeps the case fraction."""
    n = is_case.size
    if size > n:
        raise DataError(f"subsample size {size} exceeds the {n} available samples")
    cases = np.flatnonzero(is_case)
    ctrls = np.flatnonzero(~is_case)
    n_case = int(round(size * cases.size / n))
    n_case = min(max(n_case, 0), cases.size)
    n_ctrl = size - n_case
    if n_ctrl > ctrls.size:
        n_ctrl, n_case = ctrls.size, size - ctrls.size
    picked = np.concatenate([rng.choice(cases, n_case, replace=False),
                             rng.choice(ctrls, n_ctrl, replace=False)])
    return np.sort(picked)


def curve_run_seed(seed: int, size: int, repeat: int) -> int:
    """Seed handed to the association method for one point of a detection curve."""
    return derive_seed(seed, "curve.method", size, repeat)


@dataclass(frozen=True)
class DetectionCurve:
    method: Method
    sizes: tuple[int, ...]
    counts: np.ndarray = field(repr=False)  # sizes x repeats
    median_effect: np.ndarray = field(repr=False)  # sizes x repeats, nan when nothing is significant
    significant: tuple[tuple[frozenset[int], ...], ...] = field(repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.counts.mean(axis=1)

    @property
    def sd(self) -> np.ndarray:
        return self.counts.std(axis=1)

    def to_csv(self, path: str | Path) -> None:
        rows = ["size,mean,sd"]
        for s, mu, sd in zip(self.sizes, self.mean, self.sd):
            rows.append(f"{s},{mu:.10g},{sd:.10g}")
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def detection_curve(
    l: LogAbundanceMatrix,
    labels: Labels,
    sizes: Sequence[int],
    repeats: int,
    method: Method | str,
    seed: int = 0,
    n_perm: int = DEFAULT_N_PERM,
    alpha: float = DEFAULT_ALPHA,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    jobs: int = 1,
) -> DetectionCurve:
    """Significant-taxon counts on stratified subsamples of increasing size."""
    method = Method(method)
    is_case = labels.case_mask(l.samples)
    for s in sizes:
        if s > is_case.size:
            raise DataError(f"subsample size {s} exceeds the {is_case.size} available samples")
    counts = np.zeros((len(sizes), repeats), dtype=int)
    med = np.full((len(sizes), repeats), np.nan)
    sig_sets: list[tuple[frozenset[int], ...]] = []
    for a, size in enumerate(sizes):
        row = []
        for r in range(repeats):
            idx = stratified_subsample(is_case, size, derive_rng(seed, "curve.subsample", size, r))
            sub = l.select_samples(idx)
            table = run_method(method, sub, labels, n_perm=n_perm, seed=curve_run_seed(seed, size, r),
                               alpha=alpha, lambda_min=lambda_min, jobs=jobs)
            counts[a, r] = table.n_significant
            hits = table.significant_indices()
            if hits.size:
                med[a, r] = float(np.median(np.exp(np.abs(table.mean_case - table.mean_ctrl))[hits]))
            row.append(frozenset(int(i) for i in hits))
        sig_sets.append(tuple(row))
    return DetectionCurve(method, tuple(int(s) for s in sizes), counts, med, tuple(sig_sets))


@dataclass(frozen=True)
class Calibration:
    method: Method
    pvalues: np.ndarray = field(repr=False)  # sorted
    ks_statistic: float
    ks_pvalue: float

    def ecdf(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.pvalues.size
        return self.pvalues, np.arange(1, n + 1) / n

    def to_csv(self, path: str | Path) -> None:
        x, y = self.ecdf()
        rows = ["rank,p,ecdf"] + [f"{i + 1},{a:.10g},{b:.10g}" for i, (a, b) in enumerate(zip(x, y))]
        Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def ks_uniform(p: np.ndarray) -> tuple[float, float]:
    if p.size == 0:
        return float("nan"), float("nan")
    res = stats.kstest(p, "uniform")
    return float(res.statistic), float(res.pvalue)


def pvalue_calibration(
    l: LogAbundanceMatrix,
    labels: Labels,
    method: Method | str,
    n_null_repeats: int,
    seed: int = 0,
    n_perm: int = DEFAULT_N_PERM,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    jobs: int = 1,
) -> Calibration:
    """Pool p-values from runs on globally shuffled labels and compare with U(0, 1)."""
    method = Method(method)
    is_case = labels.case_mask(l.samples)
    pooled = []
    for r in range(n_null_repeats):
        shuffled = derive_rng(seed, "calibration.labels", r).permutation(is_case)
        null_labels = Labels.from_mask(l.samples, shuffled)
        table = run_method(method, l, null_labels, n_perm=n_perm,
                           seed=derive_seed(seed, "calibration.method", r),
                           lambda_min=lambda_min, jobs=jobs)
        pooled.append(table.p)
    p = np.sort(np.concatenate(pooled)) if pooled else np.empty(0)
    ks, ks_p = ks_uniform(p)
    return Calibration(method, p, ks, ks_p)


def small_pvalue_excess(p: np.ndarray, threshold: float = 0.05, level: float = 0.95) -> tuple[int, int]:
    """Number of p-values below ``threshold`` and the upper edge of the binomial band.

    The band is the central ``level`` interval of ``Binomial(len(p), threshold)``;
    a count above its upper edge is an excess of small p-values.
    """
    p = np.asarray(p)
    upper = int(stats.binom.ppf(1 - (1 - level) / 2, p.size, threshold))
    return int((p < threshold).sum()), upper

