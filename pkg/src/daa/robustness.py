"""Stability diagnostics: subsampling, group covariances, eigenvalue cutoff, normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_rng
from .assoc import (DEFAULT_ALPHA, DEFAULT_N_PERM, DetectionCurve, Method, daa, detection_curve,
                    stratified_subsample)
from .ingest import CountMatrix, DataError, Labels
from .maxent import DEFAULT_LAMBDA_MIN, estimate_moments, pseudo_inverse, spectrum
from .transform import LogAbundanceMatrix, Scheme, log_transform

DEFAULT_STABILITY_REPEATS = 50


@dataclass(frozen=True)
class StabilityRow:
    quantity: str
    index: str
    mean: float
    sd: float
    null_mean: float = float("nan")
    null_sd: float = float("nan")


@dataclass(frozen=True)
class StabilityReport:
    rows: tuple[StabilityRow, ...]
    repeats: int
    fraction: float

    def select(self, quantity: str) -> tuple[StabilityRow, ...]:
        return tuple(r for r in self.rows if r.quantity == quantity)

    def format_csv(self) -> str:
        g = lambda x: "" if np.isnan(x) else format(float(x), ".10g")  # noqa: E731
        lines = ["quantity,index,mean,sd,null_mean,null_sd"]
        for r in self.rows:
            lines.append(f"{r.quantity},{r.index},{g(r.mean)},{g(r.sd)},{g(r.null_mean)},{g(r.null_sd)}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.format_csv(), encoding="utf-8")


def _group_fields(values: np.ndarray, is_case: np.ndarray, lambda_min: float):
    _, C = estimate_moments(values)
    J, _ = pseudo_inverse(C, lambda_min)
    h_case = J @ values[:, is_case].mean(axis=1)
    h_ctrl = J @ values[:, ~is_case].mean(axis=1)
    return np.linalg.eigvalsh(C)[::-1], h_case, h_ctrl


def subsample_stability(
    l: LogAbundanceMatrix,
    labels: Labels,
    fraction: float = 0.5,
    repeats: int = DEFAULT_STABILITY_REPEATS,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    seed: int = 0,
) -> StabilityReport:
    """Spread of eigenvalues, per-group fields and ``delta_h`` over stratified subsamples.

    Each repeat keeps ``fraction`` of the samples (stratified, without
    replacement) and refits the model.  The null band for ``delta_h`` and
    for the eigenvalues comes from bootstrap resamples of the whole data set
    that ignore the labels: samples are drawn with replacement and the
    original group sizes are dealt out at random.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if repeats < 1:
        raise DataError("need at least one repeat")
    is_case = labels.case_mask(l.samples)
    n = is_case.size
    size = int(round(fraction * n))
    n_case = int(round(size * is_case.sum() / n))
    if min(n_case, size - n_case) < 2:
        raise DataError(f"a subsample of {size} leaves fewer than 2 samples in a group")
    eig, hc, hk = [], [], []
    for r in range(repeats):
        idx = stratified_subsample(is_case, size, derive_rng(seed, "robustness.subsample", r))
        e, a, b = _group_fields(l.values[:, idx], is_case[idx], lambda_min)
        eig.append(e)
        hc.append(a)
        hk.append(b)
    null_eig, null_dh = [], []
    for r in range(repeats):
        rng = derive_rng(seed, "robustness.bootstrap", r)
        idx = rng.integers(0, n, n)
        fake = rng.permutation(is_case)
        e, a, b = _group_fields(l.values[:, idx], fake, lambda_min)
        null_eig.append(e)
        null_dh.append(a - b)
    eig, hc, hk = np.array(eig), np.array(hc), np.array(hk)
    dh = hc - hk
    null_eig, null_dh = np.array(null_eig), np.array(null_dh)
    rows: list[StabilityRow] = []
    for k in range(eig.shape[1]):
        rows.append(StabilityRow("eigenvalue", str(k + 1), eig[:, k].mean(), eig[:, k].std(),
                                 null_eig[:, k].mean(), null_eig[:, k].std()))
    for i, taxon in enumerate(l.taxa):
        rows.append(StabilityRow("h_case", taxon, hc[:, i].mean(), hc[:, i].std()))
        rows.append(StabilityRow("h_control", taxon, hk[:, i].mean(), hk[:, i].std()))
        rows.append(StabilityRow("delta_h", taxon, dh[:, i].mean(), dh[:, i].std(),
                                 null_dh[:, i].mean(), null_dh[:, i].std()))
    return StabilityReport(tuple(rows), repeats, float(fraction))


@dataclass(frozen=True)
class CovarianceComparison:
    control: np.ndarray = field(repr=False)  # off-diagonal C entries, control group
    case: np.ndarray = field(repr=False)  # matching entries, case group
    slope: float
    r: float
    baseline_r: float
    baseline_sd: float

    def format_csv(self) -> str:
        lines = ["c_control,c_case"]
        lines += [f"{a:.10g},{b:.10g}" for a, b in zip(self.control, self.case)]
        return "\n".join(lines) + "\n"


def _offdiag_pair(values: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    iu = np.triu_indices(values.shape[0], 1)
    _, Ca = estimate_moments(values[:, a])
    _, Cb = estimate_moments(values[:, b])
    return Ca[iu], Cb[iu]


def _deming_slope(x: np.ndarray, y: np.ndarray, ratio: float) -> float:
    # ratio = var(error in y) / var(error in x)
    sxx, syy = np.var(x), np.var(y)
    sxy = np.mean((x - x.mean()) * (y - y.mean()))
    if sxy == 0:
        return 0.0
    d = syy - ratio * sxx
    return float((d + np.sqrt(d * d + 4 * ratio * sxy * sxy)) / (2 * sxy))


def compare_group_covariances(
    l: LogAbundanceMatrix, labels: Labels, repeats: int = 20, seed: int = 0
) -> CovarianceComparison:
    """Elementwise comparison of the case and control covariance matrices.

    ``slope`` is the Deming regression of case entries on control entries,
    with the ratio of error variances set to ``n_control / n_case`` (sampling
    noise of a covariance entry scales as ``1 / n``).  Ordinary least squares
    would be attenuated by the noise in the control entries.  ``r`` is the
    Pearson correlation of the two sets of entries.  The baseline repeats
    the correlation for random label-blind splits with the same group sizes;
    the smaller size is always dealt first so exchanging the labels leaves
    the baseline unchanged.
    """
    is_case = labels.case_mask(l.samples)
    n_case = int(is_case.sum())
    n_ctrl = is_case.size - n_case
    if min(n_case, n_ctrl) < 3:
        raise DataError("each group needs at least 3 samples to compare covariances")
    if l.shape[0] < 3:
        raise DataError("need at least 3 taxa for an elementwise covariance comparison")
    ctrl, case = _offdiag_pair(l.values, ~is_case, is_case)
    slope = _deming_slope(ctrl, case, n_ctrl / n_case)
    r = float(np.corrcoef(ctrl, case)[0, 1])
    small = min(n_case, n_ctrl)
    base = []
    for k in range(repeats):
        perm = derive_rng(seed, "robustness.covariance", k).permutation(is_case.size)
        first = np.zeros(is_case.size, dtype=bool)
        first[perm[:small]] = True
        a, b = _offdiag_pair(l.values, first, ~first)
        base.append(np.corrcoef(a, b)[0, 1])
    base = np.array(base) if base else np.array([np.nan])
    return CovarianceComparison(ctrl, case, slope, r, float(np.mean(base)), float(np.std(base)))


@dataclass(frozen=True)
class LambdaSweep:
    retained: tuple[int, ...]
    detections: tuple[int, ...]
    spectrum: np.ndarray = field(repr=False)

    def format_csv(self) -> str:
        lines = ["retained,eigenvalue_cutoff,detections"]
        for k, c in zip(self.retained, self.detections):
            cut = self.spectrum[k - 1] if k > 0 else float("inf")
            lines.append(f"{k},{cut:.10g},{c}")
        return "\n".join(lines) + "\n"

    def format_spectrum_csv(self) -> str:
        lines = ["index,eigenvalue"] + [f"{i + 1},{v:.10g}" for i, v in enumerate(self.spectrum)]
        return "\n".join(lines) + "\n"


def lambda_sweep(
    l: LogAbundanceMatrix,
    labels: Labels,
    retained_counts: Sequence[int],
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    jobs: int = 1,
) -> LambdaSweep:
    """DAA detection counts when only the largest ``k`` eigenvalues of ``C`` are inverted."""
    _, C = estimate_moments(l)
    lam = spectrum(C)
    for k in retained_counts:
        if not 1 <= k <= lam.size:
            raise DataError(f"retained count {k} outside 1..{lam.size}")
    counts = tuple(
        daa(l, labels, n_perm=n_perm, seed=seed, alpha=alpha, retained=int(k), jobs=jobs).n_significant
        for k in retained_counts
    )
    return LambdaSweep(tuple(int(k) for k in retained_counts), counts, lam)


@dataclass(frozen=True)
class NormalizationComparison:
    curves: dict[Scheme, DetectionCurve]
    delta_h: dict[Scheme, np.ndarray] = field(repr=False)
    taxa: tuple[str, ...] = ()

    def format_csv(self) -> str:
        lines = ["scheme,size,mean,sd"]
        for scheme, cur in self.curves.items():
            for s, mu, sd in zip(cur.sizes, cur.mean, cur.sd):
                lines.append(f"{scheme.value},{s},{mu:.10g},{sd:.10g}")
        return "\n".join(lines) + "\n"

    def format_delta_h_csv(self) -> str:
        schemes = list(self.delta_h)
        lines = ["taxon," + ",".join(s.value for s in schemes)]
        for i, taxon in enumerate(self.taxa):
            lines.append(taxon + "," + ",".join(f"{self.delta_h[s][i]:.10g}" for s in schemes))
        return "\n".join(lines) + "\n"


def normalization_comparison(
    counts: CountMatrix,
    labels: Labels,
    schemes: Sequence[Scheme | str],
    sizes: Sequence[int],
    repeats: int = 10,
    method: Method | str = Method.DAA,
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    pseudocount: float = 1.0,
    css_quantile: float = 0.5,
    jobs: int = 1,
) -> NormalizationComparison:
    """Detection curves of one method under several normalizations.

    Every scheme sees the same subsamples and permutation streams, so
    differences come from the normalization alone.  Full-data ``delta_h``
    per scheme is kept for taxon-level comparison.
    """
    if not schemes:
        raise DataError("no normalization schemes given")
    is_case = labels.case_mask(counts.samples)
    curves: dict[Scheme, DetectionCurve] = {}
    dh: dict[Scheme, np.ndarray] = {}
    for s in schemes:
        scheme = Scheme(s)
        l = log_transform(counts, scheme, pseudocount, css_quantile)
        curves[scheme] = detection_curve(l, labels, sizes, repeats, method, seed, n_perm, alpha,
                                         lambda_min, jobs)
        _, C = estimate_moments(l)
        J, _ = pseudo_inverse(C, lambda_min)
        dm = l.values[:, is_case].mean(axis=1) - l.values[:, ~is_case].mean(axis=1)
        dh[scheme] = J @ dm
    return NormalizationComparison(curves, dh, counts.taxa)
