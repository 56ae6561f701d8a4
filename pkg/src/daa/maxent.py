"""Pairwise maximum-entropy (Gaussian) model of log-abundances.

The model density is proportional to ``exp(h.l + l.J.l / 2)``; matching its
first two moments to data gives ``J = C^-1`` and ``h = J m``.  The inverse is
taken on the eigen-subspace of ``C`` whose eigenvalues clear ``lambda_min``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import derive_rng
from .ingest import DataError
from .transform import LogAbundanceMatrix, Scheme

DEFAULT_LAMBDA_MIN = 0.01
SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8


def estimate_moments(l: LogAbundanceMatrix | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-taxon mean and the (n - 1)-normalized covariance across samples."""
    values = l.values if isinstance(l, LogAbundanceMatrix) else np.asarray(l, dtype=float)
    if values.ndim != 2:
        raise DataError("expected a taxa x samples matrix")
    n = values.shape[1]
    if n < 2:
        raise DataError(f"need at least 2 samples to estimate a covariance, got {n}")
    m = values.mean(axis=1)
    centered = values - m[:, None]
    C = centered @ centered.T / (n - 1)
    return m, (C + C.T) / 2


def _check_symmetric(C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise DataError(f"expected a square matrix, got shape {C.shape}")
    scale = max(np.abs(C).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(C - C.T).max(initial=0.0) > SYMMETRY_RTOL * scale:
        raise DataError("covariance matrix is not symmetric")
    return (C + C.T) / 2


def spectrum(C: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric matrix in decreasing order."""
    return np.linalg.eigvalsh(_check_symmetric(C))[::-1]


def pseudo_inverse(
    C: np.ndarray,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    retained: int | None = None,
) -> tuple[np.ndarray, int]:
    """Thresholded spectral inverse of a symmetric matrix.

    Eigenvalues ``>= lambda_min`` are inverted and the rest contribute nothing.
    Passing ``retained`` instead keeps exactly the ``retained`` largest
    eigenvalues, which is how threshold sweeps are expressed.

    Returns ``(J, number_of_eigenvalues_kept)``.
    """
    C = _check_symmetric(C)
    lam, U = np.linalg.eigh(C)
    if retained is None:
        if not lambda_min > 0:
            raise DataError(f"lambda_min must be positive, got {lambda_min}")
        keep = lam >= lambda_min
    else:
        if not 0 <= retained <= lam.size:
            raise DataError(f"cannot retain {retained} of {lam.size} eigenvalues")
        keep = np.zeros(lam.size, dtype=bool)
        if retained:
            keep[-retained:] = True
        if retained and lam[keep].min() <= 0:
            raise DataError(f"retaining {retained} eigenvalues would invert a non-positive one")
    Uk = U[:, keep]
    J = (Uk / lam[keep]) @ Uk.T
    return (J + J.T) / 2, int(keep.sum())


def infer_fields(J: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Host fields ``h = J m``."""
    J = np.asarray(J, dtype=float)
    m = np.asarray(m, dtype=float)
    if J.ndim != 2 or J.shape[0] != J.shape[1] or m.shape != (J.shape[1],):
        raise DataError(f"dimension mismatch: J {J.shape}, m {m.shape}")
    return J @ m


@dataclass(frozen=True)
class MaxEntModel:
    taxa: tuple[str, ...]
    m: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)
    J: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    lambda_min: float | None
    retained: int

    @property
    def dim(self) -> int:
        return len(self.taxa)

    @classmethod
    def from_moments(
        cls,
        taxa: Sequence[str],
        m: np.ndarray,
        C: np.ndarray,
        lambda_min: float = DEFAULT_LAMBDA_MIN,
    ) -> "MaxEntModel":
        J, kept = pseudo_inverse(C, lambda_min)
        return cls(tuple(taxa), np.asarray(m, float), _check_symmetric(C), J, infer_fields(J, m),
                   lambda_min, kept)

    def to_json(self) -> str:
        return _model_json(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MaxEntModel":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        model = cls.from_moments(doc["taxa"], np.array(doc["m"]), np.array(doc["C"]),
                                 doc["lambda_min"])
        if model.retained != doc["retained"]:
            raise DataError("stored retained-eigenvalue count disagrees with the stored matrix")
        return model


def fit_model(l: LogAbundanceMatrix, lambda_min: float = DEFAULT_LAMBDA_MIN) -> MaxEntModel:
    """Fit means, covariance, interactions and fields to all samples of ``l``."""
    m, C = estimate_moments(l)
    J, kept = pseudo_inverse(C, lambda_min)
    if kept == 0:
        raise DataError(f"every eigenvalue of C is below lambda_min={lambda_min}")
    return MaxEntModel(l.taxa, m, C, J, infer_fields(J, m), lambda_min, kept)


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _model_json(model: MaxEntModel) -> str:
    vec = lambda v: "[" + ", ".join(_num(x) for x in v) + "]"  # noqa: E731
    rows = ",\n    ".join(vec(row) for row in model.C)
    lam = "null" if model.lambda_min is None else _num(model.lambda_min)
    return (
        "{\n"
        f'  "taxa": {json.dumps(list(model.taxa))},\n'
        f'  "m": {vec(model.m)},\n'
        f'  "C": [\n    {rows}\n  ],\n'
        f'  "lambda_min": {lam},\n'
        f'  "retained": {model.retained},\n'
        f'  "h": {vec(model.h)}\n'
        "}\n"
    )


def sample(
    m: np.ndarray,
    C: np.ndarray,
    n: int,
    seed: int,
    taxa: Sequence[str] | None = None,
    sample_prefix: str = "s",
) -> LogAbundanceMatrix:
    """Draw ``n`` independent samples from ``N(m, C)``.

    Slightly negative eigenvalues (above ``-1e-8 * lambda_max``) are treated as
    zero; anything more negative is rejected.
    """
    m = np.asarray(m, dtype=float)
    C = _check_symmetric(C)
    if m.shape != (C.shape[0],):
        raise DataError(f"dimension mismatch: m {m.shape}, C {C.shape}")
    lam, U = np.linalg.eigh(C)
    tol = PSD_RTOL * max(lam.max(initial=0.0), 0.0)
    if lam.size and lam.min() < -tol:
        raise DataError(f"covariance is indefinite (smallest eigenvalue {lam.min():.3g})")
    factor = U * np.sqrt(np.clip(lam, 0.0, None))
    z = derive_rng(seed, "maxent.sample").standard_normal((n, m.size))
    values = m[:, None] + (z @ factor.T).T
    if taxa is None:
        taxa = [f"taxon_{i}" for i in range(m.size)]
    width = max(4, len(str(n)))
    samples = [f"{sample_prefix}{j:0{width}d}" for j in range(n)]
    return LogAbundanceMatrix(tuple(taxa), tuple(samples), values, Scheme.NONE, None)


def index_tuples(dim: int, order: int) -> np.ndarray:
    """All index tuples ``i1 <= i2 <= ... `` of the given order, one per row."""
    combos = list(itertools.combinations_with_replacement(range(dim), order))
    return np.array(combos, dtype=np.intp).reshape(len(combos), order)


def predict_higher_moments(
    m: np.ndarray, C: np.ndarray, triples: np.ndarray | None = None, quads: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian third non-central and fourth central moments.

    ``<l_i l_j l_k> = m_i m_j m_k + m_i C_jk + m_j C_ik + m_k C_ij`` and the
    fourth central moment is ``C_ij C_kl + C_il C_jk + C_ik C_jl`` (Isserlis).
    The third central moment is identically zero and is not returned.
    """
    m = np.asarray(m, dtype=float)
    C = np.asarray(C, dtype=float)
    if C.shape != (m.size, m.size):
        raise DataError(f"dimension mismatch: m {m.shape}, C {C.shape}")
    if triples is None:
        triples = index_tuples(m.size, 3)
    if quads is None:
        quads = index_tuples(m.size, 4)
    i, j, k = triples.T
    third = m[i] * m[j] * m[k] + m[i] * C[j, k] + m[j] * C[i, k] + m[k] * C[i, j]
    a, b, c, d = quads.T
    fourth = C[a, b] * C[c, d] + C[a, d] * C[b, c] + C[a, c] * C[b, d]
    return third, fourth


def _product_means(x: np.ndarray, tuples: np.ndarray, chunk: int = 8192) -> np.ndarray:
    # x is samples x taxa
    out = np.empty(len(tuples))
    for start in range(0, len(tuples), chunk):
        idx = tuples[start:start + chunk]
        prod = x[:, idx[:, 0]].copy()
        for col in range(1, idx.shape[1]):
            prod *= x[:, idx[:, col]]
        out[start:start + chunk] = prod.mean(axis=0)
    return out


def observed_moments(
    values: np.ndarray, triples: np.ndarray, quads: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample third non-central, third central and fourth central moments."""
    x = np.asarray(values, dtype=float).T
    centered = x - x.mean(axis=0)
    return (
        _product_means(x, triples),
        _product_means(centered, triples),
        _product_means(centered, quads),
    )


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass(frozen=True)
class MomentReport:
    """Observed vs Gaussian-predicted higher moments, one entry per index tuple."""

    triples: np.ndarray = field(repr=False)
    quads: np.ndarray = field(repr=False)
    third_noncentral_pred: np.ndarray = field(repr=False)
    third_noncentral_obs: np.ndarray = field(repr=False)
    third_central_obs: np.ndarray = field(repr=False)
    fourth_central_pred: np.ndarray = field(repr=False)
    fourth_central_obs: np.ndarray = field(repr=False)
    pearson_r: dict[str, float]
    baseline_r: dict[str, float]
    n_samples: int


def validate_moments(
    l: LogAbundanceMatrix, seed: int = 0, baseline: bool = True
) -> MomentReport:
    """Compare the data's 3rd/4th moments with those implied by its own (m, C).

    The baseline repeats the comparison on a Gaussian sample of the same size
    drawn from the fitted model, which bounds the correlation attainable at
    this sample size.
    """
    m, C = estimate_moments(l)
    triples = index_tuples(m.size, 3)
    quads = index_tuples(m.size, 4)
    pred3, pred4 = predict_higher_moments(m, C, triples, quads)
    obs3, obs3c, obs4 = observed_moments(l.values, triples, quads)
    r = {"third_noncentral": _pearson(pred3, obs3), "fourth_central": _pearson(pred4, obs4)}
    base = {"third_noncentral": float("nan"), "fourth_central": float("nan")}
    if baseline:
        draw = sample(m, C, l.shape[1], seed, l.taxa)
        b3, _, b4 = observed_moments(draw.values, triples, quads)
        base = {"third_noncentral": _pearson(pred3, b3), "fourth_central": _pearson(pred4, b4)}
    return MomentReport(triples, quads, pred3, obs3, obs3c, pred4, obs4, r, base, l.shape[1])
