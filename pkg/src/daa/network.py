"""Correlation and interaction networks with permutation-calibrated edges.

Interaction weights are the normalized, sign-flipped entries of ``J``,
``-J_ij / sqrt(J_ii J_jj)`` (partial correlations), so that positive weights
mean the two taxa tend to co-occur, as for correlations, and both networks
can share one pair of magnitude cutoffs.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_rng
from .assoc import DEFAULT_ALPHA, bh_fdr
from .ingest import DataError
from .maxent import DEFAULT_LAMBDA_MIN, estimate_moments, pseudo_inverse
from .transform import LogAbundanceMatrix

DEFAULT_POS_CUTOFF = 0.27
DEFAULT_NEG_CUTOFF = -0.15
DEFAULT_NETWORK_PERM = 1000
_BLOCK = 64


class EdgeKind(str, enum.Enum):
    INTERACTION = "interaction"
    CORRELATION = "correlation"


def _weights_from_cov(C: np.ndarray, kind: EdgeKind, lambda_min: float) -> np.ndarray:
    if kind is EdgeKind.CORRELATION:
        d = np.sqrt(np.diag(C))
        with np.errstate(divide="ignore", invalid="ignore"):
            R = C / np.outer(d, d)
        return np.nan_to_num(R, nan=0.0)
    J, _ = pseudo_inverse(C, lambda_min)
    d = np.sqrt(np.clip(np.diag(J), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        P = -J / np.outer(d, d)
    P = np.nan_to_num(P, nan=0.0, posinf=0.0, neginf=0.0)
    np.fill_diagonal(P, 1.0)
    return P


def network_weights(
    l: LogAbundanceMatrix | np.ndarray,
    kind: EdgeKind | str,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
) -> np.ndarray:
    """Pearson correlations, or partial correlations from the thresholded ``J``."""
    _, C = estimate_moments(l)
    return _weights_from_cov(C, EdgeKind(kind), lambda_min)


@dataclass(frozen=True)
class EdgeSignificance:
    kind: EdgeKind
    weights: np.ndarray = field(repr=False)
    p: np.ndarray = field(repr=False)
    q: np.ndarray = field(repr=False)
    n_perm: int


def edge_significance(
    l: LogAbundanceMatrix,
    kind: EdgeKind | str,
    n_perm: int = DEFAULT_NETWORK_PERM,
    seed: int = 0,
    lambda_min: float = DEFAULT_LAMBDA_MIN,
    jobs: int = 1,
) -> EdgeSignificance:
    """Two-sided per-pair permutation p-values and BH q-values over all pairs.

    Every permutation shuffles each taxon's row independently, which destroys
    all dependence between taxa while keeping their marginals, and the whole
    weight matrix is recomputed from the shuffled data.  One permutation
    stream serves every pair.  Diagonal entries of ``p`` and ``q`` are 1.
    """
    kind = EdgeKind(kind)
    values = l.values if isinstance(l, LogAbundanceMatrix) else np.asarray(l, dtype=float)
    d, n = values.shape
    if n < 3:
        raise DataError(f"edge significance needs at least 3 samples, got {n}")
    if d < 2:
        raise DataError("edge significance needs at least 2 taxa")
    observed = network_weights(values, kind, lambda_min)
    iu = np.triu_indices(d, 1)
    target = np.abs(observed[iu]) * (1 - 1e-9)

    def run_block(b: int) -> np.ndarray:
        rng = derive_rng(seed, "network.permutation", b)
        count = np.zeros(iu[0].size, dtype=np.int64)
        for _ in range(min(_BLOCK, n_perm - b * _BLOCK)):
            shuffled = rng.permuted(values, axis=1)
            w = network_weights(shuffled, kind, lambda_min)
            count += np.abs(w[iu]) >= target
        return count

    n_blocks = math.ceil(n_perm / _BLOCK)
    if jobs > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            counts = list(pool.map(run_block, range(n_blocks)))
    else:
        counts = [run_block(b) for b in range(n_blocks)]
    exceed = np.sum(counts, axis=0) if counts else np.zeros(iu[0].size)
    p_pairs = (1.0 + exceed) / (n_perm + 1.0)
    q_pairs, _ = bh_fdr(p_pairs)
    p = np.ones((d, d))
    q = np.ones((d, d))
    p[iu] = p_pairs
    q[iu] = q_pairs
    p.T[iu] = p_pairs
    q.T[iu] = q_pairs
    return EdgeSignificance(kind, observed, p, q, n_perm)


@dataclass(frozen=True)
class Edge:
    a: str
    b: str
    weight: float
    q: float


@dataclass(frozen=True)
class EdgeList:
    edges: tuple[Edge, ...]
    kind: EdgeKind
    thresholds: tuple[float, float]
    alpha: float = DEFAULT_ALPHA

    def __len__(self) -> int:
        return len(self.edges)

    def pairs(self) -> set[frozenset[str]]:
        return {frozenset((e.a, e.b)) for e in self.edges}

    def format_tsv(self) -> str:
        lines = ["taxon_a\ttaxon_b\tkind\tweight\tq"]
        for e in self.edges:
            lines.append(f"{e.a}\t{e.b}\t{self.kind.value}\t{e.weight:.10g}\t{e.q:.10g}")
        return "\n".join(lines) + "\n"

    def to_tsv(self, path: str | Path) -> None:
        Path(path).write_text(self.format_tsv(), encoding="utf-8")


def extract_edges(
    weights: np.ndarray,
    q: np.ndarray,
    taxa: tuple[str, ...] | list[str],
    kind: EdgeKind | str = EdgeKind.INTERACTION,
    pos_cutoff: float = DEFAULT_POS_CUTOFF,
    neg_cutoff: float = DEFAULT_NEG_CUTOFF,
    alpha: float = DEFAULT_ALPHA,
) -> EdgeList:
    """Pairs with ``weight > pos_cutoff`` or ``weight < neg_cutoff`` and ``q < alpha``.

    Edges are ordered by decreasing ``|weight|``; ties keep upper-triangle
    order so the output is deterministic.
    """
    weights = np.asarray(weights, dtype=float)
    q = np.asarray(q, dtype=float)
    d = len(taxa)
    if weights.shape != (d, d) or q.shape != (d, d):
        raise DataError(f"expected {d}x{d} weight and q matrices")
    if not (np.allclose(weights, weights.T, equal_nan=True) and np.allclose(q, q.T, equal_nan=True)):
        raise DataError("weight and q matrices must be symmetric")
    if neg_cutoff > pos_cutoff:
        raise DataError("negative cutoff must not exceed the positive cutoff")
    iu = np.triu_indices(d, 1)
    w = weights[iu]
    qq = q[iu]
    keep = ((w > pos_cutoff) | (w < neg_cutoff)) & (qq < alpha)
    idx = np.flatnonzero(keep)
    idx = idx[np.argsort(-np.abs(w[idx]), kind="stable")]
    edges = tuple(Edge(taxa[iu[0][k]], taxa[iu[1][k]], float(w[k]), float(qq[k])) for k in idx)
    return EdgeList(edges, EdgeKind(kind), (pos_cutoff, neg_cutoff), alpha)
