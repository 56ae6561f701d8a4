"""L1-penalized logistic regression and repeated stratified cross-validation.

The solver is accelerated proximal gradient (FISTA) with adaptive restart on
``mean log-loss + penalty * ||w||_1``; the intercept is not penalized.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special, stats

from ._rng import derive_rng
from .ingest import DataError, Labels
from .transform import LogAbundanceMatrix

DEFAULT_FOLDS = 5
DEFAULT_REPEATS = 100
PENALTY_LADDER = (0.003, 0.01, 0.03, 0.1, 0.3)
LADDER_REPEATS = 5
PLATEAU_SLACK = 0.01
TOL = 1e-6
MAX_ITER = 50_000


def l1_logistic_fit(
    X: np.ndarray,
    y: np.ndarray,
    penalty: float,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> tuple[np.ndarray, float]:
    """Minimize ``mean(log(1 + exp(z)) - y z) + penalty * sum|w|`` with ``z = X w + b``.

    Stops when the proximal-gradient mapping (the optimality residual, equal
    to the gradient on unpenalized coordinates) has max-norm below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("feature matrix contains non-finite values")
    if not penalty > 0:
        raise DataError(f"penalty must be positive, got {penalty}")
    y = y.astype(float)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be binary 0/1")
    n_pos = y.sum()
    if n_pos == 0 or n_pos == y.size:
        raise DataError("both classes must be present to fit a classifier")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    # Lipschitz constant of the mean log-loss gradient
    L = max(np.linalg.norm(Xa, 2) ** 2 / (4.0 * n), 1e-12)
    step = 1.0 / L
    x = np.zeros(d + 1)
    x[-1] = np.log(n_pos / (n - n_pos))
    v = x.copy()
    t = 1.0

    def grad(p: np.ndarray) -> np.ndarray:
        return Xa.T @ (special.expit(Xa @ p) - y) / n

    def prox(p: np.ndarray) -> np.ndarray:
        out = p.copy()
        out[:-1] = np.sign(p[:-1]) * np.maximum(np.abs(p[:-1]) - step * penalty, 0.0)
        return out

    for _ in range(max_iter):
        x_new = prox(v - step * grad(v))
        # optimality residual at the new point
        residual = (x_new - prox(x_new - step * grad(x_new))) / step
        if np.abs(residual).max() < tol:
            x = x_new
            break
        if np.dot(v - x_new, x_new - x) > 0:  # adaptive restart
            t = 1.0
            v = x_new.copy()
        else:
            t_new = (1.0 + np.sqrt(1.0 + 4.0 * t * t)) / 2.0
            v = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
    else:
        raise RuntimeError(f"L1 logistic fit did not converge in {max_iter} iterations")
    w = x[:-1]
    w[np.abs(w) < 1e-12] = 0.0
    return w, float(x[-1])


def stratified_folds(y: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold index per sample; every class is dealt round-robin after a shuffle.

    Per-class counts of any two folds differ by at most one, and the deal
    continues across classes so fold sizes stay balanced as well.
    """
    y = np.asarray(y)
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < folds:
        raise DataError(f"{folds} folds exceed the minority-class size {counts.min()}")
    assign = np.empty(y.size, dtype=int)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        assign[idx] = (offset + np.arange(idx.size)) % folds
        offset = (offset + idx.size) % folds
    return assign


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def auc_score(y: np.ndarray, score: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(score)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _cv_scores(X, y, folds, repeats, penalty, seed, metric, jobs, tag="classify.partition"):
    def one_repeat(r: int) -> list[float]:
        assign = stratified_folds(y, folds, derive_rng(seed, tag, r))
        out = []
        for k in range(folds):
            test = assign == k
            Xtr, Xte = _standardize(X[~test], X[test])
            w, b = l1_logistic_fit(Xtr, y[~test], penalty)
            z = Xte @ w + b
            if metric == "auc":
                out.append(auc_score(y[test], z))
            else:
                out.append(float(np.mean((z > 0) == (y[test] == 1))))
        return out

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one_repeat, range(repeats)))
    else:
        rows = [one_repeat(r) for r in range(repeats)]
    return np.array(rows, dtype=float).reshape(-1)


def select_penalty(
    X: np.ndarray, y: np.ndarray, ladder: Sequence[float] = PENALTY_LADDER,
    folds: int = DEFAULT_FOLDS, repeats: int = LADDER_REPEATS, seed: int = 0,
    metric: str = "accuracy", jobs: int = 1,
) -> tuple[float, np.ndarray]:
    """Penalty at the flattest point of the ladder's accuracy profile.

    Flatness of a rung is its largest accuracy change to a neighbouring rung.
    Only rungs within ``PLATEAU_SLACK`` of the best mean are eligible, which
    keeps the all-zero-weights regime at large penalties (flat but useless)
    from winning.  Ties go to the higher accuracy, then to the smaller penalty.
    """
    ladder = sorted(float(p) for p in ladder)
    if not ladder:
        raise DataError("penalty ladder is empty")
    means = np.array([
        _cv_scores(X, y, folds, repeats, p, seed, metric, jobs, "classify.ladder").mean()
        for p in ladder
    ])
    if len(ladder) == 1:
        return ladder[0], means
    diffs = np.abs(np.diff(means))
    flat = np.empty(len(ladder))
    flat[0] = diffs[0]
    flat[-1] = diffs[-1]
    flat[1:-1] = np.maximum(diffs[:-1], diffs[1:])
    flat[means < means.max() - PLATEAU_SLACK] = np.inf
    order = np.lexsort((np.arange(len(ladder)), -np.round(means, 12), np.round(flat, 12)))
    return ladder[order[0]], means


@dataclass(frozen=True)
class CVReport:
    feature_subset: tuple[int, ...]
    fold_scores: tuple[float, ...] = field(repr=False)
    mean: float
    sd: float
    penalty: float
    selected_features: tuple[int, ...]
    metric: str = "accuracy"
    folds: int = DEFAULT_FOLDS
    repeats: int = DEFAULT_REPEATS
    name: str = ""

    @property
    def fold_accuracies(self) -> tuple[float, ...]:
        return self.fold_scores

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def csv_row(self) -> str:
        return f"{self.name},{self.mean:.10g},{self.sd:.10g}"


def write_cv_summary(reports: Sequence[CVReport], path: str | Path) -> None:
    rows = ["subset_name,mean_accuracy,sd"] + [r.csv_row() for r in reports]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def cross_validate(
    l: LogAbundanceMatrix,
    labels: Labels,
    subset: Sequence[int],
    folds: int = DEFAULT_FOLDS,
    repeats: int = DEFAULT_REPEATS,
    penalty: float | None = None,
    seed: int = 0,
    metric: str = "accuracy",
    jobs: int = 1,
    name: str = "",
) -> CVReport:
    """Repeated stratified k-fold scores of an L1 logistic model on ``subset``.

    Features are standardized with training-fold statistics only.  With
    ``penalty=None`` the penalty is picked from :data:`PENALTY_LADDER`.
    ``selected_features`` are the subset members with nonzero weight in a
    fit on all samples at the chosen penalty.
    """
    subset = tuple(int(i) for i in subset)
    if not subset:
        raise DataError("feature subset is empty")
    if len(set(subset)) != len(subset) or min(subset) < 0 or max(subset) >= l.shape[0]:
        raise DataError("feature subset must hold distinct valid taxon indices")
    if metric not in ("accuracy", "auc"):
        raise DataError(f"unknown metric {metric!r}")
    y = labels.case_mask(l.samples).astype(int)
    X = l.values[list(subset)].T
    stratified_folds(y, folds, np.random.default_rng(0))  # validates fold count early
    if penalty is None:
        penalty, _ = select_penalty(X, y, folds=folds, seed=seed, metric=metric, jobs=jobs)
    scores = _cv_scores(X, y, folds, repeats, penalty, seed, metric, jobs)
    Xs, _ = _standardize(X, X)
    w, _ = l1_logistic_fit(Xs, y, penalty)
    selected = tuple(s for s, wi in zip(subset, w) if wi != 0)
    return CVReport(subset, tuple(float(s) for s in scores), float(scores.mean()),
                    float(scores.std()), float(penalty), selected, metric, folds, repeats, name)
