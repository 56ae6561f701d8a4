"""Normalization of read counts and conversion to natural-log abundances."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import CountMatrix, DataError


class Scheme(str, enum.Enum):
    TSS = "tss"
    CLR = "clr"
    CSS = "css"
    NONE = "none"


@dataclass(frozen=True)
class LogAbundanceMatrix:
    """Natural-log abundances, taxa in rows and samples in columns.

    ``pseudocount`` is ``None`` when the values were not derived from counts
    (for instance draws from a fitted model).
    """

    taxa: tuple[str, ...]
    samples: tuple[str, ...]
    values: np.ndarray = field(repr=False)
    scheme: Scheme = Scheme.NONE
    pseudocount: float | None = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True)
        taxa = tuple(str(t) for t in self.taxa)
        samples = tuple(str(s) for s in self.samples)
        if values.ndim != 2 or values.shape != (len(taxa), len(samples)):
            raise DataError(
                f"value matrix shape {values.shape} does not match "
                f"{len(taxa)} taxa x {len(samples)} samples"
            )
        if not np.all(np.isfinite(values)):
            raise DataError("log-abundances must be finite")
        if self.pseudocount is not None and not self.pseudocount > 0:
            raise DataError("pseudocount must be positive")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "taxa", taxa)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "scheme", Scheme(self.scheme))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def select_samples(self, idx: Sequence[int] | np.ndarray) -> "LogAbundanceMatrix":
        idx = np.asarray(idx)
        return LogAbundanceMatrix(
            self.taxa,
            tuple(self.samples[j] for j in idx),
            self.values[:, idx],
            self.scheme,
            self.pseudocount,
        )

    def select_taxa(self, idx: Sequence[int] | np.ndarray) -> "LogAbundanceMatrix":
        idx = np.asarray(idx)
        return LogAbundanceMatrix(
            tuple(self.taxa[i] for i in idx),
            self.samples,
            self.values[idx],
            self.scheme,
            self.pseudocount,
        )


def _css_scale(m: CountMatrix, quantile: float) -> np.ndarray:
    scale = np.empty(len(m.samples))
    for j, sample in enumerate(m.samples):
        col = m.counts[:, j]
        positive = col[col > 0]
        if positive.size == 0:
            raise DataError(f"sample {sample!r} has zero reads; CSS is undefined")
        q = np.quantile(positive, quantile)
        scale[j] = col[col <= q].sum()
    return scale


def log_transform(
    m: CountMatrix,
    scheme: Scheme | str = Scheme.TSS,
    pseudocount: float = 1.0,
    css_quantile: float = 0.5,
) -> LogAbundanceMatrix:
    """Normalize counts and take natural logs.

    tss
        ``ln((c + pc) / N_j)`` with ``N_j`` the raw read total of sample ``j``.
    none
        ``ln(c + pc)``.
    clr
        ``ln(c + pc)`` centered so that every taxon's mean over samples is 0.
    css
        ``ln((c + pc) / s_j)`` where ``s_j`` sums the sample's counts up to its
        ``css_quantile`` quantile of nonzero counts.
    """
    scheme = Scheme(scheme)
    if not pseudocount > 0:
        raise DataError(f"pseudocount must be positive, got {pseudocount}")
    counts = m.counts.astype(float)
    shifted = counts + pseudocount
    if scheme is Scheme.TSS:
        totals = counts.sum(axis=0)
        empty = np.flatnonzero(totals <= 0)
        if empty.size:
            raise DataError(f"sample {m.samples[empty[0]]!r} has zero reads; TSS is undefined")
        values = np.log(shifted) - np.log(totals)
    elif scheme is Scheme.NONE:
        values = np.log(shifted)
    elif scheme is Scheme.CLR:
        raw = np.log(shifted)
        values = raw - raw.mean(axis=1, keepdims=True)
    else:
        if not 0.0 < css_quantile <= 1.0:
            raise DataError(f"css quantile must lie in (0, 1], got {css_quantile}")
        scale = _css_scale(m, css_quantile)
        values = np.log(shifted) - np.log(scale)
    return LogAbundanceMatrix(m.taxa, m.samples, values, scheme, float(pseudocount))


def write_log_table(l: LogAbundanceMatrix, path: str | Path) -> None:
    """Taxa x samples TSV of log-abundances, written with full double precision."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["taxon", *l.samples])
        for name, row in zip(l.taxa, l.values):
            w.writerow([name, *(format(float(v), ".17g") for v in row)])


def parse_log_table(path: str | Path, scheme: Scheme | str = Scheme.NONE) -> LogAbundanceMatrix:
    """Read a table written by :func:`write_log_table` (or any real-valued taxa x samples TSV)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"log-abundance table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise DataError(f"{path}: no data rows")
    samples = [s.strip() for s in rows[0][1:]]
    taxa, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(rows[0])}")
        taxa.append(row[0].strip())
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise DataError(f"{path}: non-numeric value in row {r} (taxon {row[0]!r})") from None
    for what, names in (("taxon", taxa), ("sample", samples)):
        if len(set(names)) != len(names):
            raise DataError(f"{path}: duplicate {what} names")
    try:
        return LogAbundanceMatrix(tuple(taxa), tuple(samples), np.array(values), Scheme(scheme), None)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None
