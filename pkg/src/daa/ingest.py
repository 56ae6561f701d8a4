"""Count tables, case/control labels and the prevalence filter.

Count tables are tab-separated, taxa in rows and samples in columns, with a
header row of sample ids and the taxon name in the first column.  Label files
are two-column TSV (sample id, ``case``/``control``).
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Group(str, enum.Enum):
    CASE = "case"
    CONTROL = "control"

    @classmethod
    def parse(cls, text: str) -> "Group":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DataError(f"unknown group {text!r}; expected 'case' or 'control'") from None


def _check_unique(names: Sequence[str], what: str) -> None:
    seen: dict[str, int] = {}
    for i, name in enumerate(names):
        if name in seen:
            raise DataError(f"duplicate {what} {name!r} at positions {seen[name]} and {i}")
        seen[name] = i


@dataclass(frozen=True)
class CountMatrix:
    """Raw reads, ``counts[i, j]`` for taxon ``taxa[i]`` in sample ``samples[j]``."""

    taxa: tuple[str, ...]
    samples: tuple[str, ...]
    counts: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        taxa = tuple(str(t) for t in self.taxa)
        samples = tuple(str(s) for s in self.samples)
        counts = np.array(self.counts, dtype=np.int64, copy=True)
        if counts.ndim != 2 or counts.shape != (len(taxa), len(samples)):
            raise DataError(
                f"count matrix shape {counts.shape} does not match "
                f"{len(taxa)} taxa x {len(samples)} samples"
            )
        _check_unique(taxa, "taxon")
        _check_unique(samples, "sample")
        if counts.size and counts.min() < 0:
            i, j = np.argwhere(counts < 0)[0]
            raise DataError(f"negative count at taxon {taxa[i]!r}, sample {samples[j]!r}")
        counts.flags.writeable = False
        object.__setattr__(self, "taxa", taxa)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def select_taxa(self, keep: np.ndarray) -> "CountMatrix":
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep
        return CountMatrix(tuple(self.taxa[i] for i in idx), self.samples, self.counts[idx])

    def select_samples(self, idx: np.ndarray) -> "CountMatrix":
        idx = np.asarray(idx)
        return CountMatrix(self.taxa, tuple(self.samples[j] for j in idx), self.counts[:, idx])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (
            self.taxa == other.taxa
            and self.samples == other.samples
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Labels:
    """Case/control assignment for every sample."""

    assignment: Mapping[str, Group]

    def __post_init__(self) -> None:
        assignment = {str(k): Group(v) for k, v in self.assignment.items()}
        groups = set(assignment.values())
        if Group.CASE not in groups or Group.CONTROL not in groups:
            raise DataError("labels must contain at least one case and one control")
        object.__setattr__(self, "assignment", assignment)

    @classmethod
    def from_mask(cls, samples: Sequence[str], is_case: Sequence[bool]) -> "Labels":
        if len(samples) != len(is_case):
            raise DataError("mask length does not match sample count")
        return cls({s: Group.CASE if c else Group.CONTROL for s, c in zip(samples, is_case)})

    def case_mask(self, samples: Sequence[str]) -> np.ndarray:
        """Boolean vector aligned with ``samples``; raises if any sample is unlabeled."""
        missing = [s for s in samples if s not in self.assignment]
        if missing:
            raise DataError(f"{len(missing)} samples have no label, e.g. {missing[0]!r}")
        return np.array([self.assignment[s] is Group.CASE for s in samples], dtype=bool)

    def swapped(self) -> "Labels":
        flip = {Group.CASE: Group.CONTROL, Group.CONTROL: Group.CASE}
        return Labels({s: flip[g] for s, g in self.assignment.items()})


def parse_count_table(path: str | Path) -> CountMatrix:
    """Read a taxa x samples TSV of non-negative integer read counts."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"count table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty count table")
    header = rows[0]
    samples = [s.strip() for s in header[1:]]
    if not samples:
        raise DataError(f"{path}: header row has no sample ids")
    taxa: list[str] = []
    values = np.zeros((len(rows) - 1, len(samples)), dtype=np.int64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        taxa.append(row[0].strip())
        for c, cell in enumerate(row[1:]):
            text = cell.strip()
            try:
                v = int(text)
            except ValueError:
                raise DataError(
                    f"{path}: non-integer count {text!r} at row {r}, column {c + 2} "
                    f"(taxon {row[0]!r}, sample {samples[c]!r})"
                ) from None
            if v < 0:
                raise DataError(
                    f"{path}: negative count {text!r} at row {r}, column {c + 2} "
                    f"(taxon {row[0]!r}, sample {samples[c]!r})"
                )
            values[r - 2, c] = v
    try:
        return CountMatrix(tuple(taxa), tuple(samples), values)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_count_table(m: CountMatrix, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["taxon", *m.samples])
        for name, row in zip(m.taxa, m.counts):
            w.writerow([name, *(str(int(v)) for v in row)])


def parse_labels(path: str | Path) -> Labels:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"label file not found: {path}")
    assignment: dict[str, Group] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for r, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}: row {r} has {len(row)} fields, expected 2")
            sample, group = row[0].strip(), row[1].strip()
            if r == 1 and group.lower() not in ("case", "control"):
                continue  # header
            if sample in assignment:
                raise DataError(f"{path}: duplicate sample {sample!r} at row {r}")
            try:
                assignment[sample] = Group.parse(group)
            except DataError as exc:
                raise DataError(f"{path}: row {r}: {exc}") from None
    return Labels(assignment)


def write_labels(labels: Labels, samples: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample", "group"])
        for s in samples:
            w.writerow([s, labels.assignment[s].value])


def prevalence(m: CountMatrix, labels: Labels) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of case and of control samples in which each taxon has a nonzero count."""
    is_case = labels.case_mask(m.samples)
    present = m.counts > 0
    return present[:, is_case].mean(axis=1), present[:, ~is_case].mean(axis=1)


def filter_prevalence(m: CountMatrix, labels: Labels, threshold: float = 0.6) -> CountMatrix:
    """Keep taxa present (count > 0) in more than ``threshold`` of cases or of controls."""
    if not 0.0 < threshold < 1.0:
        raise DataError(f"prevalence threshold must lie in (0, 1), got {threshold}")
    case_prev, ctrl_prev = prevalence(m, labels)
    keep = (case_prev > threshold) | (ctrl_prev > threshold)
    if not keep.any():
        raise DataError(f"no taxon exceeds prevalence {threshold} in either group")
    return m.select_taxa(keep)
