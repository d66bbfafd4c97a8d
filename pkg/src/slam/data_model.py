"""Core data containers: time grid, multi-group waveform data, search
windows, and factor designs.

All containers are immutable after construction and safe to share across
worker threads. Long-format input is canonicalized to dense per-group
blocks at load time because every downstream computation indexes whole
per-subject series.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "TimeGrid",
    "WaveformDataset",
    "SearchWindows",
    "FactorDesign",
    "ValidationReport",
    "validate_dataset",
    "encode_design",
    "read_long_csv",
    "write_long_csv",
]

CSV_COLUMNS = ("subject", "group", "time", "y")
CSV_COLUMNS_TWOWAY = ("subject", "group", "time", "y", "group2")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Shared observation times x_1 < ... < x_n."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 3:
            raise ValidationError("time grid must be a 1-d vector with n >= 3")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("time grid contains non-finite values")
        if not np.all(np.diff(pts) > 0):
            raise ValidationError("time grid must be strictly increasing")
        object.__setattr__(self, "points", _freeze(pts))

    @property
    def n(self) -> int:
        return self.points.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.points[0]), float(self.points[-1])

    @property
    def width(self) -> float:
        return float(self.points[-1] - self.points[0])


@dataclass(frozen=True)
class SearchWindows:
    """Ordered component search intervals (a^m, b^m).

    Windows may share endpoints (a partition of the epoch is the common
    case); their interiors must be pairwise disjoint. Stationary points
    live strictly inside their window.
    """

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        if len(bounds) < 1:
            raise ValidationError("at least one search window is required")
        for a, b in bounds:
            if not (np.isfinite(a) and np.isfinite(b) and a < b):
                raise ValidationError(f"invalid window ({a}, {b}): need a < b")
        ordered = tuple(sorted(bounds))
        for (a1, b1), (a2, b2) in zip(ordered, ordered[1:]):
            if a2 < b1:
                raise ValidationError(
                    f"windows overlap: ({a1}, {b1}) and ({a2}, {b2})"
                )
        object.__setattr__(self, "bounds", ordered)

    @property
    def count(self) -> int:
        return len(self.bounds)

    def widths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.bounds])

    def lower(self) -> np.ndarray:
        return np.array([a for a, _ in self.bounds])

    def upper(self) -> np.ndarray:
        return np.array([b for _, b in self.bounds])

    @classmethod
    def from_normalized(cls, pairs, grid: TimeGrid) -> "SearchWindows":
        """Build windows given on the (0, 1) scale of the grid span."""
        lo, hi = grid.span
        w = hi - lo
        return cls(tuple((lo + a * w, lo + b * w) for a, b in pairs))


@dataclass(frozen=True)
class WaveformDataset:
    """Observed series on a shared grid, grouped by factor level.

    `observations[g]` is the (S_g, n) block for group `groups[g]`;
    subjects within a group are sorted by label so that results do not
    depend on input row order. For two-way designs each group is a
    factor-level cell and `cells[g]` records its (level-A, level-B) pair.
    """

    grid: TimeGrid
    groups: tuple[str, ...]
    observations: tuple[np.ndarray, ...]
    subject_labels: tuple[tuple[str, ...], ...]
    cells: tuple[tuple[str, str], ...] | None = None

    def __post_init__(self):
        if len(self.groups) < 1:
            raise ValidationError("need at least one group")
        if len(set(self.groups)) != len(self.groups):
            raise ValidationError("duplicate group labels")
        if len(self.observations) != len(self.groups):
            raise ValidationError("one observation block per group required")
        blocks = []
        for g, block in enumerate(self.observations):
            arr = np.asarray(block, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != self.grid.n:
                raise ValidationError(
                    f"group {self.groups[g]!r}: block must be (S_g, {self.grid.n})"
                )
            if arr.shape[0] < 1:
                raise ValidationError(f"group {self.groups[g]!r} has no subjects")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(
                    f"group {self.groups[g]!r}: non-finite observations"
                )
            if len(self.subject_labels[g]) != arr.shape[0]:
                raise ValidationError(
                    f"group {self.groups[g]!r}: one label per subject required"
                )
            blocks.append(_freeze(arr))
        object.__setattr__(self, "observations", tuple(blocks))
        object.__setattr__(self, "groups", tuple(str(g) for g in self.groups))
        object.__setattr__(
            self,
            "subject_labels",
            tuple(tuple(str(s) for s in labels) for labels in self.subject_labels),
        )

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def subjects_per_group(self) -> tuple[int, ...]:
        return tuple(block.shape[0] for block in self.observations)

    @property
    def n_series(self) -> int:
        return sum(self.subjects_per_group)

    def series(self, g: int, s: int) -> np.ndarray:
        return self.observations[g][s]

    def iter_series(self):
        """Yield (g, s, y) in canonical group/subject order."""
        for g, block in enumerate(self.observations):
            for s in range(block.shape[0]):
                yield g, s, block[s]

    def subject_index(self) -> tuple[tuple[int, int], ...]:
        """Flat (g, s) pairs in canonical order."""
        return tuple(
            (g, s)
            for g, S in enumerate(self.subjects_per_group)
            for s in range(S)
        )

    @classmethod
    def from_series(cls, series, cells=None) -> "WaveformDataset":
        """Build from a {(group, subject): (times, values)} mapping.

        Raises ValidationError listing every violation found.
        """
        report = validate_dataset(series)
        if not report.ok:
            raise ValidationError(report.violations)
        groups: list[str] = []
        per_group: dict[str, list[tuple[str, np.ndarray]]] = {}
        ref_times = None
        for (group, subject), (times, values) in series.items():
            group = str(group)
            if group not in per_group:
                groups.append(group)
                per_group[group] = []
            per_group[group].append((str(subject), np.asarray(values, float)))
            if ref_times is None:
                ref_times = np.asarray(times, float)
        grid = TimeGrid(ref_times)
        blocks, labels = [], []
        for group in groups:
            entries = sorted(per_group[group], key=lambda e: e[0])
            labels.append(tuple(name for name, _ in entries))
            blocks.append(np.vstack([vals for _, vals in entries]))
        cell_tuple = None
        if cells is not None:
            cell_tuple = tuple(tuple(cells[g]) for g in groups)
        return cls(grid, tuple(groups), tuple(blocks), tuple(labels), cell_tuple)


@dataclass
class ValidationReport:
    """Report-style validation outcome; callers decide whether to abort."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def validate_dataset(dataset, windows: SearchWindows | None = None) -> ValidationReport:
    """Check a dataset (or raw series mapping) and optional windows.

    Accepts either a WaveformDataset or a {(group, subject): (times, values)}
    mapping as produced by the CSV reader. Pure: identical inputs yield an
    identical report.
    """
    report = ValidationReport()
    grid_pts = None
    if isinstance(dataset, WaveformDataset):
        grid_pts = dataset.grid.points
    else:
        ref_times = None
        ref_key = None
        for key, (times, values) in sorted(dataset.items(), key=lambda kv: kv[0]):
            times = np.asarray(times, dtype=float)
            values = np.asarray(values, dtype=float)
            if times.shape != values.shape:
                report.add(f"series {key}: ragged series (times/values mismatch)")
                continue
            if ref_times is None:
                ref_times, ref_key = times, key
                if times.size < 3:
                    report.add(f"series {key}: fewer than 3 time points")
                elif not np.all(np.diff(times) > 0):
                    report.add(f"series {key}: grid not strictly increasing")
                if times.size and not np.all(np.isfinite(times)):
                    report.add(f"series {key}: non-finite times")
            else:
                if times.size != ref_times.size:
                    report.add(
                        f"series {key}: ragged series "
                        f"({times.size} values, expected {ref_times.size})"
                    )
                elif not np.array_equal(times, ref_times):
                    report.add(f"series {key}: time grid differs from {ref_key}")
            if values.size and not np.all(np.isfinite(values)):
                report.add(f"series {key}: missing or non-finite observations")
        grid_pts = ref_times
    if windows is not None and grid_pts is not None and grid_pts.size:
        lo, hi = float(grid_pts[0]), float(grid_pts[-1])
        ordered = sorted(windows.bounds)
        for (a1, b1), (a2, b2) in zip(ordered, ordered[1:]):
            if a2 < b1:
                report.add(f"windows overlap: ({a1}, {b1}) and ({a2}, {b2})")
        for a, b in windows.bounds:
            if b <= lo or a >= hi:
                report.add(f"window ({a}, {b}) outside grid span ({lo}, {hi})")
    return report


@dataclass(frozen=True)
class FactorDesign:
    """Dummy coding of group labels for the latent regression.

    `matrix` holds one row per group: all zeros for the baseline level,
    reference coding for the others. Real-valued columns (group-level
    numerical covariates) may be appended with `covariates`.
    """

    kind: str
    labels: tuple[str, ...]
    matrix: np.ndarray
    columns: tuple[str, ...]
    baseline: str

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape[0] != len(self.labels):
            raise ValidationError("design matrix must have one row per group")
        if mat.shape[1] != len(self.columns):
            raise ValidationError("design matrix must have one column per effect")
        if not np.all(np.isfinite(mat)):
            raise ValidationError("design matrix contains non-finite entries")
        rows = [tuple(row) for row in mat]
        if len(set(rows)) != len(rows):
            raise ValidationError("two groups share the same encoding")
        object.__setattr__(self, "matrix", _freeze(mat))

    @property
    def n_groups(self) -> int:
        return len(self.labels)

    @property
    def n_effects(self) -> int:
        return self.matrix.shape[1]

    def encode(self, label: str) -> np.ndarray:
        return self.matrix[self.labels.index(label)]

    def decode(self, row) -> str:
        row = tuple(np.asarray(row, dtype=float))
        for label, candidate in zip(self.labels, self.matrix):
            if tuple(candidate) == row:
                return label
        raise KeyError(f"no group encodes to {row}")


def encode_design(
    groups,
    kind: str = "one-way",
    baseline=None,
    cells=None,
    covariates=None,
) -> FactorDesign:
    """Reference-coded design for one-way or two-way layouts.

    The first label encountered is the baseline unless `baseline` is
    given. For two-way designs `cells` maps each group label to its
    (level-A, level-B) pair and the cells must form a crossed layout.
    `covariates` is an optional {name: {group: value}} mapping of
    group-level numerical covariates appended as real-valued columns.
    """
    labels = [str(g) for g in groups]
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate group labels")
    if kind == "one-way":
        ordered = list(labels)
        if baseline is not None:
            baseline = str(baseline)
            if baseline not in ordered:
                raise ValidationError(f"baseline {baseline!r} not among groups")
            ordered.remove(baseline)
            ordered.insert(0, baseline)
        base = ordered[0]
        columns = tuple(f"group[{lab}]" for lab in ordered[1:])
        mat = np.zeros((len(labels), len(columns)))
        for j, lab in enumerate(ordered[1:]):
            mat[labels.index(lab), j] = 1.0
        design = FactorDesign("one-way", tuple(labels), mat, columns, base)
    elif kind == "two-way":
        if cells is None:
            raise ValidationError("two-way design requires cell labels")
        cell_pairs = [tuple(map(str, cells[lab])) for lab in labels]
        levels_a = list(dict.fromkeys(p[0] for p in cell_pairs))
        levels_b = list(dict.fromkeys(p[1] for p in cell_pairs))
        if len(cell_pairs) != len(set(cell_pairs)):
            raise ValidationError("duplicate factor cells")
        if len(cell_pairs) != len(levels_a) * len(levels_b):
            raise ValidationError("two-way cells do not form a crossed layout")
        columns = tuple(f"factorA[{a}]" for a in levels_a[1:]) + tuple(
            f"factorB[{b}]" for b in levels_b[1:]
        )
        mat = np.zeros((len(labels), len(columns)))
        for i, (la, lb) in enumerate(cell_pairs):
            ia, ib = levels_a.index(la), levels_b.index(lb)
            if ia > 0:
                mat[i, ia - 1] = 1.0
            if ib > 0:
                mat[i, len(levels_a) - 1 + ib - 1] = 1.0
        base = labels[cell_pairs.index((levels_a[0], levels_b[0]))]
        design = FactorDesign("two-way", tuple(labels), mat, columns, base)
    else:
        raise ValidationError(f"unknown design kind {kind!r}")
    if covariates:
        extra_cols = []
        extra = []
        for name, per_group in covariates.items():
            extra_cols.append(str(name))
            extra.append([float(per_group[lab]) for lab in labels])
        mat = np.column_stack([design.matrix] + [np.asarray(c) for c in extra])
        design = FactorDesign(
            design.kind,
            design.labels,
            mat,
            design.columns + tuple(extra_cols),
            design.baseline,
        )
    return design


def read_long_csv(path) -> WaveformDataset:
    """Read a long-format CSV with header `subject,group,time,y`.

    An optional `group2` column defines a two-way layout: each
    (group, group2) pair becomes one factor cell.
    """
    series: dict[tuple[str, str], tuple[list[float], list[float]]] = {}
    cells: dict[str, tuple[str, str]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        twoway = "group2" in header
        required = set(CSV_COLUMNS)
        if not required.issubset(header):
            raise ValidationError(
                f"CSV header must contain {','.join(CSV_COLUMNS)}; got {','.join(header)}"
            )
        for row in reader:
            group = row["group"]
            if twoway:
                cell = (row["group"], row["group2"])
                group = f"{row['group']}*{row['group2']}"
                cells[group] = cell
            key = (group, row["subject"])
            bucket = series.setdefault(key, ([], []))
            bucket[0].append(float(row["time"]))
            bucket[1].append(float(row["y"]))
    if not series:
        raise ValidationError(f"no data rows in {path}")
    mapping = {k: (np.asarray(t), np.asarray(v)) for k, (t, v) in series.items()}
    return WaveformDataset.from_series(mapping, cells=cells if cells else None)


def write_long_csv(dataset: WaveformDataset, path) -> None:
    """Write a dataset in the long CSV format accepted by read_long_csv."""
    twoway = dataset.cells is not None
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS_TWOWAY if twoway else CSV_COLUMNS)
        for g, block in enumerate(dataset.observations):
            for s in range(block.shape[0]):
                label = dataset.subject_labels[g][s]
                for x, y in zip(dataset.grid.points, block[s]):
                    if twoway:
                        a, b = dataset.cells[g]
                        writer.writerow([label, a, repr(float(x)), repr(float(y)), b])
                    else:
                        writer.writerow(
                            [label, dataset.groups[g], repr(float(x)), repr(float(y))]
                        )
