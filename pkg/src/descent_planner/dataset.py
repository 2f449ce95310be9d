"""Dataset ingestion, partitioning, and synthesis.

A Dataset is an immutable collection of raw text records grouped into
contiguous partitions. Records stay unparsed here; turning a record into a
numeric data unit is the transform operator's job, which lets the engine delay
parsing for plans that only touch a sample of the data.

Two on-disk formats are supported:

* ``dense-csv``: comma-separated decimals, first column is the label unless a
  column spec says otherwise.
* ``libsvm-sparse``: ``<label> <idx>:<val> ...`` with 1-based, strictly
  increasing feature indices.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .errors import IngestError

DENSE_CSV = "dense-csv"
LIBSVM_SPARSE = "libsvm-sparse"

#: Preset partition size: one HDFS-style 128 MB block.
DEFAULT_PARTITION_BYTES = 128 * 1024 * 1024


@dataclass(frozen=True)
class ColumnSpec:
    """1-based column selection for dense files: one label column and an
    inclusive feature range."""

    label_column: int
    feature_start: int
    feature_end: int

    def __post_init__(self):
        if self.label_column < 1 or self.feature_start < 1:
            raise ValueError("column indices are 1-based")
        if self.feature_end < self.feature_start:
            raise ValueError("feature range end before start")
        if self.feature_start <= self.label_column <= self.feature_end:
            raise ValueError("label column overlaps feature range")

    @property
    def num_features(self) -> int:
        return self.feature_end - self.feature_start + 1


@dataclass(frozen=True)
class RawRecord:
    """One input line plus its location in the partitioned layout."""

    text: bytes
    partition_id: int
    offset: int


@dataclass
class Partition:
    records: list
    size_bytes: int


@dataclass(frozen=True)
class DatasetStats:
    """Summary statistics gathered in a single ingest scan.

    ``units_per_partition`` follows the layout formula
    ``ceil(num_units * partition_bytes / size_bytes)``; cost-model fixtures may
    construct stats with an explicit value instead.
    """

    num_units: int
    num_features: int
    size_bytes: int
    density: float
    units_per_partition: int


@dataclass
class Dataset:
    partitions: list
    format: str
    stats: DatasetStats
    partition_bytes: int
    columns: Optional[ColumnSpec] = None
    _starts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        counts = [len(p.records) for p in self.partitions]
        self._starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    @property
    def num_partitions(self) -> int:
        return len(self.partitions)

    @property
    def partition_counts(self) -> np.ndarray:
        return np.diff(self._starts)

    @property
    def partition_starts(self) -> np.ndarray:
        """Global index of each partition's first record."""
        return self._starts[:-1]

    def record(self, index: int) -> RawRecord:
        pid = int(np.searchsorted(self._starts, index, side="right")) - 1
        return self.partitions[pid].records[index - self._starts[pid]]

    def record_text(self, index: int) -> bytes:
        return self.record(index).text

    def iter_records(self) -> Iterator[RawRecord]:
        for part in self.partitions:
            yield from part.records


@dataclass
class SynthesizedData:
    """A synthetic dataset plus the ground truth used to generate it."""

    dataset: Dataset
    true_weights: np.ndarray
    clean_labels: np.ndarray
    task: str


def _build_partitions(lines, partition_bytes):
    """Greedily pack whole records into partitions of at most partition_bytes.

    A record never splits across partitions, so a partition holds at least one
    record even when a single record exceeds the byte budget.
    """
    partitions = []
    records, size = [], 0
    for line in lines:
        if records and size + len(line) > partition_bytes:
            partitions.append(Partition(records, size))
            records, size = [], 0
        records.append(RawRecord(line, len(partitions), len(records)))
        size += len(line)
    if records:
        partitions.append(Partition(records, size))
    return partitions


def _scan_dense_slow(lines, expected_cols=None):
    """Per-line validation pass; only runs to pin down the failing line."""
    ncols = expected_cols
    for lineno, line in enumerate(lines, start=1):
        fields = line.split(b",")
        if ncols is None:
            ncols = len(fields)
        elif len(fields) != ncols:
            raise IngestError(
                f"line {lineno}: expected {ncols} columns, found {len(fields)}",
                line_number=lineno,
            )
        for f in fields:
            try:
                float(f)
            except ValueError:
                raise IngestError(
                    f"line {lineno}: malformed number {f.decode(errors='replace')!r}",
                    line_number=lineno,
                ) from None
    raise IngestError("dense scan failed for an unknown reason")


def _scan_dense(lines, columns):
    ncols = lines[0].count(b",") + 1
    if ncols < 2:
        raise IngestError(f"line 1: need at least 2 columns, found {ncols}")
    try:
        arr = np.loadtxt(io.BytesIO(b"\n".join(lines)), delimiter=",",
                         ndmin=2, dtype=float)
        if arr.shape[1] != ncols:
            raise ValueError("ragged rows")
    except ValueError:
        _scan_dense_slow(lines, expected_cols=None)
        raise IngestError("dense scan failed for an unknown reason")
    if columns is not None:
        if columns.feature_end > ncols or columns.label_column > ncols:
            raise IngestError(
                f"column spec references column "
                f"{max(columns.feature_end, columns.label_column)} "
                f"but file has {ncols} columns"
            )
        feats = arr[:, columns.feature_start - 1:columns.feature_end]
        d = columns.num_features
    else:
        feats = arr[:, 1:]
        d = ncols - 1
    density = np.count_nonzero(feats) / (len(lines) * d)
    return d, min(1.0, float(density))


def _scan_libsvm(lines):
    max_index = 0
    nonzeros = 0
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            raise IngestError(f"line {lineno}: empty record", line_number=lineno)
        try:
            float(parts[0])
        except ValueError:
            raise IngestError(
                f"line {lineno}: malformed label {parts[0].decode(errors='replace')!r}",
                line_number=lineno,
            ) from None
        prev = 0
        for item in parts[1:]:
            try:
                idx_s, val_s = item.split(b":", 1)
                idx = int(idx_s)
                float(val_s)
            except ValueError:
                raise IngestError(
                    f"line {lineno}: malformed feature {item.decode(errors='replace')!r}",
                    line_number=lineno,
                ) from None
            if idx <= prev:
                raise IngestError(
                    f"line {lineno}: feature indices must be strictly increasing",
                    line_number=lineno,
                )
            prev = idx
            nonzeros += 1
        max_index = max(max_index, prev)
    if max_index == 0:
        raise IngestError("no feature indices found in libsvm file")
    density = nonzeros / (len(lines) * max_index)
    return max_index, density


def build_dataset(lines, fmt, partition_bytes, columns=None, num_features=None):
    """Assemble a Dataset from raw record lines, computing stats in one scan.

    ``num_features`` overrides the inferred feature count (used when a test
    file must align with a trained model's dimensionality).
    """
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise IngestError("zero records")
    if fmt == DENSE_CSV:
        d, density = _scan_dense(lines, columns)
    elif fmt == LIBSVM_SPARSE:
        if columns is not None:
            raise IngestError("column specs apply to dense files only")
        d, density = _scan_libsvm(lines)
    else:
        raise IngestError(f"unknown dataset format {fmt!r}")
    if num_features is not None:
        if fmt == LIBSVM_SPARSE and d > num_features:
            raise IngestError(
                f"file has feature index {d} beyond requested dimension {num_features}"
            )
        d = num_features
    partitions = _build_partitions(lines, partition_bytes)
    size_bytes = sum(p.size_bytes for p in partitions)
    k = math.ceil(len(lines) * partition_bytes / size_bytes)
    stats = DatasetStats(
        num_units=len(lines),
        num_features=d,
        size_bytes=size_bytes,
        density=density,
        units_per_partition=k,
    )
    return Dataset(partitions, fmt, stats, partition_bytes, columns=columns)


def sniff_format(first_line: bytes) -> str:
    body = first_line.split(None, 1)
    if len(body) == 2 and b":" in body[1]:
        return LIBSVM_SPARSE
    return DENSE_CSV


def ingest(path, fmt="auto", partition_bytes=DEFAULT_PARTITION_BYTES,
           columns=None, num_features=None) -> Dataset:
    """Read a dataset file, split it into partitions, and compute its stats."""
    if partition_bytes <= 0:
        raise ValueError("partition_bytes must be positive")
    if not os.path.exists(path):
        raise IngestError(f"cannot read {path}: no such file")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    lines = [ln.rstrip(b"\r") for ln in raw.split(b"\n") if ln.strip()]
    if not lines:
        raise IngestError("zero records")
    if fmt == "auto":
        fmt = sniff_format(lines[0])
    return build_dataset(lines, fmt, partition_bytes, columns=columns,
                         num_features=num_features)


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        for rec in dataset.iter_records():
            fh.write(rec.text)
            fh.write(b"\n")


def _format_value(v: float) -> str:
    return format(float(v), ".17g")


def render_lines(X, y, fmt):
    """Serialize numeric rows to record lines in the requested format."""
    lines = []
    if fmt == DENSE_CSV:
        for label, row in zip(y, X):
            fields = [_format_value(label)] + [_format_value(v) for v in row]
            lines.append(",".join(fields).encode())
    elif fmt == LIBSVM_SPARSE:
        for label, row in zip(y, X):
            if label == int(label):
                head = str(int(label))
            else:
                head = _format_value(label)
            feats = [
                f"{j + 1}:{_format_value(v)}"
                for j, v in enumerate(row)
                if v != 0.0
            ]
            lines.append(" ".join([head] + feats).encode())
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return lines


# Margin between the two class clouds along the separating direction. Chosen
# so hinge-loss batch descent reaches 100% training accuracy well before the
# default iteration cap on noise-free data.
_CLASS_MARGIN = 1.0


def synthesize(task, n, d, noise, seed, fmt=None, density=1.0,
               partition_bytes=DEFAULT_PARTITION_BYTES,
               margin=_CLASS_MARGIN) -> SynthesizedData:
    """Generate a labeled dataset with known ground truth.

    Classification tasks draw two Gaussian clouds on opposite sides of a
    hyperplane through the origin; ``noise`` is the fraction of labels flipped
    afterwards. Regression draws ``y = w_true . x + noise * N(0,1)``.
    Deterministic in ``seed``: the same arguments always produce byte-identical
    records.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    classification = task in ("svm", "classification", "logistic")
    if not classification and task not in ("linreg", "regression"):
        raise ValueError(f"unknown task {task!r}")

    w_true = rng.standard_normal(d)
    if density < 1.0:
        support = rng.choice(d, size=max(1, int(round(d * 0.2))), replace=False)
        mask = np.zeros(d, dtype=bool)
        mask[support] = True
        w_true = np.where(mask, w_true, 0.0)
    direction = w_true / np.linalg.norm(w_true)

    X = rng.standard_normal((n, d))
    if density < 1.0:
        X *= rng.random((n, d)) < density

    if classification:
        side = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        along = X @ direction
        # Re-seat each point so its signed distance to the hyperplane is at
        # least the margin; guarantees separability at noise=0.
        target = side * (margin + np.abs(along))
        X = X + (target - along)[:, None] * direction
        clean = side
        flip = rng.random(n) < noise
        labels = np.where(flip, -clean, clean)
    else:
        clean = X @ w_true
        labels = clean + noise * rng.standard_normal(n)

    if fmt is None:
        fmt = LIBSVM_SPARSE if density < 1.0 else DENSE_CSV
    lines = render_lines(X, labels, fmt)
    ds = build_dataset(lines, fmt, partition_bytes, num_features=d)
    return SynthesizedData(ds, w_true, clean, task)
