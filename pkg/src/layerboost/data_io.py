"""Dense CSV and sparse libsvm ingestion, streamed as mini-batches."""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Example:
    features: dict
    label: float
    weight: float = 1.0


@dataclass
class Batch:
    """Dense mini-batch: ``X`` is ``(n, num_features)`` with NaN for missing."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    batch_id: int = 0

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask: np.ndarray) -> "Batch":
        return Batch(self.X[mask], self.y[mask], self.w[mask], self.batch_id)

    def same_as(self, other: "Batch") -> bool:
        return (self.batch_id == other.batch_id and np.array_equal(self.y, other.y)
                and np.array_equal(self.w, other.w)
                and np.array_equal(self.X, other.X, equal_nan=True))


def examples_to_batch(examples, num_features: int, batch_id: int = 0) -> Batch:
    examples = list(examples)
    return fill_batch(iter(examples), len(examples), num_features, batch_id)


def fill_batch(examples: Iterator[Example], size: int, num_features: int,
               batch_id: int = 0) -> Optional[Batch]:
    """Up to ``size`` examples written straight into dense arrays; ``None`` when exhausted."""
    X = np.full((size, num_features), np.nan)
    y = np.empty(size)
    w = np.empty(size)
    k = 0
    for ex in itertools.islice(examples, size):
        for fid, v in ex.features.items():
            if fid >= num_features:
                raise DataError(f"feature id {fid} outside feature space of {num_features}")
            X[k, fid] = v
        y[k] = ex.label
        w[k] = ex.weight
        k += 1
    if k == 0 and size:
        return None
    if k < size:
        X, y, w = X[:k].copy(), y[:k].copy(), w[:k].copy()
    return Batch(X, y, w, batch_id)


def _number(cell: str, lineno: int, what: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric {what} {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"line {lineno}: non-finite {what} {cell!r}")
    return v


class CsvSchema:
    """Header-driven columns; every column other than label/weight is a feature."""

    def __init__(self, header, label: str = "label", weight: Optional[str] = None,
                 require_label: bool = True):
        header = [h.strip() for h in header]
        if label not in header and require_label:
            raise DataError(f"line 1: no {label!r} column in header")
        if weight is not None and weight not in header:
            raise DataError(f"line 1: no {weight!r} column in header")
        self.header = header
        self.label_col = header.index(label) if label in header else None
        self.weight_col = header.index(weight) if weight is not None else None
        self.feature_cols = [i for i in range(len(header))
                             if i not in (self.label_col, self.weight_col)]

    @property
    def num_features(self) -> int:
        return len(self.feature_cols)

    @property
    def feature_names(self) -> list:
        return [self.header[i] for i in self.feature_cols]


def _note_skip(stats: dict, lineno: int) -> None:
    # re-reading a file for another epoch must not recount the same line
    lines = stats.setdefault("skipped_lines", set())
    lines.add(lineno)
    stats["skipped"] = len(lines)


def parse_csv(path, label: str = "label", weight: Optional[str] = None,
              skip_bad_rows: bool = False, stats: Optional[dict] = None,
              require_label: bool = True) -> Iterator[Example]:
    """Yield one :class:`Example` per data row; empty cells are missing features."""
    stats = stats if stats is not None else {}
    stats.setdefault("skipped", 0)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("line 1: missing header row") from None
        schema = CsvSchema(header, label, weight, require_label)
        stats["schema"] = schema
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            try:
                yield _csv_example(row, schema, lineno)
            except DataError:
                if not skip_bad_rows:
                    raise
                _note_skip(stats, lineno)


def _csv_example(row, schema: CsvSchema, lineno: int) -> Example:
    if len(row) != len(schema.header):
        raise DataError(f"line {lineno}: expected {len(schema.header)} cells, got {len(row)}")
    if schema.label_col is None:
        label = math.nan
    else:
        label_cell = row[schema.label_col].strip()
        if not label_cell:
            raise DataError(f"line {lineno}: missing label")
        label = _number(label_cell, lineno, "label")
    weight = 1.0
    if schema.weight_col is not None:
        weight = _number(row[schema.weight_col].strip(), lineno, "weight")
        if weight <= 0:
            raise DataError(f"line {lineno}: weight must be positive")
    feats = {}
    for fid, col in enumerate(schema.feature_cols):
        cell = row[col].strip()
        if cell:
            feats[fid] = _number(cell, lineno, "cell")
    return Example(feats, label, weight)


def csv_schema(path, label: str = "label", weight: Optional[str] = None,
               require_label: bool = True) -> CsvSchema:
    with open(path, newline="") as fh:
        try:
            header = next(csv.reader(fh))
        except StopIteration:
            raise DataError("line 1: missing header row") from None
    return CsvSchema(header, label, weight, require_label)


def write_csv(path, examples, num_features: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(num_features)] + ["label"])
        for ex in examples:
            writer.writerow([repr(float(ex.features[j])) if j in ex.features else ""
                             for j in range(num_features)] + [repr(float(ex.label))])


def parse_libsvm(path, skip_bad_rows: bool = False,
                 stats: Optional[dict] = None) -> Iterator[Example]:
    """``label idx:val ...`` lines with strictly increasing 1-based indices."""
    stats = stats if stats is not None else {}
    stats.setdefault("skipped", 0)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                yield _libsvm_example(line, lineno)
            except DataError:
                if not skip_bad_rows:
                    raise
                _note_skip(stats, lineno)


def _libsvm_example(line: str, lineno: int) -> Example:
    tokens = line.split()
    label = _number(tokens[0], lineno, "label")
    feats = {}
    last = 0
    for tok in tokens[1:]:
        idx, sep, val = tok.partition(":")
        if not sep or not idx.isdigit():
            raise DataError(f"line {lineno}: malformed token {tok!r}")
        idx = int(idx)
        if idx <= last:
            raise DataError(f"line {lineno}: indices must be strictly increasing ({idx} after {last})")
        last = idx
        feats[idx - 1] = _number(val, lineno, "value")
    return Example(feats, label)


def libsvm_num_features(path) -> int:
    """Feature count from a first scan (max index seen)."""
    top = 0
    with open(path) as fh:
        for line in fh:
            for tok in line.split("#", 1)[0].split()[1:]:
                idx = tok.partition(":")[0]
                if idx.isdigit():
                    top = max(top, int(idx))
    return top


def detect_format(path) -> str:
    return "csv" if Path(path).suffix.lower() == ".csv" else "libsvm"


@dataclass
class MiniBatchStream:
    """Re-readable source of :class:`Batch` objects over one data file.

    Examples are read lazily; with ``shuffle_seed`` set they pass through a
    bounded shuffle buffer of ``shuffle_buffer`` batches.
    """

    path: str
    batch_size: int = 256
    epochs: int = 1
    shuffle_seed: Optional[int] = None
    shuffle_buffer: int = 8
    num_features: Optional[int] = None
    label: str = "label"
    weight: Optional[str] = None
    skip_bad_rows: bool = False
    require_label: bool = True
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise DataError("batch_size and epochs must be positive")
        self.format = detect_format(self.path)
        if self.num_features is None:
            if self.format == "csv":
                self.num_features = csv_schema(self.path, self.label, self.weight,
                                               self.require_label).num_features
            else:
                self.num_features = libsvm_num_features(self.path)

    def examples(self) -> Iterator[Example]:
        if self.format == "csv":
            return parse_csv(self.path, self.label, self.weight, self.skip_bad_rows, self.stats,
                             self.require_label)
        return parse_libsvm(self.path, self.skip_bad_rows, self.stats)

    def _epoch_examples(self, epoch: int) -> Iterator[Example]:
        it = self.examples()
        if self.shuffle_seed is None:
            yield from it
            return
        rng = np.random.default_rng([self.shuffle_seed, epoch])
        size = self.batch_size * self.shuffle_buffer
        while True:
            chunk = list(itertools.islice(it, size))
            if not chunk:
                return
            for i in rng.permutation(len(chunk)):
                yield chunk[i]

    def __iter__(self) -> Iterator[Batch]:
        batch_id = 0
        for epoch in range(self.epochs):
            it = self._epoch_examples(epoch)
            while True:
                batch = fill_batch(it, self.batch_size, self.num_features, batch_id)
                if batch is None:
                    break
                yield batch
                batch_id += 1


def batches_from_arrays(X, y, w=None, batch_size: int = 256, epochs: int = 1,
                        start_id: int = 0) -> list:
    """Slice in-memory arrays into numbered batches (tests, benchmarks)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones(len(y)) if w is None else np.asarray(w, dtype=np.float64)
    out = []
    bid = start_id
    for _ in range(epochs):
        for i in range(0, len(y), batch_size):
            out.append(Batch(X[i:i + batch_size], y[i:i + batch_size], w[i:i + batch_size], bid))
            bid += 1
    return out


def read_all(path, num_features: Optional[int] = None, **kw) -> Batch:
    """Whole file as one batch (prediction and evaluation paths)."""
    stream = MiniBatchStream(str(path), batch_size=4096, num_features=num_features, **kw)
    batches = list(stream)
    if not batches:
        return Batch(np.zeros((0, stream.num_features)), np.zeros(0), np.zeros(0))
    return Batch(np.concatenate([b.X for b in batches]), np.concatenate([b.y for b in batches]),
                 np.concatenate([b.w for b in batches]))
