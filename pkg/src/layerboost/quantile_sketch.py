"""Weighted, mergeable epsilon-approximate quantile summaries.

An entry for value ``v`` carries its tracked weight ``w`` and bounds on rank:
``min_rank`` is a lower bound on the weight of items strictly below ``v`` and
``max_rank`` an upper bound on the weight of items at or below ``v``.  Two
derived quantities drive everything else::

    prev_max = max_rank - weight   # upper bound on weight strictly below v
    next_min = min_rank + weight   # lower bound on weight at or below v

A query for target rank ``r`` answered with entry ``e`` is off by at most
``max(prev_max_e - r, r - next_min_e, 0)``.  Keeping consecutive entries with
``prev_max[j] - next_min[i] <= 2 * eps * W`` bounds every query by ``eps * W``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPSILON = 0.01
DEFAULT_NUM_BUCKETS = 100
STREAM_LEVELS = 16


class QuantileError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryEntry:
    value: float
    weight: float
    min_rank: float
    max_rank: float


@dataclass
class QuantileSummary:
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    min_rank: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_rank: np.ndarray = field(default_factory=lambda: np.zeros(0))
    total_weight: float = 0.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise QuantileError("epsilon must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def entries(self) -> list:
        return [SummaryEntry(*t) for t in zip(self.values.tolist(), self.weights.tolist(),
                                              self.min_rank.tolist(), self.max_rank.tolist())]

    @property
    def prev_max(self) -> np.ndarray:
        return self.max_rank - self.weights

    @property
    def next_min(self) -> np.ndarray:
        return self.min_rank + self.weights

    def same_as(self, other: "QuantileSummary") -> bool:
        return (self.total_weight == other.total_weight and self.epsilon == other.epsilon
                and all(np.array_equal(a, b) for a, b in (
                    (self.values, other.values), (self.weights, other.weights),
                    (self.min_rank, other.min_rank), (self.max_rank, other.max_rank))))


def from_batch(values, weights=None, epsilon: float = DEFAULT_EPSILON) -> QuantileSummary:
    """Exact summary of one batch (zero rank uncertainty)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    weights = (np.ones_like(values) if weights is None
               else np.asarray(weights, dtype=np.float64).reshape(-1))
    if weights.shape != values.shape:
        raise QuantileError("values and weights differ in length")
    if not np.all(np.isfinite(values)):
        raise QuantileError("non-finite value in batch")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise QuantileError("weights must be finite and non-negative")
    keep = weights > 0
    values, weights = values[keep], weights[keep]
    if not len(values):
        return QuantileSummary(epsilon=epsilon)
    uniq, inverse = np.unique(values, return_inverse=True)
    w = np.bincount(inverse, weights=weights, minlength=len(uniq))
    cum = np.cumsum(w)
    return QuantileSummary(uniq, w, cum - w, cum, float(weights.sum()), epsilon)


def _project(s: QuantileSummary, union: np.ndarray):
    """Weight and rank bounds ``s`` implies for each value of ``union``."""
    n = len(s.values)
    if n == 0:
        z = np.zeros(len(union))
        return z, z, z
    idx = np.searchsorted(s.values, union, side="left")
    inside = idx < n
    clipped = np.minimum(idx, n - 1)
    present = inside & (s.values[clipped] == union)
    prev = np.maximum(idx - 1, 0)
    below_next_min = np.where(idx > 0, s.min_rank[prev] + s.weights[prev], 0.0)
    above_prev_max = np.where(inside, s.max_rank[clipped] - s.weights[clipped], s.total_weight)
    w = np.where(present, s.weights[clipped], 0.0)
    rmin = np.where(present, s.min_rank[clipped], below_next_min)
    rmax = np.where(present, s.max_rank[clipped], above_prev_max)
    return w, rmin, rmax


def merge(a: QuantileSummary, b: QuantileSummary) -> QuantileSummary:
    """Combine two summaries; equal values collapse into one entry.

    The result keeps the larger relative error of its inputs and is not
    compressed.
    """
    if a.epsilon != b.epsilon:
        raise QuantileError(f"epsilon mismatch: {a.epsilon} vs {b.epsilon}")
    union = np.union1d(a.values, b.values)
    wa, ra, Ra = _project(a, union)
    wb, rb, Rb = _project(b, union)
    return QuantileSummary(union, wa + wb, ra + rb, Ra + Rb,
                           a.total_weight + b.total_weight, a.epsilon)


def compress(s: QuantileSummary, epsilon: float | None = None) -> QuantileSummary:
    """Drop entries while every query stays within ``epsilon * total_weight``.

    The first and last entries (stream min and max) are always kept.
    """
    eps = s.epsilon if epsilon is None else epsilon
    n = len(s)
    if n <= 2:
        return s
    budget = 2.0 * eps * s.total_weight
    prev_max = np.maximum.accumulate(s.prev_max)
    next_min = s.next_min
    keep = [0]
    cur = 0
    while cur < n - 1:
        j = int(np.searchsorted(prev_max, next_min[cur] + budget, side="right")) - 1
        j = min(max(j, cur + 1), n - 1)
        keep.append(j)
        cur = j
    if len(keep) == n:
        return s
    keep = np.asarray(keep)
    return QuantileSummary(s.values[keep], s.weights[keep], s.min_rank[keep],
                           s.max_rank[keep], s.total_weight, s.epsilon)


def insert_batch(s: QuantileSummary, values, weights=None) -> QuantileSummary:
    """Fold a batch into ``s`` and recompress at ``s.epsilon``."""
    return compress(merge(s, from_batch(values, weights, s.epsilon)))


def error_bound(s: QuantileSummary) -> float:
    """Worst absolute rank error of any query answered from ``s``."""
    if not len(s):
        return 0.0
    p, n = s.prev_max, s.next_min
    terms = [p[0], s.total_weight - n[-1], np.max(p - n) / 2.0]
    if len(s) > 1:
        terms.append(np.max(p[1:] - n[:-1]) / 2.0)
    return float(max(0.0, *terms))


def _best_entries(s: QuantileSummary, ranks: np.ndarray) -> np.ndarray:
    # err(i) is the max of a term rising in i and one falling in i, so the
    # optimum sits where prev_max + next_min crosses 2 * rank
    n = len(s)
    key = np.maximum.accumulate(s.prev_max + s.next_min)
    hi = np.minimum(np.searchsorted(key, 2.0 * ranks, side="left"), n - 1)
    lo = np.maximum(hi - 1, 0)

    def err(i):
        return np.maximum(s.prev_max[i] - ranks, ranks - s.next_min[i])

    return np.where(err(lo) <= err(hi), lo, hi)


def quantiles(s: QuantileSummary, qs) -> np.ndarray:
    if not len(s):
        raise QuantileError("empty summary")
    qs = np.asarray(qs, dtype=np.float64)
    return s.values[_best_entries(s, qs * s.total_weight)]


def boundaries(s: QuantileSummary, num_buckets: int = DEFAULT_NUM_BUCKETS) -> np.ndarray:
    """Approximate ``k / num_buckets`` quantiles, min and max included, deduplicated."""
    if num_buckets < 1:
        raise QuantileError("num_buckets must be positive")
    if not len(s) or s.total_weight <= 0:
        raise QuantileError("no boundaries for an empty summary")
    qs = quantiles(s, np.arange(num_buckets + 1) / num_buckets)
    qs[0], qs[-1] = s.values[0], s.values[-1]
    return np.unique(qs)


class QuantileStream:
    """Online summary with bounded memory.

    Incoming summaries land on level 0 and carry upward like a binary
    counter.  A level-``l`` summary is compressed to relative error
    ``eps * (l + 1) / STREAM_LEVELS``, so each carry adds a fixed slice of
    the error budget and level sizes stay near ``STREAM_LEVELS / (2 * eps)``.
    Past ``STREAM_LEVELS`` levels the error is held at ``eps`` and sizes are
    no longer bounded.
    """

    def __init__(self, epsilon: float = DEFAULT_EPSILON):
        if not 0 < epsilon < 1:
            raise QuantileError("epsilon must lie in (0, 1)")
        self.epsilon = epsilon
        self.levels: list = []

    def level_epsilon(self, level: int) -> float:
        return self.epsilon * min(level + 1, STREAM_LEVELS) / STREAM_LEVELS

    def local_summary(self, values, weights=None) -> QuantileSummary:
        """What a worker builds for one batch before pushing it."""
        return compress(from_batch(values, weights, self.epsilon), self.level_epsilon(0))

    def insert_batch(self, values, weights=None) -> None:
        self.push_summary(self.local_summary(values, weights))

    def push_summary(self, summary: QuantileSummary) -> None:
        if summary.epsilon != self.epsilon:
            raise QuantileError("epsilon mismatch")
        if not len(summary):
            return
        carry = summary
        level = 0
        while level < len(self.levels) and self.levels[level] is not None:
            carry = compress(merge(self.levels[level], carry), self.level_epsilon(level + 1))
            self.levels[level] = None
            level += 1
        if level == len(self.levels):
            self.levels.append(None)
        self.levels[level] = carry

    @property
    def total_weight(self) -> float:
        return sum(s.total_weight for s in self.levels if s is not None)

    @property
    def num_entries(self) -> int:
        return sum(len(s) for s in self.levels if s is not None)

    def summary(self) -> QuantileSummary:
        out = QuantileSummary(epsilon=self.epsilon)
        for s in self.levels:
            if s is not None:
                out = merge(out, s)
        return compress(out)

    def copy(self) -> "QuantileStream":
        other = QuantileStream(self.epsilon)
        other.levels = list(self.levels)
        return other
