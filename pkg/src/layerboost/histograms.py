"""Gradient/Hessian histograms and regularized split search."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .losses import HESSIAN_FLOOR
from .tree_model import DecisionTree, TreeNode

MISSING = -1
# gains this close (relative to max(1, |gain|)) count as ties, so summation
# order cannot override the lowest-feature / lowest-threshold rule
GAIN_TIE_TOL = 1e-9


@dataclass(frozen=True)
class RegParams:
    l1: float = 0.0
    l2: float = 0.0
    tree_complexity: float = 0.0
    min_node_weight: float = 0.0

    def __post_init__(self):
        for name in ("l1", "l2", "tree_complexity", "min_node_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class GradStats:
    g: np.ndarray
    h: np.ndarray
    weight: float = 0.0
    count: int = 0

    @classmethod
    def zeros(cls, width: int) -> "GradStats":
        return cls(np.zeros(width), np.zeros(width))

    def __add__(self, other: "GradStats") -> "GradStats":
        return GradStats(self.g + other.g, self.h + other.h, self.weight + other.weight,
                         self.count + other.count)


@dataclass
class SplitCandidate:
    feature_id: int
    threshold: float
    default_left: bool
    gain: float
    left_value: np.ndarray
    right_value: np.ndarray
    bucket: int = 0
    left_stats: Optional[GradStats] = None
    right_stats: Optional[GradStats] = None

    @property
    def default_direction(self) -> str:
        return "left" if self.default_left else "right"


def leaf_value(stats: GradStats, reg: RegParams) -> np.ndarray:
    g, h = np.asarray(stats.g, dtype=np.float64), np.asarray(stats.h, dtype=np.float64)
    return _leaf_value(g, h, reg)


def _leaf_value(g, h, reg):
    shrunk = np.sign(g) * np.maximum(np.abs(g) - reg.l1, 0.0)
    return -shrunk / (np.maximum(h, HESSIAN_FLOOR) + reg.l2)


def _score(g, h, reg):
    # objective at the optimal leaf, summed over the trailing class axis
    w = _leaf_value(g, h, reg)
    hh = np.maximum(h, HESSIAN_FLOOR) + reg.l2
    return np.sum(g * w + 0.5 * hh * w * w + reg.l1 * np.abs(w), axis=-1)


def node_score(stats: GradStats, reg: RegParams) -> float:
    return float(_score(np.asarray(stats.g, dtype=np.float64),
                        np.asarray(stats.h, dtype=np.float64), reg))


# ---------------------------------------------------------------------------
# bucketing


def num_buckets(bounds: np.ndarray) -> int:
    # [b0, b1), ..., [b_{n-2}, b_{n-1}), plus [b_{n-1}, inf) so the maximum can be split off
    return max(len(bounds), 1)


def bucketize(value, boundaries) -> int:
    """Left-inclusive bucket index; values below the first boundary land in bucket 0.

    The last boundary opens its own bucket, so a feature seen with two
    distinct values still has a split point.  ``MISSING`` for NaN/None.
    """
    bounds = np.asarray(boundaries, dtype=np.float64)
    if not len(bounds):
        raise ValueError("empty boundaries")
    if value is None or np.isnan(value):
        return MISSING
    idx = int(np.searchsorted(bounds, value, side="right")) - 1
    return min(max(idx, 0), num_buckets(bounds) - 1)


def bucketize_matrix(X: np.ndarray, boundaries: Sequence[np.ndarray]) -> np.ndarray:
    """Bucket every column; columns without boundaries are all ``MISSING``."""
    out = np.full(X.shape, MISSING, dtype=np.int64)
    for j, bounds in enumerate(boundaries):
        if not len(bounds):
            continue
        col = X[:, j]
        idx = np.searchsorted(bounds, col, side="right") - 1
        idx = np.clip(idx, 0, num_buckets(bounds) - 1)
        out[:, j] = np.where(np.isnan(col), MISSING, idx)
    return out


# ---------------------------------------------------------------------------
# histograms


class NodeHistogram:
    """Statistics of one tree node over a block of features."""

    def __init__(self, num_features: int, max_buckets: int, width: int):
        F, B, C = num_features, max_buckets, width
        self.G = np.zeros((F, B, C))
        self.H = np.zeros((F, B, C))
        self.W = np.zeros((F, B))
        self.N = np.zeros((F, B), dtype=np.int64)
        self.Gm = np.zeros((F, C))
        self.Hm = np.zeros((F, C))
        self.Wm = np.zeros(F)
        self.Nm = np.zeros(F, dtype=np.int64)
        self.total = GradStats.zeros(C)

    def feature_stats(self, j: int, nb: int):
        return (self.G[j, :nb], self.H[j, :nb], self.W[j, :nb], self.N[j, :nb],
                GradStats(self.Gm[j], self.Hm[j], float(self.Wm[j]), int(self.Nm[j])))

    def arrays(self) -> dict:
        return {"G": self.G, "H": self.H, "W": self.W, "N": self.N, "Gm": self.Gm,
                "Hm": self.Hm, "Wm": self.Wm, "Nm": self.Nm, "tg": self.total.g,
                "th": self.total.h,
                "tw": np.array([self.total.weight]), "tn": np.array([self.total.count])}

    @classmethod
    def from_arrays(cls, a: Mapping) -> "NodeHistogram":
        F, B, C = a["G"].shape
        nh = cls(F, B, C)
        for k in ("G", "H", "W", "N", "Gm", "Hm", "Wm", "Nm"):
            setattr(nh, k, np.array(a[k]))
        nh.total = GradStats(np.array(a["tg"]), np.array(a["th"]), float(a["tw"][0]),
                             int(a["tn"][0]))
        return nh


class GradHessHistogram:
    """``node_key -> NodeHistogram`` over an owned block of features.

    ``features`` holds global feature ids; column ``j`` of bucket matrices
    corresponds to ``features[j]``.
    """

    def __init__(self, features: Sequence[int], boundaries: Sequence[np.ndarray], width: int):
        self.features = np.asarray(features, dtype=np.int64)
        self.boundaries = [np.asarray(b, dtype=np.float64) for b in boundaries]
        if len(self.boundaries) != len(self.features):
            raise ValueError("one boundary array per feature required")
        self.nbuckets = [num_buckets(b) for b in self.boundaries]
        self.max_buckets = max(self.nbuckets, default=1)
        self.width = width
        self.nodes: dict = {}
        self.contributors: list = []

    def empty_like(self) -> "GradHessHistogram":
        return GradHessHistogram(self.features, self.boundaries, self.width)

    def node(self, key) -> NodeHistogram:
        nh = self.nodes.get(key)
        if nh is None:
            nh = self.nodes[key] = NodeHistogram(len(self.features), self.max_buckets, self.width)
        return nh

    def accumulate(self, node_keys: Sequence, buckets: np.ndarray, g: np.ndarray,
                   h: np.ndarray, weights: np.ndarray) -> "GradHessHistogram":
        """Add weighted per-example statistics; ``node_keys[i]`` of ``None`` skips row ``i``."""
        n = len(node_keys)
        if not (buckets.shape == (n, len(self.features)) and g.shape == h.shape == (n, self.width)
                and weights.shape == (n,)):
            raise ValueError("accumulate: dimension mismatch")
        gw = g * weights[:, None]
        hw = h * weights[:, None]
        order = {}
        for i, key in enumerate(node_keys):
            if key is not None:
                order.setdefault(key, []).append(i)
        B = self.max_buckets
        for key, rows in order.items():
            rows = np.asarray(rows)
            nh = self.node(key)
            nh.total = nh.total + GradStats(gw[rows].sum(axis=0), hw[rows].sum(axis=0),
                                            float(weights[rows].sum()), len(rows))
            b = buckets[rows]
            r, j = np.nonzero(b >= 0)
            flat = j * B + b[r, j]
            src = rows[r]
            np.add.at(nh.G.reshape(-1, self.width), flat, gw[src])
            np.add.at(nh.H.reshape(-1, self.width), flat, hw[src])
            np.add.at(nh.W.reshape(-1), flat, weights[src])
            np.add.at(nh.N.reshape(-1), flat, 1)
            r, j = np.nonzero(b < 0)
            src = rows[r]
            np.add.at(nh.Gm, j, gw[src])
            np.add.at(nh.Hm, j, hw[src])
            np.add.at(nh.Wm, j, weights[src])
            np.add.at(nh.Nm, j, 1)
        return self

    def conservation_error(self) -> float:
        """Largest gap between bucket+missing sums and node totals."""
        worst = 0.0
        for nh in self.nodes.values():
            for j, nb in enumerate(self.nbuckets):
                g = nh.G[j, :nb].sum(axis=0) + nh.Gm[j]
                h = nh.H[j, :nb].sum(axis=0) + nh.Hm[j]
                worst = max(worst, np.max(np.abs(g - nh.total.g)),
                            np.max(np.abs(h - nh.total.h)))
        return float(worst)

    def feature_candidates(self, node_keys: Iterable, reg: RegParams,
                           allowed: Optional[set] = None, post_pruning: bool = False) -> dict:
        """Per node, the best candidate of every feature here (``None`` entries dropped)."""
        out = {}
        for key in node_keys:
            nh = self.nodes.get(key)
            cands = []
            if nh is not None:
                for j, fid in enumerate(self.features.tolist()):
                    if allowed is not None and fid not in allowed:
                        continue
                    c = best_split_for_feature(nh.feature_stats(j, self.nbuckets[j]),
                                               self.boundaries[j], fid, reg, post_pruning)
                    if c is not None:
                        cands.append(c)
            out[key] = cands
        return out

    def best_splits(self, node_keys: Iterable, reg: RegParams, allowed: Optional[set] = None,
                    post_pruning: bool = False) -> dict:
        """Best candidate per node over this histogram's features (``None`` when none)."""
        return {key: best_split_across_features(cands) for key, cands in
                self.feature_candidates(node_keys, reg, allowed, post_pruning).items()}


def accumulate(hist: GradHessHistogram, assignments, features, gh, weights) -> GradHessHistogram:
    g, h = gh
    return hist.accumulate(assignments, features, np.asarray(g, dtype=np.float64),
                           np.asarray(h, dtype=np.float64), np.asarray(weights, dtype=np.float64))


# ---------------------------------------------------------------------------
# split search


def best_split_for_feature(node_hist, boundaries, feature_id: int, reg: RegParams,
                           post_pruning: bool = False) -> Optional[SplitCandidate]:
    """Scan split points between consecutive buckets with missing sent either way.

    ``node_hist`` is ``(G, H, W, N, missing)``: per-bucket gradient and Hessian
    sums ``(B, C)``, weights and counts ``(B,)``, and missing-value GradStats.
    """
    G, H, W, N, miss = node_hist
    G, H = np.asarray(G, dtype=np.float64), np.asarray(H, dtype=np.float64)
    nb = G.shape[0]
    if nb < 2:
        return None
    W, N = np.asarray(W, dtype=np.float64), np.asarray(N)
    total_g = G.sum(axis=0) + miss.g
    total_h = H.sum(axis=0) + miss.h
    parent = _score(total_g, total_h, reg)

    # split i sends buckets [0, i) left; missing goes left (d=0) or right (d=1)
    cg, ch = np.cumsum(G, axis=0)[:-1], np.cumsum(H, axis=0)[:-1]
    cw, cn = np.cumsum(W)[:-1], np.cumsum(N)[:-1]
    lg = np.stack([cg + miss.g, cg], axis=1)
    lh = np.stack([ch + miss.h, ch], axis=1)
    lw = np.stack([cw + miss.weight, cw], axis=1)
    ln = np.stack([cn + miss.count, cn], axis=1)
    rg, rh = total_g - lg, total_h - lh
    rw, rn = (W.sum() + miss.weight) - lw, (N.sum() + miss.count) - ln
    gain = parent - _score(lg, lh, reg) - _score(rg, rh, reg) - reg.tree_complexity

    # min node weight is judged on Hessian mass
    valid = ((lh.sum(axis=-1) >= reg.min_node_weight) & (rh.sum(axis=-1) >= reg.min_node_weight)
             & (ln > 0) & (rn > 0) & np.isfinite(gain))
    if not post_pruning:
        valid &= gain > 0
    if not valid.any():
        return None
    masked = np.where(valid, gain, -np.inf)
    top = masked.max()
    # first within tolerance of the best: lowest bucket, then missing-left
    flat = int(np.argmax(masked >= top - GAIN_TIE_TOL * max(1.0, abs(top))))
    i, d = divmod(flat, 2)
    left = GradStats(lg[i, d], lh[i, d], float(lw[i, d]), int(ln[i, d]))
    right = GradStats(rg[i, d], rh[i, d], float(rw[i, d]), int(rn[i, d]))
    return SplitCandidate(int(feature_id), float(boundaries[i + 1]), d == 0, float(gain[i, d]),
                          leaf_value(left, reg), leaf_value(right, reg), i + 1, left, right)


def best_split_across_features(candidates: Iterable[Optional[SplitCandidate]]):
    """Highest gain; near-ties go to the lowest ``(feature, threshold)``.

    Tolerance ties are not transitive, so callers must pass every feature's
    candidate in one call rather than reducing in stages.
    """
    cands = [c for c in candidates if c is not None]
    if not cands:
        return None
    top = max(c.gain for c in cands)
    floor = top - GAIN_TIE_TOL * max(1.0, abs(top))
    return min((c for c in cands if c.gain >= floor), key=lambda c: (c.feature_id, c.threshold))


# ---------------------------------------------------------------------------
# post-pruning


def post_prune(tree: DecisionTree, reg: Optional[RegParams] = None) -> DecisionTree:
    """Collapse, bottom-up, every split whose remaining subtree gain sums to <= 0.

    A collapsed split becomes a leaf holding the value it had before it was split.
    """
    nodes = tree.nodes
    collapsed = set()

    def visit(i: int) -> float:
        nd = nodes[i]
        if nd.is_leaf:
            return 0.0
        total = nd.gain + visit(nd.left) + visit(nd.right)
        if total <= 0:
            collapsed.add(i)
            return 0.0
        return total

    visit(0)
    if not collapsed:
        return tree
    return rebuild(tree, collapsed)


def rebuild(tree: DecisionTree, as_leaves: set) -> DecisionTree:
    """Breadth-first copy of ``tree`` with the nodes in ``as_leaves`` turned into leaves."""
    out = []
    queue = [(0, None, False)]
    while queue:
        nxt = []
        for old, parent, is_left in queue:
            nd = tree.nodes[old].copy()
            idx = len(out)
            if parent is not None:
                if is_left:
                    out[parent].left = idx
                else:
                    out[parent].right = idx
            if not nd.is_leaf and old not in as_leaves:
                nxt.append((nd.left, idx, True))
                nxt.append((nd.right, idx, False))
            elif not nd.is_leaf:
                nd = TreeNode(nd.value, gain=0.0, finalized=True, depth=nd.depth)
            out.append(nd)
        queue = nxt
    return DecisionTree(out)
