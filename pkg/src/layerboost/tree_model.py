"""Tree and ensemble model, prediction, stamped resources and the binary model format."""
from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

STRATEGIES = ("none", "one_vs_rest", "per_class_leaves")

MAGIC = b"TFBT"
FORMAT_VERSION = 1


class TreeError(ValueError):
    pass


@dataclass
class TreeNode:
    """A leaf (``left == -1``) or a split.

    Split nodes keep ``value``: the leaf value they held before being split.
    Post-pruning restores it and layer-by-layer growth builds children on it.
    """

    value: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    default_left: bool = True
    left: int = -1
    right: int = -1
    gain: float = 0.0
    finalized: bool = False
    depth: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left < 0

    def copy(self) -> "TreeNode":
        return replace(self, value=np.array(self.value, dtype=np.float64))

    def same_as(self, other: "TreeNode") -> bool:
        return (self.feature == other.feature and self.threshold == other.threshold
                and self.default_left == other.default_left and self.left == other.left
                and self.right == other.right and self.gain == other.gain
                and self.finalized == other.finalized and self.depth == other.depth
                and np.array_equal(self.value, other.value))


@dataclass
class DecisionTree:
    nodes: list

    @classmethod
    def single_leaf(cls, value) -> "DecisionTree":
        return cls([TreeNode(np.array(value, dtype=np.float64).reshape(-1))])

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes)

    @property
    def num_outputs(self) -> int:
        return len(self.nodes[0].value)

    def leaves(self) -> list:
        return [i for i, n in enumerate(self.nodes) if n.is_leaf]

    def growable_leaves(self) -> list:
        return [i for i, n in enumerate(self.nodes) if n.is_leaf and not n.finalized]

    @property
    def complete(self) -> bool:
        return not self.growable_leaves()

    def same_as(self, other: "DecisionTree") -> bool:
        return len(self.nodes) == len(other.nodes) and all(
            a.same_as(b) for a, b in zip(self.nodes, other.nodes))

    @cached_property
    def _arrays(self):
        n = len(self.nodes)
        feature = np.array([max(nd.feature, 0) for nd in self.nodes], dtype=np.int64)
        threshold = np.array([nd.threshold for nd in self.nodes], dtype=np.float64)
        default_left = np.array([nd.default_left for nd in self.nodes], dtype=bool)
        left = np.array([nd.left for nd in self.nodes], dtype=np.int64)
        right = np.array([nd.right for nd in self.nodes], dtype=np.int64)
        values = np.stack([nd.value for nd in self.nodes]) if n else np.zeros((0, 1))
        return feature, threshold, default_left, left, right, values

    @cached_property
    def max_feature(self) -> int:
        return max((nd.feature for nd in self.nodes if not nd.is_leaf), default=-1)

    def route(self, X: np.ndarray) -> np.ndarray:
        """Index of the leaf each row of ``X`` lands in (NaN = missing)."""
        feature, threshold, default_left, left, right, _ = self._arrays
        idx = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        for _ in range(self.depth):
            split = left[idx] >= 0
            if not split.any():
                break
            x = X[rows, feature[idx]]
            missing = np.isnan(x)
            with np.errstate(invalid="ignore"):
                go_left = np.where(missing, default_left[idx], x < threshold[idx])
            nxt = np.where(go_left, left[idx], right[idx])
            idx = np.where(split, nxt, idx)
        return idx

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        return self._arrays[5][self.route(X)]


def validate_tree(tree: DecisionTree, max_depth: Optional[int] = None) -> None:
    """Raise :class:`TreeError` unless ``tree`` is a proper breadth-first binary tree."""
    nodes = tree.nodes
    if not nodes:
        raise TreeError("tree has no nodes")
    width = len(nodes[0].value)
    parent_count = [0] * len(nodes)
    for i, nd in enumerate(nodes):
        if len(nd.value) != width or not np.all(np.isfinite(nd.value)):
            raise TreeError(f"node {i}: bad value vector")
        if i > 0 and nd.depth < nodes[i - 1].depth:
            raise TreeError(f"node {i}: not in breadth-first layer order")
        if nd.is_leaf:
            if nd.right >= 0:
                raise TreeError(f"node {i}: leaf with a right child")
            continue
        if not np.isfinite(nd.threshold):
            raise TreeError(f"node {i}: non-finite threshold")
        for child in (nd.left, nd.right):
            if not i < child < len(nodes):
                raise TreeError(f"node {i}: child index {child} out of range")
            if nodes[child].depth != nd.depth + 1:
                raise TreeError(f"node {i}: child {child} at wrong depth")
            parent_count[child] += 1
    if nodes[0].depth != 0 or parent_count[0] != 0:
        raise TreeError("root must be node 0 at depth 0")
    if any(c != 1 for c in parent_count[1:]):
        raise TreeError("every non-root node needs exactly one parent")
    if max_depth is not None and tree.depth > max_depth:
        raise TreeError(f"depth {tree.depth} exceeds max_depth {max_depth}")


def grow_layer(tree: DecisionTree, layer_splits: Mapping[int, Any],
               max_depth: Optional[int] = None) -> DecisionTree:
    """Split the keyed leaves of the deepest layer and finalize the rest.

    Candidates need ``feature_id``, ``threshold``, ``default_left``, ``gain``,
    ``left_value`` and ``right_value``.
    """
    growable = set(tree.growable_leaves())
    for leaf in layer_splits:
        if leaf not in growable:
            raise TreeError(f"node {leaf} is not a growable leaf")
    new_depth = tree.depth + 1
    if layer_splits and max_depth is not None and new_depth > max_depth:
        raise TreeError(f"growing would exceed max_depth {max_depth}")
    nodes = [nd.copy() for nd in tree.nodes]
    for i in sorted(growable):
        cand = layer_splits.get(i)
        if cand is None:
            nodes[i].finalized = True
            continue
        nd = nodes[i]
        nd.feature = int(cand.feature_id)
        nd.threshold = float(cand.threshold)
        nd.default_left = bool(cand.default_left)
        nd.gain = float(cand.gain)
        nd.left = len(nodes)
        nd.right = len(nodes) + 1
        nodes.append(TreeNode(np.array(cand.left_value, dtype=np.float64), depth=new_depth))
        nodes.append(TreeNode(np.array(cand.right_value, dtype=np.float64), depth=new_depth))
    return DecisionTree(nodes)


def finalize_tree(tree: DecisionTree) -> DecisionTree:
    nodes = [nd.copy() for nd in tree.nodes]
    for nd in nodes:
        if nd.is_leaf:
            nd.finalized = True
    return DecisionTree(nodes)


@dataclass
class TreeEnsemble:
    """Weighted sum of trees.

    ``active_tree_index`` marks the first of the trailing trees still being
    grown (several under one-vs-rest, where one tree per class grows at once).
    ``dropped`` and ``feature_subset`` are the per-tree sampling decisions made
    when the active trees were started.
    """

    num_classes: int = 1
    strategy: str = "none"
    trees: list = field(default_factory=list)
    tree_weights: list = field(default_factory=list)
    class_assignment: list = field(default_factory=list)
    active_tree_index: Optional[int] = None
    active_layer_depth: int = 0
    dropped: tuple = ()
    feature_subset: Optional[tuple] = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TreeError(f"unknown multiclass strategy {self.strategy!r}")
        if self.num_classes < 1:
            raise TreeError("num_classes must be positive")

    @property
    def num_outputs(self) -> int:
        return 1 if self.strategy == "none" else self.num_classes

    @property
    def num_finalized(self) -> int:
        return len(self.trees) if self.active_tree_index is None else self.active_tree_index

    @property
    def active_indices(self) -> list:
        if self.active_tree_index is None:
            return []
        return list(range(self.active_tree_index, len(self.trees)))

    def copy(self) -> "TreeEnsemble":
        return replace(self, trees=list(self.trees), tree_weights=list(self.tree_weights),
                       class_assignment=list(self.class_assignment))

    def same_as(self, other: "TreeEnsemble") -> bool:
        return (self.num_classes == other.num_classes and self.strategy == other.strategy
                and self.tree_weights == other.tree_weights
                and self.class_assignment == other.class_assignment
                and self.active_tree_index == other.active_tree_index
                and self.active_layer_depth == other.active_layer_depth
                and tuple(self.dropped) == tuple(other.dropped)
                and self.feature_subset == other.feature_subset
                and len(self.trees) == len(other.trees)
                and all(a.same_as(b) for a, b in zip(self.trees, other.trees)))

    def validate(self) -> None:
        if not (len(self.trees) == len(self.tree_weights) == len(self.class_assignment)):
            raise TreeError("trees, weights and class assignments differ in length")
        if not all(np.isfinite(w) for w in self.tree_weights):
            raise TreeError("non-finite tree weight")
        width = self.num_classes if self.strategy == "per_class_leaves" else 1
        for t, tree in enumerate(self.trees):
            validate_tree(tree)
            if tree.num_outputs != width:
                raise TreeError(f"tree {t}: leaf width {tree.num_outputs}, expected {width}")
            if not 0 <= self.class_assignment[t] < self.num_outputs:
                raise TreeError(f"tree {t}: class assignment out of range")
        if self.strategy == "one_vs_rest":
            if len(self.trees) % self.num_classes:
                raise TreeError("one_vs_rest needs a multiple of num_classes trees")
            if any(c != t % self.num_classes for t, c in enumerate(self.class_assignment)):
                raise TreeError("one_vs_rest tree t must serve class t mod num_classes")
        if self.active_tree_index is not None and not 0 <= self.active_tree_index < len(self.trees):
            raise TreeError("active_tree_index out of range")
        if any(not 0 <= d < len(self.trees) for d in self.dropped):
            raise TreeError("dropped tree index out of range")


def concat(a: TreeEnsemble, b: TreeEnsemble) -> TreeEnsemble:
    if (a.num_classes, a.strategy) != (b.num_classes, b.strategy):
        raise TreeError("cannot concatenate ensembles of different shape")
    return TreeEnsemble(a.num_classes, a.strategy, a.trees + b.trees,
                        a.tree_weights + b.tree_weights,
                        a.class_assignment + b.class_assignment)


def _as_matrix(example) -> np.ndarray:
    if isinstance(example, Mapping):
        width = max(example, default=-1) + 1
        row = np.full(width, np.nan)
        for k, v in example.items():
            row[k] = v
        return row[None, :]
    X = np.asarray(example, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def predict(ensemble: TreeEnsemble, example, dropped_trees: Optional[Iterable[int]] = None,
            include_active: bool = True) -> np.ndarray:
    """Summed weighted leaf values.

    ``example`` is a dense row, an ``(n, F)`` matrix (NaN = missing) or a
    ``{feature_id: value}`` mapping.  Returns ``(num_outputs,)`` for a single
    row and ``(n, num_outputs)`` for a matrix.
    """
    single = isinstance(example, Mapping) or np.ndim(example) == 1
    X = _as_matrix(example)
    out = np.zeros((X.shape[0], ensemble.num_outputs))
    skip = set(dropped_trees or ())
    if any(not 0 <= d < len(ensemble.trees) for d in skip):
        raise TreeError("dropped tree index out of range")
    if not include_active:
        skip.update(ensemble.active_indices)
    for t, tree in enumerate(ensemble.trees):
        if t in skip:
            continue
        if tree.max_feature >= X.shape[1] and not isinstance(example, Mapping):
            raise TreeError(f"example has {X.shape[1]} features; tree {t} splits on "
                            f"feature {tree.max_feature}")
        if tree.max_feature >= X.shape[1]:
            X = np.concatenate([X, np.full((X.shape[0], tree.max_feature + 1 - X.shape[1]),
                                           np.nan)], axis=1)
        vals = tree.leaf_values(X) * ensemble.tree_weights[t]
        if ensemble.strategy == "one_vs_rest":
            out[:, ensemble.class_assignment[t]] += vals[:, 0]
        else:
            out += vals
    return out[0] if single else out


# ---------------------------------------------------------------------------
# stamped resources


class WriteOutcome(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_STALE = "rejected_stale"


class StampedResource:
    """Mutable state guarded by an int64 stamp token.

    Writes carry the stamp the writer read; they apply only while that stamp
    is current.  ``update`` callables receive the payload and return the new
    payload; returning a fresh object keeps earlier snapshots intact.
    """

    def __init__(self, payload: Any, stamp: int = 0):
        self._payload = payload
        self._stamp = int(stamp)
        self._lock = threading.Lock()

    @property
    def stamp(self) -> int:
        return self._stamp

    def read(self) -> tuple:
        with self._lock:
            return self._stamp, self._payload

    def read_at(self, stamp: int):
        """Payload if ``stamp`` is current, else ``None``."""
        with self._lock:
            return self._payload if stamp == self._stamp else None

    def write(self, stamp: int, update: Callable[[Any], Any]) -> WriteOutcome:
        with self._lock:
            if stamp != self._stamp:
                return WriteOutcome.REJECTED_STALE
            self._payload = update(self._payload)
            return WriteOutcome.ACCEPTED

    def flush(self, stamp: int, next_stamp: int, reset: Callable[[Any], Any]):
        """Advance the stamp by one and install ``reset(old)``; returns the old payload.

        Returns ``None`` when ``stamp`` is not current.
        """
        if next_stamp != stamp + 1:
            raise ValueError("stamps advance by exactly one per flush")
        with self._lock:
            if stamp != self._stamp:
                return None
            old = self._payload
            self._payload = reset(old)
            self._stamp = next_stamp
            return old


# ---------------------------------------------------------------------------
# binary model format


class CheckpointError(Exception):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointInvalidError(CheckpointError):
    pass


_STRATEGY_CODE = {name: i for i, name in enumerate(STRATEGIES)}


def serialize_ensemble(ensemble: TreeEnsemble, stamp: int = 0) -> bytes:
    """Little-endian binary layout; growth bookkeeping follows the tree records."""
    out = [MAGIC, struct.pack("<IqIBI", FORMAT_VERSION, stamp, ensemble.num_classes,
                              _STRATEGY_CODE[ensemble.strategy], len(ensemble.trees))]
    for tree, weight, cls in zip(ensemble.trees, ensemble.tree_weights,
                                 ensemble.class_assignment):
        out.append(struct.pack("<dII", weight, cls, len(tree.nodes)))
        for nd in tree.nodes:
            if nd.is_leaf:
                out.append(struct.pack(f"<BI{len(nd.value)}d", 0, len(nd.value), *nd.value))
            else:
                out.append(struct.pack("<BIdBII", 1, nd.feature, nd.threshold,
                                       0 if nd.default_left else 1, nd.left, nd.right))
    # growth bookkeeping: per-node gain/finalized/pre-split value, then metadata
    for tree in ensemble.trees:
        for nd in tree.nodes:
            values = () if nd.is_leaf else tuple(nd.value)
            out.append(struct.pack(f"<dBI{len(values)}d", nd.gain, int(nd.finalized),
                                   len(values), *values))
    active = ensemble.active_tree_index
    out.append(struct.pack("<BII", active is not None, active or 0, ensemble.active_layer_depth))
    out.append(struct.pack(f"<I{len(ensemble.dropped)}I", len(ensemble.dropped),
                           *ensemble.dropped))
    subset = ensemble.feature_subset
    out.append(struct.pack("<B", subset is not None))
    if subset is not None:
        out.append(struct.pack(f"<I{len(subset)}I", len(subset), *subset))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointTruncatedError(f"input ends at byte {len(self.data)}, "
                                           f"needed {self.pos + size}")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals


def deserialize_ensemble(data: bytes) -> tuple:
    """Inverse of :func:`serialize_ensemble`; returns ``(ensemble, stamp)``."""
    if len(data) < 4:
        raise CheckpointTruncatedError("input shorter than the magic")
    if data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}")
    r = _Reader(data)
    r.pos = 4
    version, = r.take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    stamp, num_classes, strategy_code, num_trees = r.take("<qIBI")
    if strategy_code >= len(STRATEGIES):
        raise CheckpointInvalidError(f"unknown strategy code {strategy_code}")
    trees, weights, classes = [], [], []
    depths = []
    for _ in range(num_trees):
        weight, cls, num_nodes = r.take("<dII")
        nodes = []
        for _ in range(num_nodes):
            tag, = r.take("<B")
            if tag == 0:
                count, = r.take("<I")
                nodes.append(TreeNode(np.array(r.take(f"<{count}d"), dtype=np.float64)))
            elif tag == 1:
                feature, threshold, default, left, right = r.take("<IdBII")
                nodes.append(TreeNode(np.zeros(0), feature, threshold, default == 0,
                                      left, right))
            else:
                raise CheckpointInvalidError(f"unknown node tag {tag}")
        trees.append(DecisionTree(nodes))
        weights.append(weight)
        classes.append(cls)
    for tree in trees:
        for nd in tree.nodes:
            nd.gain, finalized, count = r.take("<dBI")
            nd.finalized = bool(finalized)
            values = r.take(f"<{count}d")
            if not nd.is_leaf:
                nd.value = np.array(values, dtype=np.float64)
        try:
            _assign_depths(tree)
        except IndexError as exc:
            raise CheckpointInvalidError(str(exc)) from exc
    has_active, active, layer_depth = r.take("<BII")
    n_dropped, = r.take("<I")
    dropped = tuple(r.take(f"<{n_dropped}I"))
    has_subset, = r.take("<B")
    subset = None
    if has_subset:
        n_subset, = r.take("<I")
        subset = tuple(r.take(f"<{n_subset}I"))
    if r.pos != len(data):
        raise CheckpointInvalidError(f"{len(data) - r.pos} trailing bytes")
    try:
        ens = TreeEnsemble(num_classes, STRATEGIES[strategy_code], trees, weights, classes,
                           active if has_active else None, layer_depth, dropped, subset)
        ens.validate()
    except TreeError as exc:
        raise CheckpointInvalidError(str(exc)) from exc
    return ens, stamp


def _assign_depths(tree: DecisionTree) -> None:
    for nd in tree.nodes:
        if not nd.is_leaf:
            if not (0 <= nd.left < len(tree.nodes) and 0 <= nd.right < len(tree.nodes)):
                raise IndexError("child index out of range")
            tree.nodes[nd.left].depth = nd.depth + 1
            tree.nodes[nd.right].depth = nd.depth + 1
