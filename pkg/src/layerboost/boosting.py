"""Ensemble growth: standard and layer-by-layer boosting.

The chief-side logic (starting trees, applying a layer of split candidates,
finalizing trees with line search and dropout) lives here and is shared by
the distributed runtime and :class:`SequentialTrainer`, the single-process
reference that consumes batches one at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import losses
from .data_io import Batch
from .histograms import (GradHessHistogram, GradStats, RegParams, best_split_across_features,
                         bucketize_matrix, leaf_value, post_prune)
from .losses import LossSpec
from .quantile_sketch import DEFAULT_EPSILON, DEFAULT_NUM_BUCKETS, QuantileStream, boundaries
from .tree_model import DecisionTree, TreeEnsemble, finalize_tree, grow_layer, predict

MODES = ("standard", "layer_by_layer")
LINE_SEARCH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)

# sub-stream tags for seeded generators
_RNG_DROPOUT, _RNG_FEATURES, _RNG_BAGGING = 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BoostConfig:
    mode: str = "standard"
    num_trees: int = 10
    max_depth: int = 3
    learning_rate: float = 0.1
    examples_per_layer: int = 1000
    dropout_prob: float = 0.0
    feature_fraction: float = 1.0
    example_fraction: float = 1.0
    line_search: bool = False
    reg: RegParams = field(default_factory=RegParams)
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    multiclass_strategy: str = "none"
    num_buckets: int = DEFAULT_NUM_BUCKETS
    epsilon: float = DEFAULT_EPSILON
    pruning: str = "pre"
    gate_on_weight: bool = False
    carry_quantiles: bool = False
    line_search_multipliers: tuple = LINE_SEARCH_MULTIPLIERS
    n_workers: int = 1
    n_shards: int = 4
    checkpoint_every: int = 0
    num_classes_ovr: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.num_trees < 0 or self.max_depth < 1 or self.examples_per_layer < 1:
            raise ConfigError("num_trees >= 0, max_depth >= 1, examples_per_layer >= 1 required")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not (0 < self.feature_fraction <= 1 and 0 < self.example_fraction <= 1):
            raise ConfigError("sampling fractions must lie in (0, 1]")
        if self.pruning not in ("pre", "post"):
            raise ConfigError("pruning must be 'pre' or 'post'")
        if self.n_workers < 1 or self.n_shards < 1 or self.num_buckets < 1:
            raise ConfigError("n_workers, n_shards and num_buckets must be positive")
        strategy, kind = self.multiclass_strategy, self.loss.kind
        if strategy not in ("none", "one_vs_rest", "per_class_leaves"):
            raise ConfigError(f"unknown multiclass strategy {strategy!r}")
        if strategy == "per_class_leaves" and kind not in ("multiclass_softmax", "custom"):
            raise ConfigError("per_class_leaves needs a multiclass loss")
        if strategy == "none" and kind == "multiclass_softmax":
            raise ConfigError("multiclass_softmax needs per_class_leaves or one_vs_rest")
        if strategy == "one_vs_rest" and self.num_classes < 2:
            raise ConfigError("one_vs_rest needs num_classes >= 2")

    @property
    def num_classes(self) -> int:
        """Ensemble outputs; a one-vs-rest binary loss takes the count from ``num_classes_ovr``."""
        if self.multiclass_strategy == "one_vs_rest":
            return self.num_classes_ovr or self.loss.num_classes
        return self.loss.num_classes

    @property
    def num_slots(self) -> int:
        """Trees grown side by side (one per class under one-vs-rest)."""
        return self.num_classes if self.multiclass_strategy == "one_vs_rest" else 1

    @property
    def leaf_width(self) -> int:
        return self.loss.num_classes if self.multiclass_strategy == "per_class_leaves" else 1


def rng_for(seed: int, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index, tag])


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class DropoutDecision:
    dropped: tuple = ()
    normalization: float = 1.0


def sample_dropout(ensemble: TreeEnsemble, dropout_prob: float,
                   rng: np.random.Generator) -> DropoutDecision:
    """Drop each finalized tree with ``dropout_prob``; at least one when enabled."""
    n = ensemble.num_finalized
    if dropout_prob <= 0 or n == 0:
        return DropoutDecision()
    mask = rng.random(n) < dropout_prob
    if not mask.any():
        mask[rng.integers(n)] = True
    dropped = tuple(int(i) for i in np.flatnonzero(mask))
    return DropoutDecision(dropped, 1.0 / (len(dropped) + 1))


def sample_features(num_features: int, feature_fraction: float,
                    rng: np.random.Generator) -> tuple:
    k = math.ceil(feature_fraction * num_features)
    if k >= num_features:
        return tuple(range(num_features))
    return tuple(sorted(int(i) for i in rng.choice(num_features, size=k, replace=False)))


def sample_examples(batch: Batch, example_fraction: float, rng: np.random.Generator) -> Batch:
    if example_fraction >= 1:
        return batch
    return batch.subset(rng.random(len(batch)) < example_fraction)


# ---------------------------------------------------------------------------
# gradients and line search


def compute_gradients_for_growth(ensemble: TreeEnsemble, X: np.ndarray, y: np.ndarray,
                                 loss: LossSpec, mode: str, dropped: Iterable[int] = ()):
    """Derivatives at the scores the next layer should correct.

    Layer-by-layer includes the partially grown tree(s); standard mode scores
    against finalized trees only.
    """
    scores = predict(ensemble, X, dropped, include_active=(mode == "layer_by_layer"))
    return losses.ensemble_derivatives(loss, ensemble.strategy, ensemble.num_classes, scores, y)


def line_search_weight(tree: DecisionTree, ensemble: TreeEnsemble, batch: Batch,
                       loss: LossSpec, learning_rate: float, class_index: int = 0,
                       multipliers: Sequence[float] = LINE_SEARCH_MULTIPLIERS,
                       dropped: Iterable[int] = ()) -> float:
    """Candidate tree weight with the lowest weighted batch loss; ties go to the smaller."""
    base = predict(ensemble, batch.X, dropped, include_active=False)
    contrib = tree.leaf_values(batch.X)
    best_w, best_loss = None, math.inf
    for m in sorted(multipliers):
        w = learning_rate * m
        scores = base.copy()
        if ensemble.strategy == "one_vs_rest":
            scores[:, class_index] += w * contrib[:, 0]
        else:
            scores += w * contrib
        value = float(np.dot(batch.w, losses.ensemble_loss(
            loss, ensemble.strategy, ensemble.num_classes, scores, batch.y)))
        if value < best_loss:
            best_w, best_loss = w, value
    return best_w


def evaluate_loss(ensemble: TreeEnsemble, batch: Batch, loss: LossSpec,
                  include_active: bool = True) -> float:
    """Weighted mean loss of ``ensemble`` on ``batch``."""
    scores = predict(ensemble, batch.X, include_active=include_active)
    per = losses.ensemble_loss(loss, ensemble.strategy, ensemble.num_classes, scores, batch.y)
    return float(np.dot(batch.w, per) / batch.w.sum())



def staged_losses(ensemble: TreeEnsemble, batch: Batch, loss: LossSpec) -> list:
    """``(trees, loss)`` after each finished tree group, starting from the empty model.

    Uses the final tree weights, so under dropout the prefixes are the
    reweighted trees rather than the models seen during training.
    """
    step = ensemble.num_classes if ensemble.strategy == "one_vs_rest" else 1
    scores = np.zeros((len(batch), ensemble.num_outputs))
    out = []
    for end in range(0, ensemble.num_finalized + 1, step):
        if end:
            part = replace(ensemble, trees=ensemble.trees[end - step:end],
                           tree_weights=ensemble.tree_weights[end - step:end],
                           class_assignment=ensemble.class_assignment[end - step:end],
                           active_tree_index=None, dropped=(), feature_subset=None)
            scores = scores + predict(part, batch.X)
        per = losses.ensemble_loss(loss, ensemble.strategy, ensemble.num_classes, scores, batch.y)
        out.append((end, float(np.dot(batch.w, per) / batch.w.sum())))
    return out

# ---------------------------------------------------------------------------
# chief-side ensemble updates


def new_ensemble(config: BoostConfig) -> TreeEnsemble:
    return TreeEnsemble(config.num_classes if config.multiclass_strategy != "none" else 1,
                        config.multiclass_strategy)


def target_trees(config: BoostConfig) -> int:
    return config.num_trees * config.num_slots


def training_done(ensemble: TreeEnsemble, config: BoostConfig) -> bool:
    return ensemble.active_tree_index is None and ensemble.num_finalized >= target_trees(config)


def start_trees(ensemble: TreeEnsemble, config: BoostConfig, num_features: int) -> TreeEnsemble:
    """Append the next tree group as single zero leaves and draw its sampling decisions."""
    if ensemble.active_tree_index is not None or training_done(ensemble, config):
        return ensemble
    ens = ensemble.copy()
    first = len(ens.trees)
    decision = sample_dropout(ens, config.dropout_prob,
                              rng_for(config.seed, first, _RNG_DROPOUT))
    subset = None
    if config.feature_fraction < 1:
        subset = sample_features(num_features, config.feature_fraction,
                                 rng_for(config.seed, first, _RNG_FEATURES))
    for slot in range(config.num_slots):
        ens.trees.append(DecisionTree.single_leaf(np.zeros(config.leaf_width)))
        ens.tree_weights.append(config.learning_rate)
        ens.class_assignment.append(slot if config.multiclass_strategy == "one_vs_rest" else 0)
    ens.active_tree_index = first
    ens.active_layer_depth = 0
    ens.dropped = decision.dropped
    ens.feature_subset = subset
    return ens


def growable_keys(ensemble: TreeEnsemble) -> list:
    """``(slot, node)`` for every leaf the next layer may split."""
    keys = []
    for slot, t in enumerate(ensemble.active_indices):
        keys.extend((slot, leaf) for leaf in ensemble.trees[t].growable_leaves())
    return keys


def bagging_subset(batch: Batch, config: BoostConfig) -> Batch:
    return sample_examples(batch, config.example_fraction,
                           rng_for(config.seed, batch.batch_id, _RNG_BAGGING))


def batch_node_stats(ensemble: TreeEnsemble, batch: Batch, config: BoostConfig) -> list:
    """Per active slot: ``(node_keys, g, h)`` for every row of ``batch``.

    Rows in finalized leaves get ``None`` keys.  Under one-vs-rest slot ``k``
    uses gradient column ``k``.
    """
    if ensemble.active_tree_index is None or not len(batch):
        return []
    g, h = compute_gradients_for_growth(ensemble, batch.X, batch.y, config.loss, config.mode,
                                        ensemble.dropped)
    out = []
    for slot, t in enumerate(ensemble.active_indices):
        tree = ensemble.trees[t]
        leaves = tree.route(batch.X)
        growable = np.array([nd.is_leaf and not nd.finalized for nd in tree.nodes])
        keys = [(slot, int(leaf)) if growable[leaf] else None for leaf in leaves]
        if config.multiclass_strategy == "one_vs_rest":
            out.append((keys, g[:, slot:slot + 1], h[:, slot:slot + 1]))
        else:
            out.append((keys, g, h))
    return out


def accumulate_batch(hist: GradHessHistogram, node_stats: list, batch: Batch,
                     feature_ids: np.ndarray) -> GradHessHistogram:
    buckets = bucketize_matrix(batch.X[:, feature_ids], hist.boundaries)
    for keys, g, h in node_stats:
        hist.accumulate(keys, buckets, g, h, batch.w)
    hist.contributors.append(batch.batch_id)
    return hist


@dataclass
class LayerResult:
    ensemble: TreeEnsemble
    grown: int = 0
    finalized: list = field(default_factory=list)


def apply_layer(ensemble: TreeEnsemble, candidates: dict, totals: dict, config: BoostConfig,
                num_features: int, line_search_batch: Optional[Batch] = None) -> LayerResult:
    """Grow one layer on every active tree from per-node candidates.

    ``candidates`` maps ``(slot, node)`` to a split candidate or ``None``;
    ``totals`` maps ``(slot, node)`` to the node's GradStats.  When the tree
    group is complete it is finalized and the next group started.
    """
    ens = ensemble.copy()
    layered = config.mode == "layer_by_layer"
    grown = 0
    complete = True
    for slot, t in enumerate(ens.active_indices):
        tree = ens.trees[t]
        if tree.complete:
            continue
        splits = {}
        for leaf in tree.growable_leaves():
            cand = candidates.get((slot, leaf))
            if cand is None:
                continue
            base = tree.nodes[leaf].value if layered else 0.0
            splits[leaf] = replace(cand, left_value=base + cand.left_value,
                                   right_value=base + cand.right_value)
        if not splits and tree.depth == 0 and (slot, 0) in totals:
            # unsplittable root still takes its Newton step
            root = tree.nodes[0].copy()
            root.value = root.value + leaf_value(totals[(slot, 0)], config.reg)
            tree = DecisionTree([root])
        tree = grow_layer(tree, splits, config.max_depth)
        grown += len(splits)
        if not splits or tree.depth >= config.max_depth:
            tree = finalize_tree(tree)
        else:
            complete = False
        ens.trees[t] = tree
    ens.active_layer_depth += 1
    result = LayerResult(ens, grown)
    if complete:
        result.finalized = list(ens.active_indices)
        result.ensemble = start_trees(finalize_group(ens, config, line_search_batch),
                                      config, num_features)
    return result


def finalize_group(ensemble: TreeEnsemble, config: BoostConfig,
                   line_search_batch: Optional[Batch]) -> TreeEnsemble:
    """Post-prune, set weights by line search, and apply the dropout normalization."""
    ens = ensemble.copy()
    active = ens.active_indices
    if config.pruning == "post":
        for t in active:
            ens.trees[t] = post_prune(ens.trees[t], config.reg)
    for t in active:
        w = config.learning_rate
        if config.line_search and line_search_batch is not None and len(line_search_batch):
            w = line_search_weight(ens.trees[t], ens, line_search_batch, config.loss,
                                   config.learning_rate, ens.class_assignment[t],
                                   config.line_search_multipliers, ens.dropped)
        ens.tree_weights[t] = w
    if ens.dropped:
        k = len(ens.dropped)
        for t in active:
            ens.tree_weights[t] *= 1.0 / (k + 1)
        for d in ens.dropped:
            ens.tree_weights[d] *= k / (k + 1)
    ens.active_tree_index = None
    ens.active_layer_depth = 0
    ens.dropped = ()
    ens.feature_subset = None
    return ens


def new_boundaries(streams: Sequence[QuantileStream], previous: Sequence[np.ndarray],
                   num_buckets: int) -> list:
    out = []
    for stream, prev in zip(streams, previous):
        out.append(boundaries(stream.summary(), num_buckets) if stream.total_weight > 0 else prev)
    return out


def present_values(col: np.ndarray, w: np.ndarray):
    keep = ~np.isnan(col)
    return col[keep], w[keep]


# ---------------------------------------------------------------------------
# sequential reference


class SequentialTrainer:
    """Single-process trainer following the same protocol as the distributed runtime.

    Each batch contributes quantile statistics, then gradient statistics, and
    a layer is built once ``examples_per_layer`` examples have accumulated.
    """

    def __init__(self, config: BoostConfig, num_features: int,
                 line_search_batch: Optional[Batch] = None,
                 ensemble: Optional[TreeEnsemble] = None):
        self.config = config
        self.num_features = num_features
        self.features = np.arange(num_features)
        self.line_search_batch = line_search_batch
        self.streams = [QuantileStream(config.epsilon) for _ in range(num_features)]
        self.boundaries = [np.zeros(0) for _ in range(num_features)]
        self.hist = GradHessHistogram(self.features, self.boundaries, config.leaf_width)
        self.count = 0
        self.weight = 0.0
        self.layers_built = 0
        ens = ensemble if ensemble is not None else new_ensemble(config)
        self.ensemble = start_trees(ens, config, num_features)

    @property
    def done(self) -> bool:
        return training_done(self.ensemble, self.config)

    def push_quantiles(self, batch: Batch) -> None:
        if self.line_search_batch is None:
            self.line_search_batch = batch
        for j in range(self.num_features):
            vals, w = present_values(batch.X[:, j], batch.w)
            self.streams[j].push_summary(self.streams[j].local_summary(vals, w))

    def push_gradients(self, batch: Batch) -> None:
        sub = bagging_subset(batch, self.config)
        accumulate_batch(self.hist, batch_node_stats(self.ensemble, sub, self.config), sub,
                         self.features)
        self.count += len(sub)
        self.weight += float(sub.w.sum())

    def ready(self) -> bool:
        gate = self.weight if self.config.gate_on_weight else self.count
        return gate >= self.config.examples_per_layer

    def maybe_build(self) -> bool:
        if self.done or not self.ready():
            return False
        stats = self.hist
        self.boundaries = new_boundaries(self.streams, self.boundaries, self.config.num_buckets)
        self.hist = GradHessHistogram(self.features, self.boundaries, self.config.leaf_width)
        self.count, self.weight = 0, 0.0
        if not any(len(b) for b in stats.boundaries):
            return True
        keys = growable_keys(self.ensemble)
        allowed = set(self.ensemble.feature_subset) if self.ensemble.feature_subset else None
        cands = stats.best_splits(keys, self.config.reg, allowed, self.config.pruning == "post")
        totals = {k: stats.nodes[k].total for k in keys if k in stats.nodes}
        result = apply_layer(self.ensemble, cands, totals, self.config, self.num_features,
                             self.line_search_batch)
        self.ensemble = result.ensemble
        self.layers_built += 1
        if result.finalized and not self.config.carry_quantiles:
            self.streams = [QuantileStream(self.config.epsilon) for _ in range(self.num_features)]
        return True

    def process(self, batch: Batch) -> None:
        if self.done:
            return
        self.push_quantiles(batch)
        self.push_gradients(batch)
        self.maybe_build()


def train(config: BoostConfig, data_source: Iterable[Batch], runtime=None,
          num_features: Optional[int] = None) -> TreeEnsemble:
    """Boost until ``num_trees`` trees are finalized or the data runs out.

    With ``runtime`` (a :class:`layerboost.runtime.Cluster`) the distributed
    simulation drives training instead of the sequential reference.
    """
    if runtime is not None:
        from .runtime import run_simulation
        ensemble, _ = run_simulation(config, data_source, cluster=runtime)
        return ensemble
    it = iter(data_source)
    first = next(it, None)
    if config.num_trees == 0:
        return new_ensemble(config)
    if first is None:
        raise ValueError("empty data stream")
    nf = num_features if num_features is not None else first.X.shape[1]
    if first.X.shape[1] != nf:
        raise ValueError(f"batch has {first.X.shape[1]} features, expected {nf}")
    trainer = SequentialTrainer(config, nf)
    trainer.process(first)
    for batch in it:
        if trainer.done:
            break
        if batch.X.shape[1] != nf:
            raise ValueError(f"batch {batch.batch_id}: {batch.X.shape[1]} features, expected {nf}")
        trainer.process(batch)
    return trainer.ensemble
