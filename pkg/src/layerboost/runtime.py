"""In-process parameter-server runtime.

PS shards own contiguous feature ranges and hold three stamped resources:
quantile streams (+ current bucket boundaries), gradient histograms and an
example counter.  Stateless workers stream mini-batches through a two-phase
iteration (push quantile stats; fetch boundaries, compute derivatives, push
histograms).  The chief polls PS state, and once enough examples have
accumulated flushes every shard to the next stamp and grows one layer.

Scheduling is a seeded round-robin over workers, so every run is replayable
from its log.  :func:`run_threaded` drives the same protocol with real
threads and is only checked for invariants.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .boosting import (BoostConfig, SequentialTrainer, accumulate_batch, apply_layer,
                       bagging_subset, batch_node_stats, evaluate_loss, growable_keys,
                       new_boundaries, new_ensemble, present_values, start_trees,
                       training_done)
from .data_io import Batch
from .histograms import GradHessHistogram, NodeHistogram, best_split_across_features
from .quantile_sketch import QuantileStream, QuantileSummary
from .tree_model import (MAGIC, CheckpointError, CheckpointInvalidError, CheckpointVersionError,
                         StampedResource, TreeEnsemble, WriteOutcome, deserialize_ensemble,
                         serialize_ensemble)

log = logging.getLogger(__name__)

EVENTS = ("push_quantile", "push_grad", "flush", "grow_layer", "finalize_tree", "kill", "restart")
ACCEPTED, STALE = "accepted", "stale"
CHIEF = 0


@dataclass
class LogEvent:
    iteration: int
    worker_id: int
    event: str
    stamp: int
    outcome: str

    def line(self) -> str:
        return f"{self.iteration}\t{self.worker_id}\t{self.event}\t{self.stamp}\t{self.outcome}"

    @classmethod
    def parse(cls, line: str) -> "LogEvent":
        it, wid, event, stamp, outcome = line.rstrip("\n").split("\t")
        if event not in EVENTS:
            raise ValueError(f"unknown log event {event!r}")
        return cls(int(it), int(wid), event, int(stamp), outcome)


def write_log(events, path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.line() + "\n")


def read_log(path) -> list:
    with open(path) as fh:
        return [LogEvent.parse(line) for line in fh if line.strip()]


@dataclass
class PreemptionSchedule:
    kills: list = field(default_factory=list)
    restart_delay: int = 1

    def __post_init__(self):
        self.kills = [(int(w), int(i)) for w, i in self.kills]
        if any(w == CHIEF for w, _ in self.kills):
            raise ValueError("the chief (worker 0) is never preempted")
        if self.restart_delay < 0:
            raise ValueError("restart_delay must be non-negative")

    @classmethod
    def load(cls, path) -> "PreemptionSchedule":
        """Lines ``worker_id<TAB>iteration``; an optional ``restart_delay<TAB>k`` line."""
        kills, delay = [], 1
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) != 2:
                    raise ValueError(f"line {lineno}: expected two fields")
                if parts[0] == "restart_delay":
                    delay = int(parts[1])
                else:
                    kills.append((int(parts[0]), int(parts[1])))
        return cls(kills, delay)


@dataclass
class WorkerTask:
    """A worker slot.  ``batch``/``stamp``/``model`` live only within one iteration."""

    worker_id: int
    is_chief: bool = False
    rng_seed: int = 0
    batch: Optional[Batch] = None
    stamp: int = -1
    model: Optional[TreeEnsemble] = None
    iterations: int = 0
    alive: bool = True
    restart_round: int = 0

    def drop_iteration(self) -> None:
        self.batch, self.stamp, self.model = None, -1, None


@dataclass
class QuantilePayload:
    streams: list
    boundaries: list
    contributors: list = field(default_factory=list)


@dataclass
class ExampleCount:
    count: int = 0
    weight: float = 0.0


@dataclass
class FlushResult:
    shard_id: int
    stamp: int
    hist: GradHessHistogram
    count: ExampleCount
    new_boundaries: list
    quantile_contributors: list


@dataclass
class FlushRecord:
    stamp: int
    grad_contributors: list
    quantile_contributors: list


class PSShard:
    def __init__(self, shard_id: int, features, config: BoostConfig, stamp: int = 0):
        self.shard_id = shard_id
        self.features = np.asarray(features, dtype=np.int64)
        self.config = config
        bounds = [np.zeros(0) for _ in self.features]
        self.quantiles = StampedResource(
            QuantilePayload([QuantileStream(config.epsilon) for _ in self.features], bounds), stamp)
        self.grads = StampedResource(
            GradHessHistogram(self.features, bounds, config.leaf_width), stamp)
        self.counter = StampedResource(ExampleCount(), stamp)

    @property
    def stamp(self) -> int:
        return self.grads.stamp

    def push_quantiles(self, stamp: int, summaries: list, batch_id: int) -> WriteOutcome:
        def update(p: QuantilePayload):
            for stream, s in zip(p.streams, summaries):
                stream.push_summary(s)
            p.contributors.append(batch_id)
            return p
        return self.quantiles.write(stamp, update)

    def fetch_boundaries(self, stamp: int):
        p = self.quantiles.read_at(stamp)
        return None if p is None else p.boundaries

    def push_gradients(self, stamp: int, node_stats: list, batch: Batch) -> WriteOutcome:
        out = self.grads.write(
            stamp, lambda h: accumulate_batch(h, node_stats, batch, self.features))
        if out is not WriteOutcome.ACCEPTED:
            return out

        def bump(c: ExampleCount):
            return ExampleCount(c.count + len(batch), c.weight + float(batch.w.sum()))
        return self.counter.write(stamp, bump)

    def num_examples(self, stamp: int) -> Optional[ExampleCount]:
        return self.counter.read_at(stamp)

    def flush(self, stamp: int, next_stamp: int) -> Optional[FlushResult]:
        p = self.quantiles.read_at(stamp)
        if p is None:
            return None
        bounds = new_boundaries(p.streams, p.boundaries, self.config.num_buckets)
        old_q = self.quantiles.flush(stamp, next_stamp,
                                     lambda q: QuantilePayload(q.streams, bounds))
        old_hist = self.grads.flush(stamp, next_stamp, lambda h: GradHessHistogram(
            self.features, bounds, self.config.leaf_width))
        count = self.counter.flush(stamp, next_stamp, lambda c: ExampleCount())
        return FlushResult(self.shard_id, stamp, old_hist, count, bounds,
                           list(old_q.contributors))

    def reset_quantiles(self, stamp: int) -> None:
        self.quantiles.write(stamp, lambda q: QuantilePayload(
            [QuantileStream(self.config.epsilon) for _ in self.features], q.boundaries))

    def feature_candidates(self, result: FlushResult, keys, reg, allowed,
                           post_pruning: bool) -> dict:
        """Per-feature split candidates over this shard's own features."""
        return result.hist.feature_candidates(keys, reg, allowed, post_pruning)


def partition_features(num_features: int, n_shards: int) -> list:
    """Contiguous id ranges; never more shards than features (at least one shard)."""
    n = max(1, min(n_shards, num_features))
    return [np.asarray(part, dtype=np.int64)
            for part in np.array_split(np.arange(num_features), n)]


class Cluster:
    """PS shards, the model resource, worker slots and the chief's durable state."""

    def __init__(self, config: BoostConfig, num_features: int, n_workers: Optional[int] = None,
                 ensemble: Optional[TreeEnsemble] = None, stamp: int = 0):
        self.config = config
        self.num_features = num_features
        n_workers = n_workers or config.n_workers
        self.shards = [PSShard(k, feats, config, stamp)
                       for k, feats in enumerate(partition_features(num_features, config.n_shards))]
        ens = ensemble if ensemble is not None else new_ensemble(config)
        self.model = StampedResource(start_trees(ens, config, num_features), stamp)
        self.workers = [WorkerTask(i, i == CHIEF, config.seed + i) for i in range(n_workers)]
        self.log: list = []
        self.flushes: list = []
        self.history: list = []
        self.line_search_batch: Optional[Batch] = None
        self.round = 0
        self.last_batch_id = -1
        self.checkpoint_dir: Optional[Path] = None
        self.lock = threading.RLock()
        self._building = False

    # -- state -------------------------------------------------------------

    @property
    def ensemble(self) -> TreeEnsemble:
        return self.model.read()[1]

    @property
    def stamp(self) -> int:
        return self.model.stamp

    @property
    def done(self) -> bool:
        return training_done(self.ensemble, self.config)

    def _record(self, iteration, worker_id, event, stamp, outcome) -> None:
        self.log.append(LogEvent(iteration, worker_id, event, stamp, outcome))
        log.debug("%s", self.log[-1].line())

    # -- worker protocol -----------------------------------------------------

    def push_quantile_stats(self, worker: WorkerTask, batch: Batch) -> bool:
        """Fetch model and stamp, then push local sketches to every shard."""
        if self.line_search_batch is None:
            self.line_search_batch = batch
        worker.batch = batch
        worker.iterations += 1
        worker.stamp, worker.model = self.model.read()
        summaries = []
        for shard in self.shards:
            cols = []
            for j in shard.features:
                vals, w = present_values(batch.X[:, j], batch.w)
                cols.append(QuantileStream(self.config.epsilon).local_summary(vals, w))
            summaries.append(cols)
        with self.lock:
            ok = all(shard.push_quantiles(worker.stamp, cols, batch.batch_id)
                     is WriteOutcome.ACCEPTED for shard, cols in zip(self.shards, summaries))
        self._record(batch.batch_id, worker.worker_id, "push_quantile", worker.stamp,
                     ACCEPTED if ok else STALE)
        if not ok:
            worker.drop_iteration()
        return ok

    def push_gradient_stats(self, worker: WorkerTask) -> bool:
        """Fetch boundaries at the worker's stamp, compute and push histograms."""
        batch, stamp, model = worker.batch, worker.stamp, worker.model
        worker.drop_iteration()
        bounds = [shard.fetch_boundaries(stamp) for shard in self.shards]
        ok = all(b is not None for b in bounds)
        if ok:
            sub = bagging_subset(batch, self.config)
            node_stats = batch_node_stats(model, sub, self.config)
            with self.lock:
                for shard in self.shards:
                    if shard.push_gradients(stamp, node_stats, sub) is not WriteOutcome.ACCEPTED:
                        ok = False
                        break
        self._record(batch.batch_id, worker.worker_id, "push_grad", stamp,
                     ACCEPTED if ok else STALE)
        if ok:
            self.last_batch_id = batch.batch_id
        return ok

    def worker_iteration(self, worker: WorkerTask, batch: Batch, between=None) -> str:
        """One full worker iteration; ``between`` runs after the quantile push (fault injection)."""
        if not len(batch):
            raise ValueError("empty batch")
        if not self.push_quantile_stats(worker, batch):
            return "discarded_stale"
        if between is not None:
            between()
        return "accepted" if self.push_gradient_stats(worker) else "discarded_stale"

    # -- chief ---------------------------------------------------------------

    def chief_check_and_build(self, force: bool = False) -> str:
        """Flush and grow a layer once enough examples accumulated at the current stamp.

        Reads only PS state, never waits on workers.
        """
        with self.lock:
            if self.done:
                return "done"
            stamp = self.model.stamp
            counts = [shard.num_examples(stamp) for shard in self.shards]
            gate = min((c.weight if self.config.gate_on_weight else c.count) for c in counts)
            if gate < self.config.examples_per_layer and not force:
                return "not_ready"
            assert not self._building, "concurrent flush"
            self._building = True
            try:
                self._flush_and_build(stamp)
            finally:
                self._building = False
            if (self.config.checkpoint_every and self.checkpoint_dir is not None
                    and self.stamp % self.config.checkpoint_every == 0):
                self.checkpoint(self.checkpoint_dir)
            return "built"

    def _flush_and_build(self, stamp: int) -> None:
        cfg = self.config
        next_stamp = stamp + 1
        results = [shard.flush(stamp, next_stamp) for shard in self.shards]
        self.flushes.append(FlushRecord(
            stamp, sorted({b for r in results for b in r.hist.contributors}),
            sorted({b for r in results for b in r.quantile_contributors})))
        self._record(self.last_batch_id, CHIEF, "flush", stamp, f"next={next_stamp}")
        ens = self.ensemble
        if any(len(b) for r in results for b in r.hist.boundaries):
            keys = growable_keys(ens)
            allowed = set(ens.feature_subset) if ens.feature_subset else None
            per_shard = [shard.feature_candidates(r, keys, cfg.reg, allowed, cfg.pruning == "post")
                         for shard, r in zip(self.shards, results)]
            # one reduction over all features, as the sequential reference does
            cands = {k: best_split_across_features(c for ps in per_shard for c in ps[k])
                     for k in keys}
            totals = {k: results[0].hist.nodes[k].total for k in keys
                      if k in results[0].hist.nodes}
            res = apply_layer(ens, cands, totals, cfg, self.num_features, self.line_search_batch)
            ens = res.ensemble
            self._record(self.last_batch_id, CHIEF, "grow_layer", next_stamp,
                         f"splits={res.grown}")
            if res.finalized:
                self._record(self.last_batch_id, CHIEF, "finalize_tree", next_stamp,
                             "trees=" + ",".join(map(str, res.finalized)))
                if not cfg.carry_quantiles:
                    for shard in self.shards:
                        shard.reset_quantiles(next_stamp)
                if self.line_search_batch is not None:
                    self.history.append((ens.num_finalized, evaluate_loss(
                        ens, self.line_search_batch, cfg.loss, include_active=False)))
        self.model.flush(stamp, next_stamp, lambda _old: ens)

    # -- checkpointing -------------------------------------------------------

    def checkpoint(self, path) -> None:
        """Persist ensemble, shard resources and chief state; only between steps."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        with self.lock:
            assert not self._building, "checkpoint during flush"
            files = {"ensemble.tfbt": serialize_ensemble(self.ensemble, self.stamp),
                     "chief.tfbt": _pack(self._chief_arrays())}
            for shard in self.shards:
                files[f"shard_{shard.shard_id}.tfbt"] = _pack(_shard_arrays(shard))
        for name, data in files.items():
            (path / name).write_bytes(data)
        manifest = {"format_version": 1, "stamp": self.stamp,
                    "files": {name: hashlib.sha256(data).hexdigest()
                              for name, data in sorted(files.items())}}
        (path / "MANIFEST").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def _chief_arrays(self) -> dict:
        a = {"num_features": np.array([self.num_features]),
             "round": np.array([self.round]), "last_batch_id": np.array([self.last_batch_id]),
             "history": np.array(self.history, dtype=np.float64).reshape(-1, 2)}
        if self.line_search_batch is not None:
            b = self.line_search_batch
            a.update(ls_X=b.X, ls_y=b.y, ls_w=b.w, ls_id=np.array([b.batch_id]))
        return a

    @classmethod
    def restore(cls, path, config: BoostConfig, n_workers: Optional[int] = None) -> "Cluster":
        """Rebuild a cluster from :meth:`checkpoint` output.

        ``config`` may raise ``num_trees`` (warm restart); finished trees are kept as is.
        """
        path = Path(path)
        manifest_path = path / "MANIFEST"
        if not manifest_path.exists():
            raise CheckpointError(f"no checkpoint MANIFEST in {path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format_version") != 1:
            raise CheckpointVersionError(f"unsupported manifest version {manifest.get('format_version')}")
        blobs = {}
        for name, digest in manifest["files"].items():
            data = (path / name).read_bytes()
            if hashlib.sha256(data).hexdigest() != digest:
                raise CheckpointInvalidError(f"{name}: content hash mismatch")
            blobs[name] = data
        ensemble, stamp = deserialize_ensemble(blobs["ensemble.tfbt"])
        chief = _unpack(blobs["chief.tfbt"])
        num_features = int(chief["num_features"][0])
        cluster = cls(config, num_features, n_workers, ensemble, stamp)
        if len(cluster.shards) != sum(n.startswith("shard_") for n in blobs):
            raise CheckpointInvalidError("shard count differs from checkpoint")
        for shard in cluster.shards:
            _load_shard(shard, _unpack(blobs[f"shard_{shard.shard_id}.tfbt"]), stamp)
        cluster.round = int(chief["round"][0])
        cluster.last_batch_id = int(chief["last_batch_id"][0])
        cluster.history = [(int(n), float(v)) for n, v in chief["history"]]
        if "ls_X" in chief:
            cluster.line_search_batch = Batch(chief["ls_X"], chief["ls_y"], chief["ls_w"],
                                              int(chief["ls_id"][0]))
        return cluster


def _pack(arrays: dict) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return MAGIC + struct.pack("<I", 1) + buf.getvalue()


def _unpack(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise CheckpointInvalidError("bad magic in resource file")
    if struct.unpack_from("<I", data, 4)[0] != 1:
        raise CheckpointVersionError("unsupported resource file version")
    with np.load(io.BytesIO(data[8:]), allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


def _shard_arrays(shard: PSShard) -> dict:
    _, q = shard.quantiles.read()
    _, hist = shard.grads.read()
    _, count = shard.counter.read()
    a = {"features": shard.features, "count": np.array([count.count]),
         "weight": np.array([count.weight]),
         "q_contrib": np.array(q.contributors, dtype=np.int64),
         "h_contrib": np.array(hist.contributors, dtype=np.int64)}
    for j, (stream, bounds) in enumerate(zip(q.streams, q.boundaries)):
        a[f"b{j}"] = bounds
        a[f"ql{j}"] = np.array([s is not None for s in stream.levels], dtype=bool)
        for lvl, s in enumerate(stream.levels):
            if s is not None:
                a[f"q{j}_{lvl}"] = np.stack([s.values, s.weights, s.min_rank, s.max_rank])
                a[f"qt{j}_{lvl}"] = np.array([s.total_weight])
    keys = list(hist.nodes)
    a["node_keys"] = np.array(keys, dtype=np.int64).reshape(-1, 2)
    for i, key in enumerate(keys):
        for name, arr in hist.nodes[key].arrays().items():
            a[f"n{i}_{name}"] = arr
    return a


def _load_shard(shard: PSShard, a: dict, stamp: int) -> None:
    if not np.array_equal(a["features"], shard.features):
        raise CheckpointInvalidError(f"shard {shard.shard_id}: feature ownership changed")
    eps = shard.config.epsilon
    streams, bounds = [], []
    for j in range(len(shard.features)):
        bounds.append(a[f"b{j}"])
        stream = QuantileStream(eps)
        for lvl, present in enumerate(a[f"ql{j}"]):
            if not present:
                stream.levels.append(None)
                continue
            v, w, lo, hi = a[f"q{j}_{lvl}"]
            stream.levels.append(QuantileSummary(v, w, lo, hi, float(a[f"qt{j}_{lvl}"][0]), eps))
        streams.append(stream)
    payload = QuantilePayload(streams, bounds, a["q_contrib"].tolist())
    hist = GradHessHistogram(shard.features, bounds, shard.config.leaf_width)
    hist.contributors = a["h_contrib"].tolist()
    for i, key in enumerate(map(tuple, a["node_keys"].tolist())):
        prefix = f"n{i}_"
        hist.nodes[key] = NodeHistogram.from_arrays(
            {k[len(prefix):]: v for k, v in a.items() if k.startswith(prefix)})
    shard.quantiles = StampedResource(payload, stamp)
    shard.grads = StampedResource(hist, stamp)
    shard.counter = StampedResource(ExampleCount(int(a["count"][0]), float(a["weight"][0])), stamp)


# ---------------------------------------------------------------------------
# drivers


def _peek(it: Iterator):
    first = next(it, None)
    if first is None:
        return None, it

    def chained():
        yield first
        yield from it
    return first, chained()


def run_simulation(config: BoostConfig, data_source: Iterable[Batch],
                   preemptions: Optional[PreemptionSchedule] = None,
                   n_workers: Optional[int] = None, cluster: Optional[Cluster] = None,
                   num_features: Optional[int] = None, max_batches: Optional[int] = None):
    """Deterministic round-robin run; returns ``(ensemble, log)``.

    Each round visits live workers in a seeded order and advances each by
    one phase, with a chief poll after every step.  A scheduled kill hits a
    worker right after its quantile push, losing that batch; it restarts
    stateless ``restart_delay`` rounds later.  ``max_batches`` stops pulling
    data early (for checkpoint/resume tests).
    """
    it = iter(data_source)
    if cluster is None:
        first, it = _peek(it)
        if first is None:
            raise ValueError("empty data stream")
        nf = num_features if num_features is not None else first.X.shape[1]
        cluster = Cluster(config, nf, n_workers)
    preemptions = preemptions or PreemptionSchedule()
    if any(w >= len(cluster.workers) for w, _ in preemptions.kills):
        raise ValueError("preemption schedule names a worker that does not exist")
    kills = set(preemptions.kills)
    pulled = 0
    exhausted = False
    while not cluster.done:
        order = np.random.default_rng([config.seed & 0xFFFFFFFF, cluster.round, 0x5C4ED]
                                      ).permutation(len(cluster.workers))
        active = False
        for wid in order.tolist():
            w = cluster.workers[wid]
            if not w.alive:
                if cluster.round >= w.restart_round:
                    w.alive = True
                    cluster._record(-1, wid, "restart", cluster.stamp, "ok")
                else:
                    active = True
                    continue
            if w.batch is None:
                if exhausted or (max_batches is not None and pulled >= max_batches):
                    exhausted = True
                    continue
                batch = next(it, None)
                if batch is None:
                    exhausted = True
                    continue
                if batch.X.shape[1] != cluster.num_features:
                    raise ValueError(f"batch {batch.batch_id}: {batch.X.shape[1]} features, "
                                     f"expected {cluster.num_features}")
                pulled += 1
                active = True
                if cluster.push_quantile_stats(w, batch) and (wid, w.iterations - 1) in kills:
                    cluster._record(batch.batch_id, wid, "kill", w.stamp, "lost")
                    w.drop_iteration()
                    w.alive = False
                    w.restart_round = cluster.round + preemptions.restart_delay + 1
            else:
                active = True
                cluster.push_gradient_stats(w)
            cluster.chief_check_and_build()
            if cluster.done:
                break
        cluster.round += 1
        if not active:
            break
    return cluster.ensemble, cluster.log


def replay_log(config: BoostConfig, events, batches: dict, num_features: int,
               line_search_batch: Optional[Batch] = None,
               ensemble: Optional[TreeEnsemble] = None) -> SequentialTrainer:
    """Feed exactly the accepted pushes of a run log through the sequential reference."""
    ref = SequentialTrainer(config, num_features, line_search_batch, ensemble)
    for ev in events:
        if ev.outcome != ACCEPTED:
            continue
        if ev.event == "push_quantile":
            ref.push_quantiles(batches[ev.iteration])
        elif ev.event == "push_grad":
            ref.push_gradients(batches[ev.iteration])
            ref.maybe_build()
    return ref


def audit_stamps(cluster: Cluster) -> list:
    """Violations of stamp consistency found by cross-checking flushes against the log."""
    accepted = {"push_quantile": {}, "push_grad": {}}
    for ev in cluster.log:
        if ev.event in accepted and ev.outcome == ACCEPTED:
            accepted[ev.event].setdefault(ev.stamp, set()).add(ev.iteration)
    problems = []
    for rec in cluster.flushes:
        for event, contributors in (("push_grad", rec.grad_contributors),
                                    ("push_quantile", rec.quantile_contributors)):
            ok = accepted[event].get(rec.stamp, set())
            bad = sorted(set(contributors) - ok)
            if bad:
                problems.append(f"flush at stamp {rec.stamp}: {event} from batches {bad} "
                                f"not accepted at that stamp")
            missing = sorted(ok - set(contributors))
            if missing:
                problems.append(f"flush at stamp {rec.stamp}: accepted {event} {missing} missing")
    return problems


def run_threaded(config: BoostConfig, batches: list, n_workers: int,
                 num_features: Optional[int] = None) -> Cluster:
    """Real concurrent workers plus a polling chief thread; for invariant checks only."""
    nf = num_features if num_features is not None else batches[0].X.shape[1]
    cluster = Cluster(config, nf, n_workers)
    feed = iter(batches)
    feed_lock = threading.Lock()
    stop = threading.Event()

    def worker_loop(w: WorkerTask):
        while not stop.is_set() and not cluster.done:
            with feed_lock:
                batch = next(feed, None)
            if batch is None:
                return
            if cluster.push_quantile_stats(w, batch):
                cluster.push_gradient_stats(w)

    threads = [threading.Thread(target=worker_loop, args=(w,)) for w in cluster.workers]
    for t in threads:
        t.start()
    while any(t.is_alive() for t in threads):
        cluster.chief_check_and_build()
        if cluster.done:
            stop.set()
    for t in threads:
        t.join()
    cluster.chief_check_and_build()
    return cluster
