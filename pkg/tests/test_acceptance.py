"""Acceptance criteria.  Each test records one PASS/FAIL line, printed at the end of the run.

Run alone with ``pytest tests/test_acceptance.py`` or ``python3 tests/test_acceptance.py``.
"""
import contextlib
import os
import sys
import time
import tracemalloc
from pathlib import Path

import numpy as np
import pytest

from layerboost.boosting import BoostConfig, evaluate_loss, staged_losses, train
from layerboost.data_io import MiniBatchStream, batches_from_arrays
from layerboost.histograms import GradHessHistogram, RegParams, bucketize_matrix
from layerboost.losses import LossSpec, verify_derivatives
from layerboost.plotting import plot_loss_curves
from layerboost.quantile_sketch import QuantileStream, compress, merge, quantiles
from layerboost.runtime import (Cluster, PreemptionSchedule, audit_stamps, replay_log,
                                run_simulation)
from layerboost.tree_model import serialize_ensemble
from helpers import checkerboard, full_batch_train, whole
from quantile_oracle import SortedOracle
from split_oracle import exhaustive_best_split, random_dataset

RESULTS = []
ARTIFACTS = Path(os.environ.get("LAYERBOOST_ARTIFACTS",
                                Path(__file__).resolve().parent.parent / "artifacts"))
LOSSES = [LossSpec("least_squares"), LossSpec("logistic"), LossSpec("multiclass_softmax", 3)]


@contextlib.contextmanager
def criterion(num, title, limit=None):
    """Record one result line; ``detail`` entries are appended to it."""
    detail = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        RESULTS.append(f"FAIL  {num:>2}. {title}: {type(exc).__name__}: {exc}".splitlines()[0])
        raise
    elapsed = time.perf_counter() - start
    info = ", ".join(f"{k}={v}" for k, v in detail.items())
    slow = limit is not None and elapsed >= limit
    verdict = "FAIL" if slow else "PASS"
    RESULTS.append(f"{verdict}  {num:>2}. {title}: {info}, {elapsed:.1f}s"
                   + (f" (limit {limit}s)" if limit else ""))
    assert not slow, f"took {elapsed:.1f}s, limit {limit}s"


def _labels(loss, X):
    if loss.kind == "least_squares":
        return np.sin(2 * X[:, 0]) + X[:, 1] ** 2
    if loss.kind == "logistic":
        return (X[:, 0] * X[:, 1] > 0).astype(float)
    return (X[:, 0] > 0).astype(float) + (X[:, 1] > 0.5)


# 1 -------------------------------------------------------------------------------

def test_01_split_oracle_equivalence():
    with criterion(1, "histogram splits == exhaustive enumeration", limit=10) as d:
        regs = [RegParams(), RegParams(0.3, 1.0, 0.05, 0.5)]
        mismatches, worst, found = 0, 0.0, 0
        for seed in range(500):
            X, g, h, bounds = random_dataset(seed)
            reg = regs[seed % 2]
            hist = GradHessHistogram(range(X.shape[1]), bounds, 1)
            hist.accumulate([0] * len(g), bucketize_matrix(X, bounds), g[:, None], h[:, None],
                            np.ones(len(g)))
            got = hist.best_splits([0], reg)[0]
            want = exhaustive_best_split(X.tolist(), g.tolist(), h.tolist(), bounds, reg)
            if want is None or got is None:
                mismatches += (want is None) != (got is None)
                continue
            found += 1
            mismatches += (got.feature_id, got.threshold, got.default_left) != want[:3]
            worst = max(worst, abs(got.gain - want[3]))
        d.update(datasets=500, with_split=found, mismatches=mismatches, max_gain_diff=f"{worst:.1e}")
        assert mismatches == 0 and worst <= 1e-9


# 2 -------------------------------------------------------------------------------

def _stream_summary(values, weights, eps, chunk=10_000):
    s = QuantileStream(eps)
    for i in range(0, len(values), chunk):
        s.insert_batch(values[i:i + chunk], weights[i:i + chunk])
    return s.summary()


def test_02_quantile_guarantee():
    with criterion(2, "decile rank error <= eps*W at 1e6 items, incl. 8-way merges", limit=60) as d:
        rng = np.random.default_rng(2)
        n = 10 ** 6
        qs = np.linspace(0.1, 0.9, 9)
        worst = 0.0
        for dist in ("uniform", "zipf", "sorted"):
            v = {"uniform": lambda: rng.uniform(-1, 1, n),
                 "zipf": lambda: rng.zipf(1.3, n).astype(float),
                 "sorted": lambda: np.sort(rng.normal(size=n))}[dist]()
            w = rng.uniform(0.1, 10, n)
            oracle = SortedOracle(v, w)
            for eps in (0.1, 0.01):
                summaries = [_stream_summary(v, w, eps)]
                cuts = np.sort(rng.choice(np.arange(1, n), 7, replace=False))
                parts = [_stream_summary(v[a:b], w[a:b], eps)
                         for a, b in zip(np.r_[0, cuts], np.r_[cuts, n])]
                while len(parts) > 1:
                    i, j = sorted(rng.choice(len(parts), 2, replace=False))
                    m = compress(merge(parts[i], parts[j]))
                    parts = [p for k, p in enumerate(parts) if k not in (i, j)] + [m]
                summaries.append(parts[0])
                for s in summaries:
                    err = max(oracle.query_error(x, q * oracle.total)
                              for x, q in zip(quantiles(s, qs), qs))
                    worst = max(worst, err / (eps * oracle.total))
        d.update(streams=6, merged_trees=6, worst_error_over_bound=f"{worst:.3f}")
        assert worst <= 1.0 + 1e-9


# 3 -------------------------------------------------------------------------------

def test_03_gradient_checks():
    with criterion(3, "analytic derivatives vs central differences", limit=5) as d:
        rng = np.random.default_rng(3)
        worst = {}
        for loss in LOSSES:
            k = loss.num_classes
            if loss.kind == "least_squares":
                probes = [([rng.normal(0, 5)], rng.normal(0, 5)) for _ in range(1000)]
            elif loss.kind == "logistic":
                probes = [([rng.normal(0, 4)], int(rng.integers(2))) for _ in range(1000)]
            else:
                probes = [(rng.normal(0, 3, k), int(rng.integers(k))) for _ in range(1000)]
            worst[loss.kind] = verify_derivatives(loss, probes)
        d.update({k: f"{v:.1e}" for k, v in worst.items()})
        assert max(worst.values()) < 1e-5


# 4 -------------------------------------------------------------------------------

def _random_job(rng, nf=4):
    loss = LOSSES[rng.integers(3)]
    n = int(rng.integers(150, 300))
    X = rng.normal(size=(n, nf))
    X[rng.random(X.shape) < 0.05] = np.nan
    y = _labels(loss, np.nan_to_num(X))
    cfg = BoostConfig(
        mode=("standard", "layer_by_layer")[rng.integers(2)], loss=loss,
        num_trees=int(rng.integers(1, 4)), max_depth=int(rng.integers(1, 4)),
        learning_rate=float(rng.uniform(0.1, 1)), examples_per_layer=int(rng.integers(20, 100)),
        dropout_prob=float(rng.choice([0, 0.3])), feature_fraction=float(rng.choice([1, 0.6])),
        example_fraction=float(rng.choice([1, 0.8])), line_search=bool(rng.integers(2)),
        multiclass_strategy="per_class_leaves" if loss.kind == "multiclass_softmax" else "none",
        n_shards=int(rng.integers(1, 4)), seed=int(rng.integers(1 << 30)),
        num_buckets=int(rng.integers(4, 40)))
    bs = batches_from_arrays(X, y, batch_size=int(rng.integers(10, 40)), epochs=12)
    return cfg, bs


def test_04_distributed_equals_sequential():
    with criterion(4, "simulation == replay through 1-worker reference", limit=120) as d:
        rng = np.random.default_rng(4)
        exact = stale = kills = 0
        for _ in range(50):
            cfg, bs = _random_job(rng)
            nw = int(rng.integers(1, 9))
            sched = [(int(rng.integers(1, nw)), int(rng.integers(0, 6)))
                     for _ in range(int(rng.integers(0, 4)))] if nw > 1 else []
            cluster = Cluster(cfg, 4, nw)
            ens, log = run_simulation(cfg, bs, PreemptionSchedule(sched, int(rng.integers(0, 3))),
                                      cluster=cluster)
            ref = replay_log(cfg, log, {b.batch_id: b for b in bs}, 4, cluster.line_search_batch)
            exact += serialize_ensemble(ref.ensemble) == serialize_ensemble(ens)
            stale += sum(ev.outcome == "stale" for ev in log)
            kills += sum(ev.event == "kill" for ev in log)
        d.update(runs=50, bit_exact=exact, stale_pushes=stale, kills=kills)
        assert exact == 50


# 5 -------------------------------------------------------------------------------

def test_05_stamp_safety():
    with criterion(5, "no stale push reaches a flushed statistic") as d:
        rng = np.random.default_rng(5)
        violations = stale = forced = 0
        loss = LossSpec("logistic")
        X = rng.normal(size=(120, 3))
        y = _labels(loss, X)
        bs = batches_from_arrays(X, y, batch_size=8, epochs=4)
        for run in range(1000):
            nw = int(rng.integers(2, 6))
            cfg = BoostConfig(loss=loss, num_trees=2, max_depth=2, n_shards=2, seed=run,
                              examples_per_layer=int(rng.integers(8, 40)),
                              mode=("standard", "layer_by_layer")[run % 2])
            cluster = Cluster(cfg, 3, nw)
            feed = iter(bs[rng.integers(len(bs) // 2):])
            for _ in range(40):
                if cluster.done:
                    break
                w = cluster.workers[int(rng.integers(nw))]
                if w.batch is None:
                    b = next(feed, None)
                    if b is None:
                        break
                    cluster.push_quantile_stats(w, b)
                else:
                    cluster.push_gradient_stats(w)
                if rng.random() < 0.2:
                    forced += cluster.chief_check_and_build(force=True) == "built"
                else:
                    cluster.chief_check_and_build()
            violations += len(audit_stamps(cluster))
            stale += sum(ev.outcome == "stale" for ev in cluster.log)
        d.update(interleavings=1000, forced_flushes=forced, stale_pushes=stale,
                 violations=violations)
        assert violations == 0 and stale > 0


# 6 -------------------------------------------------------------------------------

def test_06_checkpoint_and_warm_restart(tmp_path):
    with criterion(6, "interrupt/restore/continue == uninterrupted; warm restart keeps prefix") as d:
        rng = np.random.default_rng(6)
        loss = LossSpec("logistic")
        X = rng.normal(size=(300, 4))
        bs = batches_from_arrays(X, _labels(loss, X), batch_size=20, epochs=15)
        cfg = BoostConfig(loss=loss, num_trees=3, max_depth=3, examples_per_layer=60,
                          learning_rate=0.5, line_search=True, dropout_prob=0.3, seed=6)
        reference = serialize_ensemble(run_simulation(cfg, bs, n_workers=1)[0])
        points = [3, 8, 17, 29, 41]
        exact = 0
        for k in points:
            cluster = Cluster(cfg, 4, 1)
            run_simulation(cfg, bs, cluster=cluster, max_batches=k)
            cluster.checkpoint(tmp_path / f"ck{k}")
            back = Cluster.restore(tmp_path / f"ck{k}", cfg)
            ens, _ = run_simulation(cfg, [b for b in bs if b.batch_id > back.last_batch_id],
                                    cluster=back)
            exact += serialize_ensemble(ens) == reference
        # dropout off here: DART legitimately rescales older tree weights
        plain = BoostConfig(**{**cfg.__dict__, "dropout_prob": 0.0})
        done = Cluster(plain, 4, 2)
        first, _ = run_simulation(plain, bs, cluster=done)
        done.checkpoint(tmp_path / "final")
        more = BoostConfig(**{**plain.__dict__, "num_trees": 6})
        grown, _ = run_simulation(more, bs, cluster=Cluster.restore(tmp_path / "final", more))
        prefix = all(a.same_as(b) for a, b in zip(first.trees, grown.trees))
        prefix = prefix and first.tree_weights == grown.tree_weights[:3] and len(grown.trees) == 6
        d.update(interruptions=len(points), bit_exact=exact, warm_prefix=prefix)
        assert exact == len(points) and prefix


# 7 -------------------------------------------------------------------------------

def test_07_mode_coincidence():
    with criterion(7, "layer_by_layer == standard at depth 1") as d:
        rng = np.random.default_rng(7)
        same = 0
        for _ in range(20):
            cfg, bs = _random_job(rng)
            a = train(BoostConfig(**{**cfg.__dict__, "max_depth": 1, "mode": "standard"}), bs)
            b = train(BoostConfig(**{**cfg.__dict__, "max_depth": 1, "mode": "layer_by_layer"}), bs)
            same += serialize_ensemble(a) == serialize_ensemble(b)
        d.update(configs=20, identical=same)
        assert same == 20


# 8 -------------------------------------------------------------------------------

def test_08_layer_by_layer_advantage():
    with criterion(8, "checkerboard training loss, layer_by_layer vs standard", limit=60) as d:
        loss = LossSpec("logistic")
        X, y = checkerboard(5000, seed=8, cells=4)
        curves, final = {}, {}
        for mode in ("standard", "layer_by_layer"):
            cfg = BoostConfig(mode=mode, loss=loss, num_trees=10, max_depth=4,
                              learning_rate=0.3, examples_per_layer=5000, seed=8)
            ens = full_batch_train(cfg, X, y)
            curves[mode] = staged_losses(ens, whole(X, y), loss)
            final[mode] = evaluate_loss(ens, whole(X, y), loss)
        ARTIFACTS.mkdir(parents=True, exist_ok=True)
        plot_loss_curves(curves, ARTIFACTS / "checkerboard_loss.png",
                         title="checkerboard, 10 trees of depth 4")
        rel = final["layer_by_layer"] / final["standard"] - 1
        d.update(standard=f"{final['standard']:.4f}",
                 layer_by_layer=f"{final['layer_by_layer']:.4f}", relative=f"{rel:+.1%}")
        assert rel <= 0.05


# 9 -------------------------------------------------------------------------------

def test_09_loss_descent():
    with criterion(9, "per-tree loss non-increasing with line search") as d:
        rng = np.random.default_rng(9)
        X = rng.normal(size=(600, 3))
        worst_rise = -np.inf
        for loss in LOSSES:
            y = _labels(loss, X)
            cfg = BoostConfig(loss=loss, num_trees=20, max_depth=3, learning_rate=0.3,
                              examples_per_layer=len(y), line_search=True,
                              multiclass_strategy="per_class_leaves"
                              if loss.kind == "multiclass_softmax" else "none")
            curve = [v for _, v in staged_losses(full_batch_train(cfg, X, y), whole(X, y), loss)]
            assert len(curve) == 21
            worst_rise = max(worst_rise, max(b - a for a, b in zip(curve, curve[1:])))
        d.update(losses=3, trees=20, max_step_change=f"{worst_rise:.2e}")
        assert worst_rise <= 1e-9


# 10 ------------------------------------------------------------------------------

def test_10_memory_bound(tmp_path):
    budget = 2 << 20
    with criterion(10, "streaming training stays under an allocation budget") as d:
        nf = 6
        rows = 10 * budget // ((nf + 2) * 8)
        rng = np.random.default_rng(10)
        path = tmp_path / "big.csv"
        with open(path, "w") as fh:
            fh.write(",".join(f"f{j}" for j in range(nf)) + ",label\n")
            for i in range(0, rows, 10_000):
                X = rng.normal(size=(min(10_000, rows - i), nf)).round(6)
                y = (X[:, 0] * X[:, 1] > 0).astype(int)
                fh.writelines(",".join(map(repr, r)) + f",{t}\n" for r, t in zip(X.tolist(), y))
        cfg = BoostConfig(loss=LossSpec("logistic"), num_trees=100, max_depth=3,
                          learning_rate=0.3, examples_per_layer=5000, n_shards=2)
        stream = MiniBatchStream(str(path), batch_size=1000)
        tracemalloc.start()
        try:
            ens, _ = run_simulation(cfg, stream, n_workers=2)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()
        d.update(data_mb=f"{rows * (nf + 2) * 8 / 2**20:.0f}", budget_mb=budget / 2**20,
                 peak_mb=f"{peak / 2**20:.2f}", trees=ens.num_finalized)
        assert peak <= budget and ens.num_finalized > 0


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
