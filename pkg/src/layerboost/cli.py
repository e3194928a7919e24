"""``layerboost train | predict | evaluate``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import config as cfgfile
from .boosting import ConfigError, staged_losses
from .data_io import DataError, MiniBatchStream
from .losses import LossError, ensemble_loss, probabilities
from .plotting import plot_class_counts, plot_loss_curves, plot_residuals
from .runtime import Cluster, PreemptionSchedule, run_simulation, write_log
from .tree_model import (CheckpointError, TreeError, deserialize_ensemble, predict,
                         serialize_ensemble)

log = logging.getLogger("layerboost")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MODEL_FILE = "model.tfbt"
CONFIG_FILE = "model.cfg"
META_FILE = "model.json"
SCATTER_LIMIT = 5000


class CliError(Exception):
    pass


def _setup_logging() -> None:
    name = os.environ.get("TFBT_LOG_LEVEL", "error").lower()
    if name not in LOG_LEVELS:
        raise CliError(f"TFBT_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _emit(rows, out=None) -> None:
    out = out or sys.stdout
    for key, value in rows:
        out.write(f"{key}\t{value}\n")


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    overrides = _overrides(args.set)
    if args.workers is not None:
        overrides["n_workers"] = str(args.workers)
    values, (cfg, data) = cfgfile.load(args.config, overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream = MiniBatchStream(args.data, data.batch_size, data.epochs, data.shuffle_seed,
                             num_features=args.num_features, label=data.label_column,
                             weight=data.weight_column, skip_bad_rows=args.skip_bad_rows)
    nf = stream.num_features
    if nf < 1:
        raise CliError(f"{args.data}: no features")
    preemptions = PreemptionSchedule.load(args.preempt_schedule) if args.preempt_schedule else None

    batches = iter(stream)
    if args.warm_start:
        ckpt = Path(args.warm_start) / "checkpoint"
        cluster = Cluster.restore(ckpt, cfg)
        if cluster.num_features != nf:
            raise CliError(f"warm start model has {cluster.num_features} features, data has {nf}")
        stored, _ = deserialize_ensemble((ckpt / "ensemble.tfbt").read_bytes())
        if stored.active_tree_index is not None:
            # an interrupted job resumes after the batches it already consumed;
            # a finished one (warm restart) sees the data again from the start
            skip = cluster.last_batch_id
            batches = (b for b in batches if b.batch_id > skip)
    else:
        cluster = Cluster(cfg, nf)
    cluster.checkpoint_dir = out / "checkpoint"

    if cfg.num_trees > 0:
        run_simulation(cfg, batches, preemptions, cluster=cluster)
    cluster.checkpoint(out / "checkpoint")
    ensemble = cluster.ensemble
    (out / MODEL_FILE).write_bytes(serialize_ensemble(ensemble, cluster.stamp))
    (out / CONFIG_FILE).write_text(cfgfile.dump(values))
    meta = {"num_features": nf, "format": stream.format,
            "feature_names": stream.stats["schema"].feature_names if "schema" in stream.stats else None}
    (out / META_FILE).write_text(json.dumps(meta, indent=1) + "\n")
    write_log(cluster.log, out / "run.log")

    curve = _streamed_staged(ensemble, _eval_stream(args.data, nf, data, args.skip_bad_rows), cfg.loss)
    with open(out / "train_report.tsv", "w") as fh:
        fh.write("trees\tloss\n")
        for n, v in curve:
            fh.write(f"{n}\t{_fmt(v)}\n")
    plot_loss_curves({cfg.mode: curve}, out / "loss_curve.png",
                     title=f"{cfg.loss.kind} training loss")
    stale = sum(ev.outcome == "stale" for ev in cluster.log)
    _emit([("trees", ensemble.num_finalized), ("stamp", cluster.stamp),
           ("final_loss", _fmt(curve[-1][1]) if curve else "nan"),
           ("stale_pushes", stale), ("skipped_rows", stream.stats.get("skipped", 0))])
    return 0


def _eval_stream(path, nf, data, skip_bad_rows, require_label=True) -> MiniBatchStream:
    return MiniBatchStream(str(path), data.batch_size, 1, None, num_features=nf,
                           label=data.label_column, weight=data.weight_column,
                           skip_bad_rows=skip_bad_rows, require_label=require_label)


def _streamed_staged(ensemble, batches, loss) -> list:
    """Weighted staged losses accumulated batch by batch."""
    totals, weight = None, 0.0
    for batch in batches:
        if not len(batch):
            continue
        stage = staged_losses(ensemble, batch, loss)
        bw = float(batch.w.sum())
        vals = np.array([v for _, v in stage]) * bw
        totals = vals if totals is None else totals + vals
        trees = [n for n, _ in stage]
        weight += bw
    if totals is None:
        return []
    return list(zip(trees, (totals / weight).tolist()))


# ---------------------------------------------------------------------------
# model loading


def load_model(model_dir):
    """``(ensemble, BoostConfig, DataSettings, meta)`` from a train output directory."""
    d = Path(model_dir)
    try:
        blob = (d / MODEL_FILE).read_bytes()
        values = cfgfile.parse_text((d / CONFIG_FILE).read_text())
        meta = json.loads((d / META_FILE).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"{model_dir}: not a model directory ({exc.filename} missing)") from None
    ensemble, _ = deserialize_ensemble(blob)
    cfg, data = cfgfile.build(values)
    return ensemble, cfg, data, meta


def _predicted_class(cfg, scores):
    if cfg.loss.kind == "least_squares" and cfg.multiclass_strategy == "none":
        return None
    if scores.shape[1] == 1:
        return (scores[:, 0] > 0).astype(int)
    return np.argmax(scores, axis=1)


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    ensemble, cfg, data, meta = load_model(args.model)
    stream = _eval_stream(args.data, meta["num_features"], data, args.skip_bad_rows,
                          require_label=False)
    rows = 0
    with open(args.out, "w") as fh:
        for batch in stream:
            scores = predict(ensemble, batch.X)
            probs = probabilities(cfg.loss, ensemble.strategy, scores)
            cols = scores if probs is None else np.concatenate([scores, probs], axis=1)
            for row in cols:
                fh.write("\t".join(_fmt(v) for v in row) + "\n")
            rows += len(batch)
    _emit([("rows", rows), ("skipped_rows", stream.stats.get("skipped", 0))], sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    ensemble, cfg, data, meta = load_model(args.model)
    nf = meta["num_features"]
    loss_sum = weight = 0.0
    correct = n = 0
    true_counts, pred_counts = Counter(), Counter()
    ys, preds = [], []
    for batch in _eval_stream(args.data, nf, data, args.skip_bad_rows):
        scores = predict(ensemble, batch.X)
        per = ensemble_loss(cfg.loss, ensemble.strategy, ensemble.num_classes, scores, batch.y)
        loss_sum += float(np.dot(batch.w, per))
        weight += float(batch.w.sum())
        n += len(batch)
        cls = _predicted_class(cfg, scores)
        if cls is not None:
            labels = batch.y.astype(int)
            correct += int(np.sum(cls == labels))
            true_counts.update(labels.tolist())
            pred_counts.update(cls.tolist())
        elif len(ys) < SCATTER_LIMIT:
            ys.append(batch.y[:SCATTER_LIMIT])
            preds.append(scores[:SCATTER_LIMIT, 0])
    if n == 0:
        raise CliError(f"{args.data}: no examples")
    rows = [("examples", n), ("loss", _fmt(loss_sum / weight))]
    if true_counts or pred_counts:
        rows.append(("accuracy", _fmt(correct / n)))
        for c in sorted(set(true_counts) | set(pred_counts)):
            rows.append((f"count_label_{c}", true_counts.get(c, 0)))
            rows.append((f"count_pred_{c}", pred_counts.get(c, 0)))
    _emit(rows)

    if args.report_dir:
        rep = Path(args.report_dir)
        rep.mkdir(parents=True, exist_ok=True)
        with open(rep / "eval_report.tsv", "w") as fh:
            _emit(rows, fh)
        curve = _streamed_staged(ensemble, _eval_stream(args.data, nf, data, args.skip_bad_rows),
                                 cfg.loss)
        with open(rep / "staged_loss.tsv", "w") as fh:
            fh.write("trees\tloss\n")
            for k, v in curve:
                fh.write(f"{k}\t{_fmt(v)}\n")
        plot_loss_curves({"evaluation": curve}, rep / "staged_loss.png",
                         title="loss by number of trees")
        if true_counts or pred_counts:
            plot_class_counts(true_counts, pred_counts, rep / "class_counts.png")
        else:
            y = np.concatenate(ys)[:SCATTER_LIMIT]
            p = np.concatenate(preds)[:SCATTER_LIMIT]
            plot_residuals(y, p, rep / "predictions.png")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerboost",
                                description="Layer-by-layer gradient boosted trees.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--workers", type=int)
    t.add_argument("--preempt-schedule")
    t.add_argument("--warm-start", metavar="DIR",
                   help="continue from a previous train output directory")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--num-features", type=int, help="feature count for libsvm input")
    t.add_argument("--skip-bad-rows", action="store_true")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write one score row per example")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--skip-bad-rows", action="store_true")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="report loss and accuracy")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report-dir", help="also write TSV tables and figures here")
    e.add_argument("--skip-bad-rows", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (CliError, ConfigError, DataError, LossError, TreeError, CheckpointError,
            OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
