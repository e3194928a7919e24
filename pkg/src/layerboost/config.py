"""Flat ``key=value`` training configuration files."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

from .boosting import BoostConfig, ConfigError
from .histograms import RegParams
from .losses import LossSpec

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _bool(text: str) -> bool:
    try:
        return _BOOL[text.lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {text!r}") from None


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() in ("", "none") else int(text)


# key -> (parser, default)
KEYS = {
    "mode": (str, "standard"),
    "loss": (str, "least_squares"),
    "num_classes": (int, 1),
    "multiclass_strategy": (str, "auto"),
    "num_trees": (int, 10),
    "max_depth": (int, 3),
    "learning_rate": (float, 0.1),
    "examples_per_layer": (int, 1000),
    "l1": (float, 0.0),
    "l2": (float, 0.0),
    "tree_complexity": (float, 0.0),
    "min_node_weight": (float, 0.0),
    "dropout": (float, 0.0),
    "feature_fraction": (float, 1.0),
    "example_fraction": (float, 1.0),
    "line_search": (_bool, False),
    "num_buckets": (int, 100),
    "epsilon": (float, 0.01),
    "pruning": (str, "pre"),
    "gate_on_weight": (_bool, False),
    "carry_quantiles": (_bool, False),
    "n_workers": (int, 1),
    "n_shards": (int, 4),
    "seed": (int, 0),
    "checkpoint_every": (int, 0),
    "batch_size": (int, 256),
    "epochs": (int, 1),
    "shuffle_seed": (_opt_int, None),
    "label_column": (str, "label"),
    "weight_column": (str, ""),
}


@dataclass
class DataSettings:
    batch_size: int = 256
    epochs: int = 1
    shuffle_seed: Optional[int] = None
    label_column: str = "label"
    weight_column: Optional[str] = None


def parse_text(text: str) -> dict:
    """``key=value`` lines; ``#`` starts a comment.  Raises on unknown keys."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value")
        if key not in KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def resolve(values: Mapping[str, str]) -> dict:
    """Typed values for every key, defaults filled in."""
    out = {}
    for key, (parse, default) in KEYS.items():
        if key in values:
            try:
                out[key] = parse(values[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {values[key]!r} ({exc})") from None
        else:
            out[key] = default
    return out


def build(values: Mapping[str, str]) -> tuple:
    """``(BoostConfig, DataSettings)`` from raw key/value strings."""
    v = resolve(values)
    k = v["num_classes"]
    kind = v["loss"]
    strategy = v["multiclass_strategy"]
    if strategy == "auto":
        if kind == "multiclass_softmax":
            strategy = "per_class_leaves"
        elif k > 1:
            strategy = "one_vs_rest"
        else:
            strategy = "none"
    loss_classes = k if kind == "multiclass_softmax" else 1
    try:
        loss = LossSpec(kind, loss_classes)
        reg = RegParams(v["l1"], v["l2"], v["tree_complexity"], v["min_node_weight"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = BoostConfig(
        mode=v["mode"], num_trees=v["num_trees"], max_depth=v["max_depth"],
        learning_rate=v["learning_rate"], examples_per_layer=v["examples_per_layer"],
        dropout_prob=v["dropout"], feature_fraction=v["feature_fraction"],
        example_fraction=v["example_fraction"], line_search=v["line_search"], reg=reg,
        seed=v["seed"], loss=loss, multiclass_strategy=strategy,
        num_buckets=v["num_buckets"], epsilon=v["epsilon"], pruning=v["pruning"],
        gate_on_weight=v["gate_on_weight"], carry_quantiles=v["carry_quantiles"],
        n_workers=v["n_workers"], n_shards=v["n_shards"],
        checkpoint_every=v["checkpoint_every"],
        num_classes_ovr=k if strategy == "one_vs_rest" else 0)
    data = DataSettings(v["batch_size"], v["epochs"], v["shuffle_seed"], v["label_column"],
                        v["weight_column"] or None)
    if data.batch_size < 1 or data.epochs < 1:
        raise ConfigError("batch_size and epochs must be positive")
    return cfg, data


def load(path, overrides: Optional[Mapping[str, str]] = None) -> tuple:
    with open(path) as fh:
        values = parse_text(fh.read())
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    return values, build(values)


def dump(values: Mapping[str, str]) -> str:
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))
