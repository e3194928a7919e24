import pytest

from layerboost import config as cfgfile
from layerboost.boosting import ConfigError


def test_defaults():
    cfg, data = cfgfile.build({})
    assert cfg.mode == "standard" and cfg.loss.kind == "least_squares"
    assert cfg.multiclass_strategy == "none"
    assert data.batch_size == 256 and data.weight_column is None


def test_parse_comments_and_types():
    values = cfgfile.parse_text("# header\nmode = layer_by_layer  # inline\n\nline_search=yes\n"
                                "l2=0.5\nshuffle_seed=none\n")
    cfg, data = cfgfile.build(values)
    assert cfg.mode == "layer_by_layer" and cfg.line_search and cfg.reg.l2 == 0.5
    assert data.shuffle_seed is None


@pytest.mark.parametrize("kind,k,strategy", [("multiclass_softmax", 3, "per_class_leaves"),
                                             ("logistic", 3, "one_vs_rest"),
                                             ("logistic", 1, "none")])
def test_auto_strategy(kind, k, strategy):
    cfg, _ = cfgfile.build({"loss": kind, "num_classes": str(k)})
    assert cfg.multiclass_strategy == strategy
    assert cfg.num_slots == (k if strategy == "one_vs_rest" else 1)


@pytest.mark.parametrize("text", ["nope=1\n", "mode\n", "line_search=maybe\n", "num_trees=x\n",
                                  "learning_rate=2\n", "batch_size=0\n", "l2=-1\n",
                                  "loss=hinge\n"])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        cfgfile.build(cfgfile.parse_text(text))


def test_overrides_and_dump_round_trip(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("num_trees=4\nmax_depth=2\n")
    values, (cfg, _) = cfgfile.load(p, {"num_trees": "7"})
    assert cfg.num_trees == 7 and cfg.max_depth == 2
    again = cfgfile.parse_text(cfgfile.dump(values))
    assert again == values
    with pytest.raises(ConfigError):
        cfgfile.load(p, {"bogus": "1"})
