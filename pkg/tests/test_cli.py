import subprocess
import sys

import numpy as np
import pytest

from layerboost.cli import load_model, main
from layerboost.tree_model import deserialize_ensemble


def write(path, text):
    path.write_text(text)
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def table(text):
    return dict(line.split("\t", 1) for line in text.strip().splitlines())


TOY = "f0,f1,label\n0,1,0\n1,1,1\n0,0,0\n1,0,1\n"
TOY_CFG = ("loss=logistic\nnum_trees=1\nmax_depth=1\nlearning_rate=1\nexamples_per_layer=4\n"
           "batch_size=4\nepochs=3\n")


@pytest.fixture
def toy(tmp_path):
    return (write(tmp_path / "toy.csv", TOY), write(tmp_path / "toy.cfg", TOY_CFG), tmp_path)


def test_train_then_evaluate_improves_on_zero_model(toy, capsys):
    data, conf, tmp = toy
    code, out, _ = run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "m"))
    assert code == 0
    assert (tmp / "m" / "model.tfbt").exists() and (tmp / "m" / "loss_curve.png").exists()
    assert table(out)["trees"] == "1"
    code, out, _ = run(capsys, "evaluate", "--model", str(tmp / "m"), "--data", data)
    assert code == 0
    rep = table(out)
    assert float(rep["loss"]) < np.log(2)
    assert float(rep["accuracy"]) == 1.0 and rep["count_label_1"] == "2"


def test_predict_with_empty_ensemble_is_zero(toy, capsys):
    data, conf, tmp = toy
    assert run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "m"),
               "--set", "num_trees=0")[0] == 0
    unlabeled = write(tmp / "x.csv", "f0,f1\n3,4\n,1\n")
    code, _, err = run(capsys, "predict", "--model", str(tmp / "m"), "--data", unlabeled,
                       "--out", str(tmp / "p.tsv"))
    assert code == 0 and "rows\t2" in err
    rows = [list(map(float, line.split("\t"))) for line in (tmp / "p.tsv").read_text().split("\n")
            if line]
    assert rows == [[0.0, 0.5], [0.0, 0.5]]


def test_perfect_fit_regression(tmp_path, capsys):
    x = np.repeat([0.0, 1.0, 2.0, 3.0], 3)
    y = np.repeat([1.0, 2.0, 10.0, 12.0], 3)
    data = write(tmp_path / "r.csv", "x,label\n" + "".join(f"{a},{b}\n" for a, b in zip(x, y)))
    conf = write(tmp_path / "r.cfg", "num_trees=1\nmax_depth=2\nlearning_rate=1\n"
                 "examples_per_layer=12\nbatch_size=12\nepochs=4\n")
    assert run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp_path / "m"))[0] == 0
    rep_dir = tmp_path / "rep"
    code, out, _ = run(capsys, "evaluate", "--model", str(tmp_path / "m"), "--data", data,
                       "--report-dir", str(rep_dir))
    assert code == 0 and float(table(out)["loss"]) <= 1e-9
    assert "accuracy" not in table(out)
    for name in ("eval_report.tsv", "staged_loss.tsv", "staged_loss.png", "predictions.png"):
        assert (rep_dir / name).exists()


def test_classification_report_figures(toy, capsys):
    data, conf, tmp = toy
    run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "m"))
    run(capsys, "evaluate", "--model", str(tmp / "m"), "--data", data, "--report-dir",
        str(tmp / "rep"))
    assert (tmp / "rep" / "class_counts.png").stat().st_size > 0
    staged = (tmp / "rep" / "staged_loss.tsv").read_text().splitlines()
    assert staged[0] == "trees\tloss" and len(staged) == 3


def test_deterministic_model_and_log(tmp_path, capsys):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    y = (X[:, 0] * X[:, 1] > 0).astype(int)
    data = write(tmp_path / "d.csv", "a,b,c,label\n" + "".join(
        f"{r[0]!r},{r[1]!r},{r[2]!r},{t}\n" for r, t in zip(X.tolist(), y)))
    conf = write(tmp_path / "d.cfg", "loss=logistic\nnum_trees=3\nmax_depth=2\n"
                 "examples_per_layer=40\nbatch_size=20\nepochs=5\ndropout=0.3\nseed=4\n")
    sched = write(tmp_path / "s.tsv", "1\t2\n")
    outs = []
    for k in range(2):
        d = tmp_path / f"m{k}"
        assert run(capsys, "train", "--config", conf, "--data", data, "--out", str(d),
                   "--workers", "3", "--preempt-schedule", sched)[0] == 0
        outs.append(d)
    for name in ("model.tfbt", "run.log"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert "kill" in (outs[0] / "run.log").read_text()


def test_warm_start_extends_model(toy, capsys):
    data, conf, tmp = toy
    run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "a"))
    code, out, _ = run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "b"),
                       "--warm-start", str(tmp / "a"), "--set", "num_trees=2")
    assert code == 0 and table(out)["trees"] == "2"
    first = load_model(tmp / "a")[0]
    second = load_model(tmp / "b")[0]
    assert first.trees[0].same_as(second.trees[0])


def test_libsvm_input(tmp_path, capsys):
    data = write(tmp_path / "d.svm", "0 1:0.5\n1 2:1.5\n0 1:0.1 2:0.2\n1 2:3\n")
    conf = write(tmp_path / "c.cfg", "loss=logistic\nnum_trees=1\nmax_depth=1\n"
                 "examples_per_layer=4\nbatch_size=4\nepochs=3\n")
    assert run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp_path / "m"))[0] == 0
    ens, _, _, meta = load_model(tmp_path / "m")
    assert meta["num_features"] == 2 and meta["format"] == "libsvm"
    assert run(capsys, "evaluate", "--model", str(tmp_path / "m"), "--data", data)[0] == 0


@pytest.mark.parametrize("cfg_text,data_text,msg", [
    ("bogus=1\n", TOY, "unknown key"),
    ("num_trees=1\n", "f0,label\n1,x\n", "line 2"),
    ("num_trees=1\n", "f0,label\n1\n", "line 2"),
    ("learning_rate=3\n", TOY, "learning_rate"),
])
def test_errors_exit_nonzero_with_one_line(tmp_path, capsys, cfg_text, data_text, msg):
    conf = write(tmp_path / "c.cfg", cfg_text)
    data = write(tmp_path / "d.csv", data_text)
    code, _, err = run(capsys, "train", "--config", conf, "--data", data, "--out",
                       str(tmp_path / "m"))
    assert code == 2
    assert err.startswith("error:") and msg in err and err.count("\n") == 1


def test_skip_bad_rows(tmp_path, capsys):
    conf = write(tmp_path / "c.cfg", "num_trees=1\nmax_depth=1\nexamples_per_layer=2\n"
                 "batch_size=2\nepochs=3\n")
    data = write(tmp_path / "d.csv", "f0,label\n1,1\nbad,2\n2,3\n")
    code, out, _ = run(capsys, "train", "--config", conf, "--data", data, "--out",
                       str(tmp_path / "m"), "--skip-bad-rows")
    assert code == 0 and table(out)["skipped_rows"] == "1"


def test_missing_model_dir(tmp_path, capsys):
    data = write(tmp_path / "d.csv", TOY)
    code, _, err = run(capsys, "evaluate", "--model", str(tmp_path / "none"), "--data", data)
    assert code == 2 and "not a model directory" in err


def test_bad_log_level(toy, capsys, monkeypatch):
    data, conf, tmp = toy
    monkeypatch.setenv("TFBT_LOG_LEVEL", "loud")
    code, _, err = run(capsys, "train", "--config", conf, "--data", data, "--out", str(tmp / "m"))
    assert code == 2 and "TFBT_LOG_LEVEL" in err


def test_module_entry_point(toy):
    data, conf, tmp = toy
    proc = subprocess.run([sys.executable, "-m", "layerboost.cli", "train", "--config", conf,
                           "--data", data, "--out", str(tmp / "m")],
                          capture_output=True, text=True, env={"TFBT_LOG_LEVEL": "info",
                                                               "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    assert "INFO" in proc.stderr or proc.stderr == ""
    blob = (tmp / "m" / "model.tfbt").read_bytes()
    ens, stamp = deserialize_ensemble(blob)
    assert len(ens.trees) == 1 and stamp > 0
