import csv
import math

import numpy as np
import pytest

from conftest import MNIST_DIR
from moonsparse import checkpoint
from moonsparse.cli import csv_bytes, fmt, main
from moonsparse.network import Layer, SparseNetwork

needs_mnist = pytest.mark.skipif(not MNIST_DIR.exists(), reason="bundled MNIST subset missing")

MNIST_CFG = f"""
seed = 0
dataset.kind = mnist-heldout
dataset.mnist_dir = {MNIST_DIR}
model.hidden = 32,16
sparsity.level = 0.9
sparsity.interval = 25
moon.t_e = 1
moon.w_f = 1
moon.r = 64
train.epochs = 2
train.loss = moon
train.log_wall_time = false
ood.sets = heldout,uniform
ood.n = 200
ood.detectors = msp,ebo
"""

GM_CFG = """
seed = 3
dataset.kind = gm
dataset.gm_separation = 3
dataset.gm_train_per_class = 400
dataset.gm_test_per_class = 500
model.hidden = 16,16
sparsity.level = 0.5
sparsity.interval = 10
moon.t_e = 2
train.epochs = 6
train.loss = moon
train.batch_size = 32
train.lr_max = 0.05
train.lr_min = 0.0005
train.log_wall_time = false
ood.sets = shifted
ood.shift = 0,0
ood.n = 1000
ood.detectors = msp,odin,ebo,knn,klm
theory.seeds = 2
theory.anchors = 20
"""


def write_cfg(tmp_path, text, name="run.cfg", **overrides):
    lines = [l for l in text.strip().splitlines() if l.split("=")[0].strip() not in overrides]
    lines += [f"{k} = {v}" for k, v in overrides.items()]
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_number_formatting():
    assert fmt(0.1) == "0.1" and float(fmt(1 / 3)) == 1 / 3
    assert fmt(None) == "" and fmt(True) == "true" and fmt(np.float64(2.5)) == "2.5"
    assert csv_bytes(["a", "b"], [["x,y", 1.0]]) == b'a,b\r\n"x,y",1.0\r\n'


@needs_mnist
def test_train_smoke_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, MNIST_CFG)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    names = {"checkpoint", "checkpoint-raw", "epoch_log.csv", "config-echo"}
    assert names <= {p.name for p in (tmp_path / "a").iterdir()}
    rows = read_csv(tmp_path / "a" / "epoch_log.csv")
    assert rows[0] == ["epoch", "train_loss", "val_acc", "w", "sparsity", "wall_ms", "flops"]
    assert len(rows) == 3 and rows[1][5] == ""
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    echo = (tmp_path / "a" / "config-echo").read_text()
    assert "moon.w_f=1.0\n" in echo and "moon.r=64.0\n" in echo


@needs_mnist
def test_eval_ood_report_and_integrity(tmp_path, capsys):
    cfg = write_cfg(tmp_path, MNIST_CFG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    report = tmp_path / "ood.csv"
    assert main(["eval-ood", "--ckpt", str(out / "checkpoint"), "--config", str(cfg), "--out", str(report)]) == 0
    rows = read_csv(report)
    assert rows[0] == ["detector", "ood_set", "auroc", "fpr95", "aupr", "accuracy", "ece"]
    assert [(r[0], r[1]) for r in rows[1:5]] == [("msp", "heldout"), ("msp", "uniform"),
                                                 ("ebo", "heldout"), ("ebo", "uniform")]
    assert rows[5][0] == "id-metrics" and 0.0 <= float(rows[5][5]) <= 1.0

    other = write_cfg(tmp_path, MNIST_CFG, "other.cfg", seed=5)
    args = ["eval-ood", "--ckpt", str(out / "checkpoint"), "--config", str(other), "--out", str(report)]
    assert main(args) == 4
    assert main(args + ["--force"]) == 0
    assert "different seed/dataset/model" in capsys.readouterr().err

    empty = write_cfg(tmp_path, MNIST_CFG, "empty.cfg", **{"ood.sets": ""})
    assert main(["eval-ood", "--ckpt", str(out / "checkpoint"), "--config", str(empty), "--out", str(report)]) == 2
    assert "ood.sets" in capsys.readouterr().err


def test_null_shift_auroc_near_half_for_every_detector(tmp_path):
    cfg = write_cfg(tmp_path, GM_CFG)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    report = tmp_path / "ood.csv"
    assert main(["eval-ood", "--ckpt", str(out / "checkpoint"), "--config", str(cfg), "--out", str(report)]) == 0
    rows = [r for r in read_csv(report)[1:] if r[0] != "id-metrics"]
    assert {r[0] for r in rows} == {"msp", "odin", "ebo", "knn", "klm"}
    for r in rows:
        assert 0.45 <= float(r[2]) <= 0.55, r


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write_cfg(tmp_path, "seed = 1\nmoon.zeta = 2\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "moon.zeta" in err and "dataset.kind" in err and "train.epochs" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exit_3(tmp_path):
    cfg = write_cfg(tmp_path, GM_CFG, **{"train.lr_max": "1e300", "train.lr_min": "1e299",
                                         "sparsity.level": "0"})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 3
    assert (tmp_path / "x" / "epoch_log.csv").exists()


def test_corrupt_checkpoint_exit_4(tmp_path):
    cfg = write_cfg(tmp_path, GM_CFG)
    junk = tmp_path / "junk"
    junk.write_bytes(b"garbage")
    assert main(["eval-ood", "--ckpt", str(junk), "--config", str(cfg), "--out", str(tmp_path / "o.csv")]) == 4
    assert main(["export-features", "--ckpt", str(junk), "--data", "uniform:3:0", "--out", str(tmp_path / "f.csv")]) == 4


def test_theory_sim_schema_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path, GM_CFG, **{"dataset.gm_separation": "1"})
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["theory-sim", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["theory-sim", "--config", str(cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = read_csv(a)
    header, body = rows[0], rows[1:]
    assert {"gap_ce", "gap_moon", "density_term", "acc_ce", "acc_moon"} <= set(header)
    for seed in ("3", "4"):
        block = [r for r in body if r[0] == seed]
        assert sum(r[1] == "hard-id" for r in block) == 20
        assert sum(r[1] == "ood" for r in block) == 1


def test_theory_sim_requires_mixture(tmp_path):
    cfg = write_cfg(tmp_path, MNIST_CFG)
    assert main(["theory-sim", "--config", str(cfg), "--out", str(tmp_path / "t.csv")]) == 2


def small_ckpt(tmp_path, zero=False):
    rng = np.random.default_rng(0)
    w1 = np.zeros((4, 2)) if zero else rng.normal(size=(4, 2))
    w2 = np.zeros((3, 4)) if zero else rng.normal(size=(3, 4))
    net = SparseNetwork([Layer(w1, np.zeros(4), np.ones((4, 2), bool)),
                         Layer(w2, np.zeros(3), np.ones((3, 4), bool))], 2)
    path = tmp_path / ("zero" if zero else "ckpt")
    checkpoint.save(path, net, bytes(32))
    return path


def test_export_features_rows_and_determinism(tmp_path):
    ck = small_ckpt(tmp_path)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["export-features", "--ckpt", str(ck), "--data", "gm:5:7", "--out", str(a)]) == 0
    assert main(["export-features", "--ckpt", str(ck), "--data", "gm:5:7", "--out", str(b)]) == 0
    rows = read_csv(a)
    assert rows[0] == ["label", "f0", "f1", "f2", "f3"] and len(rows) == 11
    assert a.read_bytes() == b.read_bytes()


def test_export_features_zero_net(tmp_path):
    ck = small_ckpt(tmp_path, zero=True)
    out = tmp_path / "z.csv"
    assert main(["export-features", "--ckpt", str(ck), "--data", "uniform:4:1", "--out", str(out)]) == 0
    assert all(float(v) == 0.0 for r in read_csv(out)[1:] for v in r[1:])


@needs_mnist
def test_export_features_dimension_mismatch(tmp_path):
    ck = small_ckpt(tmp_path)
    spec = f"mnist:{MNIST_DIR}:test"
    assert main(["export-features", "--ckpt", str(ck), "--data", spec, "--out", str(tmp_path / "f.csv")]) == 2
    assert main(["export-features", "--ckpt", str(ck), "--data", "bogus:1", "--out", str(tmp_path / "f.csv")]) == 2
