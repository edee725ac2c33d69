import csv
import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from clcrn.cli import build_parser, main
from clcrn.data import Dataset, default_splits, fibonacci_sphere, points_to_degrees, save_dataset


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["generate", "--out", str(out), "--nodes", "20", "--steps", "80", "--seed", "7",
                 "--k", "4", "--alpha", "0.5"]) == 0
    meta = json.loads((out / "meta.json").read_text())
    meta["window"] = [3, 2]
    (out / "meta.json").write_text(json.dumps(meta))
    return out


@pytest.fixture(scope="module")
def trained(small_data, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(small_data), "--out", str(run), "--epochs", "2", "--seed", "2021",
                 "--hidden", "4", "--heads", "2", "--k", "3", "--batch-size", "8"]) == 0
    return run


def test_generate_writes_three_deterministic_files(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--out", str(d), "--nodes", "30", "--steps", "40", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "nodes 30" in out and "frames 40" in out and "stability_margin" in out
    for name in ("meta.json", "coords.csv", "signals.bin"):
        assert sha(a / name) == sha(b / name)
    assert json.loads((a / "config.json").read_text())["data"]["nodes"] == 30


def test_generate_rejects_too_few_nodes(tmp_path, capsys):
    assert main(["generate", "--out", str(tmp_path), "--nodes", "8"]) == 2
    assert "16" in capsys.readouterr().err


def test_generate_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": {"nodes": 24, "synthetic": {"steps": 30, "kappa": 0.1}}}))
    out = tmp_path / "o"
    assert main(["generate", "--config", str(cfg), "--out", str(out), "--steps", "20"]) == 0
    meta = json.loads((out / "meta.json").read_text())
    assert meta["n"] == 24 and meta["t"] == 20
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["data"]["synthetic"]["kappa"] == 0.1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["generate", "--config", str(bad), "--out", str(out)]) == 2


def test_train_writes_artifacts(trained):
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_mae,val_mae"
    assert len(rows) == 3
    assert (trained / "checkpoint.clcr").read_bytes()[:4] == b"CLCR"
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["model"]["seed"] == 2021


def test_train_same_seed_same_history(small_data, trained, tmp_path):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--epochs", "2", "--seed", "2021",
                 "--hidden", "4", "--heads", "2", "--k", "3", "--batch-size", "8"]) == 0
    assert (tmp_path / "loss.csv").read_text() == (trained / "loss.csv").read_text()


def test_train_distance_only_and_map(small_data, tmp_path):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--epochs", "1",
                 "--hidden", "4", "--heads", "2", "--k", "3", "--batch-size", "8",
                 "--kernel-components", "distance", "--map", "fast"]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["kernel"]["components"] == "distance" and cfg["graph"]["map_kind"] == "fast"


def test_train_config_errors(small_data, tmp_path):
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--kernel-components", "bogus"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["train", "--map", "mercator"])
    assert e.value.code == 2


def test_train_divergence_exit_code(small_data, tmp_path, monkeypatch, capsys):
    import clcrn.model as model

    real = model.loss_and_grads
    monkeypatch.setattr(model, "loss_and_grads", lambda *a, **k: (float("nan"), real(*a, **k)[1]))
    assert main(["train", "--data", str(small_data), "--out", str(tmp_path), "--epochs", "2",
                 "--hidden", "4", "--heads", "2", "--k", "3"]) == 3
    assert "epoch 1" in capsys.readouterr().err


def test_evaluate_table_and_csv(trained, small_data, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.clcr"), "--data", str(small_data),
                 "--horizons", "1,2", "--split", "train", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["horizon", "mae", "rmse_paper", "rmse_conventional", "mape", "baseline_mae"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    for r in rows[1:]:
        assert all(math.isfinite(float(v)) and float(v) >= 0 for v in r[1:])
    assert "baseline" in capsys.readouterr().out


def test_evaluate_on_constant_data_baseline_is_zero(trained, small_data, tmp_path):
    meta = json.loads((small_data / "meta.json").read_text())
    ds = Dataset(np.loadtxt(small_data / "coords.csv", delimiter=",", skiprows=1)[:, 1:],
                 np.full((meta["t"], meta["n"], 1), 2.5), tuple(meta["splits"]), (3, 2))
    save_dataset(ds, tmp_path / "const")
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.clcr"), "--data", str(tmp_path / "const"),
                 "--horizons", "1", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as f:
        row = list(csv.DictReader(f))[0]
    assert float(row["baseline_mae"]) == 0.0
    assert float(row["mae"]) >= 0.0


def test_evaluate_mismatch_exit_code(trained, tmp_path):
    pts = fibonacci_sphere(25)
    ds = Dataset(points_to_degrees(pts), np.random.default_rng(0).standard_normal((40, 25, 1)),
                 default_splits(40), (3, 2))
    save_dataset(ds, tmp_path / "other")
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.clcr"), "--data",
                 str(tmp_path / "other")]) == 2


def test_inspect_kernel(trained, tmp_path):
    ck = str(trained / "checkpoint.clcr")
    out = tmp_path / "k"
    assert main(["inspect-kernel", "--checkpoint", ck, "--line=-30,0,30,0,5", "--resolution", "5",
                 "--out", str(out)]) == 0
    files = sorted(out.glob("kernel_*.csv"))
    assert len(files) == 5
    assert (out / "kernel_-30_0.csv").exists() and (out / "kernel_15_0.csv").exists()
    with open(out / "kernel_0_0.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["phi_rel", "z_rel", "head", "weight"] and len(rows) == 1 + 25 * 2
    again = tmp_path / "k2"
    assert main(["inspect-kernel", "--checkpoint", ck, "--center", "0,0", "--resolution", "5",
                 "--out", str(again)]) == 0
    assert (again / "kernel_0_0.csv").read_bytes() == (out / "kernel_0_0.csv").read_bytes()


def test_inspect_kernel_adjacent_centers_are_close(trained, tmp_path):
    from clcrn import geometry as geo
    from clcrn.model import load_checkpoint

    ck = str(trained / "checkpoint.clcr")
    assert main(["inspect-kernel", "--checkpoint", ck, "--center", "10,20", "--center", "10.5,20",
                 "--resolution", "5", "--out", str(tmp_path)]) == 0
    a = np.loadtxt(tmp_path / "kernel_10_20.csv", delimiter=",", skiprows=1)[:, 3]
    b = np.loadtxt(tmp_path / "kernel_10.5_20.csv", delimiter=",", skiprows=1)[:, 3]
    kernel = load_checkpoint(ck).kernel
    chord = np.linalg.norm(geo.SpherePoint.from_degrees(10, 20).v - geo.SpherePoint.from_degrees(10.5, 20).v)
    # the distance factor is at most 1, so the MLP Lipschitz bound covers the dump
    assert np.max(np.abs(a - b)) <= kernel.lipschitz_bound() * chord + 1e-8


def test_inspect_kernel_rejects_pole(trained, tmp_path, capsys):
    assert main(["inspect-kernel", "--checkpoint", str(trained / "checkpoint.clcr"), "--center", "90,0",
                 "--out", str(tmp_path)]) == 2
    assert "pole" in capsys.readouterr().err


def test_graph_info(capsys, small_data):
    assert main(["graph-info", "--nodes", "50", "--k", "6"]) == 0
    out = capsys.readouterr().out
    assert "degree 7" in out and "min_distance" in out and "max_distance" in out
    assert main(["graph-info", "--data", str(small_data), "--k", "3"]) == 0
    assert "nodes 20" in capsys.readouterr().out


def test_threads_flag_and_env(monkeypatch, capsys):
    monkeypatch.setenv("CLCRN_THREADS", "2")
    assert main(["graph-info", "--nodes", "20", "--k", "3"]) == 0
    monkeypatch.setenv("CLCRN_THREADS", "many")
    assert main(["graph-info", "--nodes", "20", "--k", "3"]) == 2
    assert main(["--threads", "1", "graph-info", "--nodes", "20", "--k", "3"]) == 0


@pytest.mark.parametrize("cmd", ["generate", "train", "evaluate", "inspect-kernel", "graph-info"])
def test_help_lists_defaults(cmd):
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    text = sub.format_help()
    assert "default" in text
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "clcrn", "graph-info", "--nodes", "20", "--k", "3"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "degree 4" in r.stdout
