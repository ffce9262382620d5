import csv
import json
import subprocess
import sys

import pytest
import yaml

from e2a.cli import main

TINY = [
    "--set", "dataset.counts=50",
    "--set", "model.d_h=16",
    "--set", "model.n_layers=2",
    "--set", "cvae.d_z=4",
    "--set", "cvae.hidden=16",
    "--set", "e2a.epochs=4",
    "--set", "e2a.calib_epochs=2",
    "--seeds", "0",
]  # fmt: skip


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate-data", "--shift", "size", "--seed", "7", "--out", str(root / "data"), *TINY]) == 0
    assert main(["run-e2a", "--data", str(root / "data" / "dataset.e2ag"), "--out", str(root / "e2a"), *TINY]) == 0
    return root


def test_generate_then_train(workspace, tmp_path):
    stats = json.loads((workspace / "data" / "dataset_stats.json").read_text())
    assert stats["counts"]["train"] == 150
    assert main(["train-erm", "--data", str(workspace / "data" / "dataset.e2ag"), "--out", str(tmp_path), *TINY]) == 0
    epochs = [int(r["epoch"]) for r in _rows(tmp_path / "erm" / "seed_0" / "trace.csv")]
    assert epochs == sorted(set(epochs)) == [1, 2, 3, 4]
    cfg = yaml.safe_load((tmp_path / "erm" / "config.yaml").read_text())
    assert cfg["e2a"]["epochs"] == 4 and "hash" in cfg


def test_run_e2a_outputs(workspace):
    seed_dir = workspace / "e2a" / "e2a" / "seed_0"
    lines = (seed_dir / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["phase"] for x in lines] == ["modeling", "modeling", "calibration", "calibration"]
    assert (seed_dir / "final.e2am").exists()
    assert len(list((seed_dir / "checkpoints").glob("epoch_*.e2am"))) == 4


def test_probe_radius_and_energy_kde(workspace, tmp_path):
    data = str(workspace / "data" / "dataset.e2ag")
    ckpt = workspace / "e2a" / "e2a" / "seed_0" / "final.e2am"
    assert main(["probe-radius", "--data", data, "--checkpoint", str(ckpt), "--out", str(tmp_path / "r"), *TINY]) == 0
    rows = _rows(tmp_path / "r" / "radius.csv")
    assert list(rows[0]) == ["sample_id", "split", "method", "radius", "margin", "energy"]
    run_dir = str(workspace / "e2a" / "e2a" / "seed_0")
    assert main(["probe-radius", "--data", data, "--run-dir", run_dir, "--epochs", "1,4", "--out", str(tmp_path / "t"), *TINY]) == 0
    assert [r["epoch"] for r in _rows(tmp_path / "t" / "radius_trace.csv")] == ["1", "4"]
    assert main(["energy-kde", "--data", data, "--checkpoint", str(ckpt), "--pseudo", "30", "--out", str(tmp_path / "e"), *TINY]) == 0
    means = json.loads((tmp_path / "e" / "energy_means.json").read_text())
    assert {"train", "ood_test", "pseudo_before", "pseudo_after"} <= set(means)


def test_commands_do_not_touch_inputs(workspace, tmp_path):
    data = workspace / "data" / "dataset.e2ag"
    ckpt = workspace / "e2a" / "e2a" / "seed_0" / "final.e2am"
    before = (data.read_bytes(), ckpt.read_bytes())
    main(["energy-kde", "--data", str(data), "--checkpoint", str(ckpt), "--pseudo", "30", "--out", str(tmp_path), *TINY])
    main(["probe-radius", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(tmp_path), *TINY])
    assert (data.read_bytes(), ckpt.read_bytes()) == before


def test_ablate_single_variant(workspace, tmp_path):
    data = str(workspace / "data" / "dataset.e2ag")
    assert main(["ablate", "--variant", "no_ce", "--data", data, "--out", str(tmp_path), *TINY]) == 0
    rows = _rows(tmp_path / "ablate.csv")
    assert [(r["variant"], r["seed"]) for r in rows] == [("no_ce", "0")]


def test_unknown_flag_exit_2(capsys):
    assert main(["train-erm", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_variant_exit_2():
    assert main(["ablate", "--variant", "nope"]) == 2


def test_config_error_exit_2(tmp_path, capsys):
    assert main(["train-erm", "--out", str(tmp_path), "--set", "e2a.calib_epochs=500"]) == 2
    assert main(["train-erm", "--out", str(tmp_path), "--set", "e2a.etaa=1"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_checkpoint_exit_2(tmp_path):
    assert main(["probe-radius", "--out", str(tmp_path), *TINY]) == 2
    assert main(["energy-kde", "--checkpoint", str(tmp_path / "none.e2am"), "--out", str(tmp_path), *TINY]) == 2


def test_corrupt_dataset_exit_2(tmp_path):
    (tmp_path / "bad.e2ag").write_bytes(b"E2AGRAPH\x01\x00")
    assert main(["train-erm", "--data", str(tmp_path / "bad.e2ag"), "--out", str(tmp_path), *TINY]) == 2


def test_verify_exit_0():
    proc = subprocess.run([sys.executable, "-m", "e2a", "verify"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "FAIL" not in proc.stdout


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("E2A_OUT_DIR", str(tmp_path / "env"))
    assert main(["generate-data", "--set", "dataset.counts=50"]) == 0
    assert (tmp_path / "env" / "dataset.e2ag").exists()
