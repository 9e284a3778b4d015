"""End-to-end command line tests on a miniature configuration."""

import json
import subprocess
import sys

import numpy as np
import pytest

from surflow.cli import main

TINY = {
    "preset": "desk_small",
    "case": 1,
    "overrides": {
        "n_lf": 30,
        "n_hf": 16,
        "n_lf_val": 4,
        "n_hf_test": 4,
        "series_len": 16,
        "model": {"latent_dim": 3, "hidden": [8, 8], "n_pre": 2, "n_post": 1},
        "train_lf": {"epochs": 3, "batch_size": 8, "lr": 1e-3, "seed": 0,
                     "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "train_hf": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "seed": 0,
                     "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "train_hf_only": {"epochs": 2, "batch_size": 4, "lr": 1e-3, "seed": 0,
                          "shuffle": True, "grad_clip": None, "early_stop_patience": None},
        "scenarios": [
            {"label": "lf-only", "kind": "lf_only", "n_hf": 0},
            {"label": "mf-4", "kind": "mf", "n_hf": 4},
            {"label": "hf-only-4", "kind": "hf_only", "n_hf": 4},
        ],
        "eval": {"n_samples": 40, "alpha": 0.95},
        "seed": 5,
    },
}


@pytest.fixture
def workdir(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    return cfg_path, out


def _run(cfg_path, out, *extra):
    return main([*extra, "--config", str(cfg_path), "--out", str(out)])


def test_generate_writes_data_and_reruns_identically(workdir, tmp_path):
    cfg_path, out = workdir
    assert _run(cfg_path, out, "generate") == 0
    lf_csv = out / "data" / "lf.csv"
    assert lf_csv.exists() and (out / "data" / "hf.manifest.json").exists()
    first = lf_csv.read_bytes()
    out2 = tmp_path / "run2"
    assert _run(cfg_path, out2, "generate") == 0
    assert (out2 / "data" / "lf.csv").read_bytes() == first


def test_train_stages_and_artifacts(workdir):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    assert _run(cfg_path, out, "train", "--stage", "lf") == 0
    ck = out / "checkpoints"
    assert (ck / "lf.arch.json").exists() and (ck / "lf.params.bin").exists()
    assert (ck / "standardizer.json").exists()
    assert (out / "reports" / "lf_report.csv").exists()
    meta = json.loads((ck / "lf.meta.json").read_text())
    assert meta["stage"] == "lf" and meta["epochs_run"] == 3
    assert meta["scale"] >= 1.0
    assert _run(cfg_path, out, "train", "--stage", "mf") == 0
    assert (ck / "mf.params.bin").exists()
    assert json.loads((ck / "mf.meta.json").read_text())["scale"] >= 1.0
    assert _run(cfg_path, out, "train", "--stage", "hf-only") == 0
    assert (ck / "hf-only.standardizer.json").exists()


def test_train_mf_requires_lf_checkpoint(workdir, capsys):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    assert _run(cfg_path, out, "train", "--stage", "mf") == 2
    assert "surflow train --stage lf" in capsys.readouterr().err


def test_train_requires_data(workdir, capsys):
    cfg_path, out = workdir
    assert _run(cfg_path, out, "train", "--stage", "lf") == 2
    assert "generate" in capsys.readouterr().err


def test_predict_writes_summary(workdir, capsys):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    _run(cfg_path, out, "train", "--stage", "mf")
    rc = _run(cfg_path, out, "predict", "--theta", "0.1,-0.2,0.05")
    assert rc == 0
    lines = (out / "predictions" / "summary.csv").read_text().strip().splitlines()
    assert lines[0] == "time,mean,std,ci_lo,ci_hi"
    assert len(lines) == 17
    first = lines[1].split(",")
    assert float(first[0]) == pytest.approx(1 / 20.0)
    assert float(first[3]) <= float(first[1]) <= float(first[4])
    stats = json.loads((out / "predictions" / "stats.json").read_text())
    assert stats["stage"] == "mf" and stats["n_samples"] == 40
    assert stats["scale"] >= 1.0
    assert "coarse quantiles" in capsys.readouterr().err  # 40 < 100 draws


def test_predict_theta_validation(workdir, capsys):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    assert _run(cfg_path, out, "predict", "--stage", "lf", "--theta", "0.1,0.2") == 2
    assert _run(cfg_path, out, "predict", "--stage", "lf") == 2
    assert (
        _run(cfg_path, out, "predict", "--stage", "lf", "--theta", "1,2,3", "--theta-file", "x") == 2
    )
    capsys.readouterr()


def test_predict_theta_file(workdir, tmp_path):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    theta_file = tmp_path / "theta.txt"
    theta_file.write_text("0.1 -0.1 0.0\n")
    assert _run(cfg_path, out, "predict", "--stage", "lf", "--theta-file", str(theta_file)) == 0


def test_predict_is_deterministic(workdir):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    _run(cfg_path, out, "predict", "--stage", "lf", "--theta", "0.1,-0.2,0.05")
    first = (out / "predictions" / "summary.csv").read_bytes()
    _run(cfg_path, out, "predict", "--stage", "lf", "--theta", "0.1,-0.2,0.05")
    assert (out / "predictions" / "summary.csv").read_bytes() == first


def test_ablate_writes_records_and_summary(workdir):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    assert _run(cfg_path, out, "ablate", "--seeds", "7, 8") == 0
    lines = (out / "ablation" / "records.csv").read_text().strip().splitlines()
    assert lines[0] == "scenario,kind,n_hf,seed,record,rel_l2,r2"
    assert len(lines) == 1 + 2 * 3 * 4  # seeds x scenarios x test records
    summary = json.loads((out / "ablation" / "summary.json").read_text())
    assert set(summary) == {"lf-only", "mf-4", "hf-only-4"}
    assert {e["seed"] for e in summary["mf-4"]} == {7, 8}
    for entry in summary["mf-4"]:
        assert 0.0 <= entry["coverage"] <= 1.0
        assert entry["scale"] >= 1.0


def test_evaluate_writes_plot_data(workdir):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    assert _run(cfg_path, out, "evaluate", "--stage", "lf") == 0
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert {"median_rel_l2", "median_r2", "coverage"} <= set(metrics)
    lines = (out / "eval" / "record_00.csv").read_text().strip().splitlines()
    assert lines[0] == "time,truth,mean,ci_lo,ci_hi"
    assert len(lines) == 17
    assert (out / "eval" / "record_03.csv").exists()


def test_evaluate_requires_checkpoint(workdir, capsys):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    assert _run(cfg_path, out, "evaluate", "--stage", "mf") == 2
    capsys.readouterr()


def test_seed_override_changes_outputs(workdir, tmp_path):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    out2 = tmp_path / "other"
    assert main(["generate", "--config", str(cfg_path), "--out", str(out2), "--seed", "99"]) == 0
    a = (out / "data" / "lf.csv").read_bytes()
    b = (out2 / "data" / "lf.csv").read_bytes()
    assert a != b


def test_checkpoint_config_mismatch_detected(workdir, capsys):
    cfg_path, out = workdir
    _run(cfg_path, out, "generate")
    _run(cfg_path, out, "train", "--stage", "lf")
    # same out dir, different master seed: stale checkpoint must be refused
    rc = main(["train", "--config", str(cfg_path), "--out", str(out), "--seed", "42", "--stage", "mf"])
    assert rc == 2
    assert "different" in capsys.readouterr().err


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{\"preset\": \"desk_small\", \"overrides\": {\"frobnicate\": 1}}")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "frobnicate" in capsys.readouterr().err


def test_console_entry_point(workdir):
    cfg_path, out = workdir
    proc = subprocess.run(
        [sys.executable, "-m", "surflow.cli", "generate", "--config", str(cfg_path), "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (out / "data" / "hf.csv").exists()
