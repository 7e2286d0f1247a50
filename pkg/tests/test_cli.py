"""End-to-end command-line tests driving ``gpat`` through cli.main."""

import json

import numpy as np
import pytest

from gpat import cli
from gpat.data import load_dataset
from gpat.nn import AttackerModel, ClassifierModel
from gpat.tensor import ParamSet


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    """Pipeline outputs built once through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    ds = str(root / "dataset.gpat")
    assert cli.main(["gen-data", "--classes", "3", "--n", "240",
                     "--seed", "1", "--out", ds]) == 0
    assert cli.main(["train-targets", "--data", ds, "--ids", "0,1",
                     "--out", str(root)]) == 0
    assert cli.main(["gen-pairs", "--data", ds, "--models", str(root),
                     "--ids", "0,1", "--count", "24",
                     "--out", str(root / "tasks.gpat")]) == 0
    assert cli.main(["meta-train", "--tasks", str(root / "tasks.gpat"),
                     "--outer-iters", "3", "--k-samples", "8",
                     "--out", str(root / "attacker.gpat")]) == 0
    return root


# ---------------------------------------------------------------------------
# pipeline stage outputs
# ---------------------------------------------------------------------------

def test_gen_data_output_loads(artifacts):
    ds = load_dataset(artifacts / "dataset.gpat")
    assert ds.classes == 3
    assert len(ds.train_images) + len(ds.test_images) == 240


def test_train_targets_outputs_load(artifacts):
    for mid in (0, 1):
        model = ClassifierModel.load(artifacts / f"classifier{mid}.gpat")
        assert model.classes == 3
        assert model.model_id == mid


def test_meta_train_output_loads(artifacts):
    atk = AttackerModel.load(artifacts / "attacker.gpat")
    out = atk.predict(np.zeros((1, 16, 16)))
    assert out.shape == (1, 16, 16)


def test_attack_fd_writes_all_outputs(artifacts, tmp_path):
    summary = tmp_path / "summary.json"
    ledger = tmp_path / "ledger.jsonl"
    trace = tmp_path / "trace.jsonl"
    image = tmp_path / "adv.gpat"
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--index", "0", "--q", "8", "--budget", "400",
        "--max-iters", "200",
        "--out", str(summary), "--ledger", str(ledger),
        "--trace", str(trace), "--image-out", str(image)])
    assert code == 0
    report = json.loads(summary.read_text())
    assert set(report) == {"success", "queries", "l2", "iterations"}
    assert report["queries"] <= 400
    events = [json.loads(l) for l in ledger.read_text().splitlines()]
    assert events[-1]["cum_total"] == report["queries"]
    assert all(set(e) == {"iter", "phase", "cum_total"} for e in events)
    assert len(trace.read_text().splitlines()) == report["iterations"] + 1
    assert ParamSet.load(image)["x_adv"].data.shape == (1, 16, 16)


def test_attack_meta_runs(artifacts, tmp_path):
    summary = tmp_path / "meta.json"
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--attacker", str(artifacts / "attacker.gpat"),
        "--method", "meta", "--index", "1", "--budget", "300",
        "--out", str(summary)])
    assert code == 0
    assert "queries" in json.loads(summary.read_text())


def test_attack_targeted_next_rule(artifacts, tmp_path):
    summary = tmp_path / "t.json"
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--index", "0", "--budget", "200", "--q", "8",
        "--mode", "targeted", "--target-class", "next",
        "--out", str(summary)])
    assert code == 0


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_no_subcommand_exits_1():
    assert cli.main([]) == 1


def test_unknown_flag_exits_1():
    assert cli.main(["gen-data", "--frobnicate"]) == 1


def test_targeted_without_target_class_exits_1(artifacts):
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--mode", "targeted"])
    assert code == 1


def test_missing_model_file_exits_2(artifacts):
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "nope.gpat"), "--method", "fd"])
    assert code == 2


def test_corrupt_dataset_exits_1(artifacts, tmp_path):
    bad = tmp_path / "dataset.gpat"
    bad.write_bytes(b"JUNKJUNKJUNK")
    (tmp_path / "dataset.gpat.json").write_text('{"classes": 3}')
    code = cli.main([
        "attack", "--data", str(bad),
        "--model", str(artifacts / "classifier0.gpat"), "--method", "fd"])
    assert code == 1


def test_curve_rejects_unsorted_budgets(artifacts):
    code = cli.main(["curve", "--budgets", "300,100",
                     "--methods", "fd_baseline", "--images", "2"])
    assert code == 1


def test_suite_rejects_unknown_method():
    assert cli.main(["suite", "--methods", "warp_drive", "--images", "2"]) == 1


def test_sweep_rejects_empty_grid():
    assert cli.main(["sweep", "--q-values", "", "--beta-values", "0.5",
                     "--methods", "fd_baseline"]) == 1


# ---------------------------------------------------------------------------
# config files and environment fallback
# ---------------------------------------------------------------------------

def test_config_file_overrides_flags(artifacts, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"budget": 33, "q": 8}))
    summary = tmp_path / "s.json"
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--budget", "999",
        "--config", str(cfg), "--out", str(summary)])
    assert code == 0
    assert json.loads(summary.read_text())["queries"] <= 33


def test_config_file_unknown_key_exits_1(artifacts, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"warp": 9}))
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--config", str(cfg)])
    assert code == 1


def test_config_file_invalid_json_exits_1(artifacts, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    code = cli.main([
        "attack", "--data", str(artifacts / "dataset.gpat"),
        "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--config", str(cfg)])
    assert code == 1


def test_data_dir_fallback_used(artifacts, tmp_path, monkeypatch):
    monkeypatch.setenv("GPAT_DATA_DIR", str(artifacts))
    summary = tmp_path / "s.json"
    code = cli.main([
        "attack", "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd", "--q", "8", "--budget", "100",
        "--out", str(summary)])
    assert code == 0
    assert summary.exists()


def test_missing_data_without_fallback_exits_1(artifacts, monkeypatch):
    monkeypatch.delenv("GPAT_DATA_DIR", raising=False)
    code = cli.main([
        "attack", "--model", str(artifacts / "classifier0.gpat"),
        "--method", "fd"])
    assert code == 1
