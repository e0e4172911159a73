"""Tests for the paco_lab command line: exit codes, stage outputs, reruns"""

import json

import pytest

from numcore import RngStream
from paco_lab import EXIT_DATA, EXIT_OK, EXIT_USAGE, exact_checks, main
from run_store import read_csv, read_json


@pytest.fixture
def config_file(tmp_path, small_config_data, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for key in ("PACO_LAB_OUT", "PACO_LAB_WORKERS", "PACO_LAB_LOG_LEVEL"):
        monkeypatch.delenv(key, raising=False)
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(small_config_data))
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_synth_data_prints_count_identity(tmp_path, config_file, capsys):
    data = json.loads(config_file.read_text())
    data["dataset"].update(prompts=1, grids_per_prompt=2, holdout=2)
    config_file.write_text(json.dumps(data))
    assert _run("synth-data", "--config", config_file) == EXIT_OK
    out = capsys.readouterr().out
    assert "instances: 8" in out and "expected_instances: 8" in out
    assert (tmp_path / "run" / "config.json").exists()


def test_stage_rerun_requires_force(tmp_path, config_file, capsys):
    assert _run("synth-data", "--config", config_file) == EXIT_OK
    assert _run("synth-data", "--config", config_file) == EXIT_USAGE
    assert "--force" in capsys.readouterr().out
    assert _run("synth-data", "--config", config_file, "--force") == EXIT_OK


def test_rerun_is_byte_identical(tmp_path, config_file):
    assert _run("synth-data", "--config", config_file, "--out", tmp_path / "a") == EXIT_OK
    assert _run("synth-data", "--config", config_file, "--out", tmp_path / "b") == EXIT_OK
    for name in ("grids.jsonl", "instances.jsonl", "benchmark.jsonl", "pairs.jsonl"):
        assert (tmp_path / "a" / "data" / name).read_bytes() == (tmp_path / "b" / "data" / name).read_bytes()


def test_seed_flag_replaces_config_file(tmp_path, config_file):
    assert _run("synth-data", "--seed", 5, "--out", tmp_path / "seeded", "--force", "--config", config_file) == EXIT_OK
    assert read_json(tmp_path / "seeded" / "config.json")["seed"] == 5


def test_missing_seed_is_usage_error(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert _run("synth-data", "--out", tmp_path / "x") == EXIT_USAGE
    assert "seed" in capsys.readouterr().out


def test_missing_pairs_file_is_data_error(tmp_path, config_file, capsys):
    missing = tmp_path / "nowhere" / "pairs.jsonl"
    assert _run("train-reward", "--config", config_file, "--pairs", missing) == EXIT_DATA
    assert str(missing) in capsys.readouterr().out


def test_corrupted_pairs_line_is_cited(tmp_path, config_file, capsys):
    assert _run("synth-data", "--config", config_file) == EXIT_OK
    pairs = tmp_path / "run" / "data" / "pairs.jsonl"
    lines = pairs.read_text().splitlines()
    lines[6] = "{broken"
    pairs.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert _run("train-reward", "--config", config_file) == EXIT_DATA
    assert "pairs.jsonl:7:" in capsys.readouterr().out


def test_unknown_ablation_mode_exits_with_usage(config_file):
    with pytest.raises(SystemExit) as info:
        _run("ablate", "--config", config_file, "--mode", "sharpness")
    assert info.value.code == EXIT_USAGE


def test_report_on_empty_directory_fails(tmp_path, config_file):
    (tmp_path / "empty").mkdir()
    assert _run("report", tmp_path / "empty") == EXIT_DATA
    assert _run("report", tmp_path / "absent") == EXIT_DATA


def test_exact_checks_hold():
    checks = exact_checks(RngStream(0).child(9))
    assert checks["metric_max_error"] < 1e-12
    assert checks["loss_mixture_error"] < 1e-12
    assert checks["loss_uniform_error"] < 1e-12
    assert checks["cv_scale_error"] < 1e-12
    assert checks["taming_order_preserved"] == 1.0
    assert checks["taming_inactive_identical"] == 1.0
    assert checks["advantage_mean_error"] < 1e-9 and checks["advantage_std_error"] < 1e-9
    assert checks["degenerate_zero"] == 1.0


def test_full_pipeline_on_tiny_config(tmp_path, config_file, capsys):
    run = tmp_path / "run"
    for command in ("synth-data", "train-policy", "train-reward", "eval-reward", "grpo-train"):
        assert _run(command, "--config", config_file) == EXIT_OK, command
    assert _run("ablate", "--config", config_file, "--mode", "resolution", "--resolutions", "16") == EXIT_OK
    assert _run("ablate", "--config", config_file, "--mode", "resolution", "--resolutions", "16") == EXIT_USAGE

    metrics = {row["method"]: row for row in read_csv(run / "eval" / "metrics.csv")}
    assert list(metrics) == ["paco_reward", "raw_cosine", "random", "oracle"]
    assert float(metrics["oracle"]["tau"]) == pytest.approx(1.0)
    assert int(metrics["oracle"]["n_samples"]) == 8
    decisions = read_json(run / "eval" / "summary.json")["paco_reward_decisions"]
    assert decisions["pairs"] == 16 and 0.0 <= decisions["auc"] <= 1.0

    summary = read_json(run / "grpo" / "summary.json")
    assert summary["channels"] == ["consistency", "alignment"]
    assert len(read_csv(run / "grpo" / "epochs.csv")) == 1
    assert (run / "grpo" / "policy.ckpt").exists()

    ablation = read_json(run / "ablations" / "resolution.json")
    assert [r["train_resolution"] for r in ablation["runs"]] == [32, 16]
    assert ablation["runs"][1]["failed"]

    capsys.readouterr()
    assert _run("report", run) == EXIT_OK
    report = (run / "report.txt").read_text()
    for number in range(1, 12):
        assert f"[{number}]" in report
    assert "grpo/policy.ckpt" in report


def test_default_holdout_on_tiny_dataset_is_config_error(tmp_path, config_file, capsys):
    data = json.loads(config_file.read_text())
    data["dataset"] = {"prompts": 1, "grids_per_prompt": 2}
    config_file.write_text(json.dumps(data))
    assert _run("synth-data", "--config", config_file) == EXIT_USAGE
    assert "holdout 3136 must be below the instance count 8" in capsys.readouterr().out


def test_library_precondition_is_usage_error(config_file, capsys):
    data = json.loads(config_file.read_text())
    data["dataset"].update(rows=1, cols=2)
    config_file.write_text(json.dumps(data))
    assert _run("synth-data", "--config", config_file, "--force") == EXIT_USAGE
    assert "exactly 4 candidates" in capsys.readouterr().out


def test_unannotated_benchmark_is_data_error(tmp_path, config_file, capsys):
    assert _run("synth-data", "--config", config_file) == EXIT_OK
    assert _run("train-reward", "--config", config_file) == EXIT_OK
    bench = tmp_path / "run" / "data" / "benchmark.jsonl"
    lines = bench.read_text().splitlines()
    record = json.loads(lines[0])
    record["annotation"] = None
    lines[0] = json.dumps(record)
    bench.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert _run("eval-reward", "--config", config_file) == EXIT_DATA
    assert "not annotated" in capsys.readouterr().out


def test_alpha_ablation_compares_scorer_variants(tmp_path, config_file):
    run = tmp_path / "run"
    assert _run("synth-data", "--config", config_file) == EXIT_OK
    assert _run("ablate", "--config", config_file, "--mode", "alpha") == EXIT_OK

    summary = read_json(run / "ablations" / "alpha.json")
    assert [v["name"] for v in summary["variants"]] == ["alpha_0.1", "alpha_1", "fast"]
    assert summary["train_pairs"] + summary["held_out_pairs"] == 32
    for variant in summary["variants"]:
        assert 0.0 <= variant["held_out_accuracy"] <= 1.0
        assert variant["benchmark"]["pairs"] == 16
    metrics = read_csv(run / "ablations" / "alpha_metrics.csv")
    assert [row["method"] for row in metrics] == ["alpha_0.1", "alpha_1", "fast"]
    assert all(int(row["n_samples"]) == 8 for row in metrics)
    curves = read_csv(run / "ablations" / "alpha_curves.csv")
    assert list(curves[0]) == ["epoch", "series", "value", "cost_points"]
    assert len(curves) == 3 * 2
