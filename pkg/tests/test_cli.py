import json
import subprocess
import sys

import pytest

from clutterhrl.harness.cli import main

TINY = {
    "train": {
        "demo_count": 3,
        "bc_validation_demos": 2,
        "bc_epochs": 3,
        "hrl_epochs": 2,
        "episodes_per_epoch": 1,
        "validation_episodes": 2,
        "buffer_capacity": 100,
    },
    "scorer": {"patch": 3, "hidden": 6},
    "task": {"width": 8, "height": 8, "n_additional": 2, "max_steps": 6},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _pipeline(config, out):
    common = ["--config", str(config), "--out", str(out), "--seed", "3"]
    assert main(["gen-demos", *common]) == 0
    assert main(["train-bc", *common]) == 0
    assert main(["train-hrl", *common]) == 0
    assert main(["eval", *common, "--episodes", "3", "--trace"]) == 0
    assert main(["sweep", *common, "--episodes", "2", "--counts", "0,3"]) == 0
    assert main(["render", *common, "--log", str(out / "logs" / "trace-hclm.jsonl"), "--episode", "1"]) == 0


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_is_byte_identical(config, tmp_path, capsys):
    _pipeline(config, tmp_path / "a")
    first = capsys.readouterr().out
    _pipeline(config, tmp_path / "b")
    second = capsys.readouterr().out
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b
    assert first.replace(str(tmp_path / "a"), "") == second.replace(str(tmp_path / "b"), "")
    for name in ("checkpoints/pickplace.ckpt", "checkpoints/dual-hclm.ckpt", "logs/bc.jsonl", "logs/hrl-hclm.jsonl", "reports/eval-hclm.jsonl"):
        assert name in a
    assert any(name.startswith("frames/trace-hclm-ep1/") for name in a)


def test_eval_prints_report(tmp_path, capsys):
    code = main(["eval", "--policy", "oracle", "--task", "block-insertion", "--n-additional", "0", "--episodes", "5", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "success_rate=100.0%" in out and "avg_episode_length=1.00" in out
    lines = (tmp_path / "reports" / "eval-oracle.jsonl").read_text().splitlines()
    assert len(lines) == 6


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["eval", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["eval", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"nope": 1}}')
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["sweep", "--counts", "a,b", "--policy", "random", "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_failures_exit_two(config, tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 2
    assert "checkpoint not found" in capsys.readouterr().err
    corrupt = tmp_path / "trace.jsonl"
    corrupt.write_text("{not json\n")
    assert main(["render", "--log", str(corrupt), "--out", str(tmp_path)]) == 2
    assert "line 1" in capsys.readouterr().err


def test_checkpoint_config_mismatch(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train-bc", "--config", str(config), "--out", str(out)]) == 0
    assert main(["train-hrl", "--config", str(config), "--out", str(out)]) == 0
    capsys.readouterr()
    # The default config uses a wider scorer than the one the checkpoint was built with.
    assert main(["eval", "--out", str(out), "--episodes", "1"]) == 2
    assert "mismatch" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "clutterhrl", "eval", "--policy", "random", "--episodes", "2", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.startswith("task=stack-block-pyramid policy=random")


def test_ablate_trains_and_reports(config, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--variant", "no-tsus", "--config", str(config), "--out", str(out), "--episodes", "2"]) == 0
    assert "policy=no-tsus" in capsys.readouterr().out
    report = (out / "reports" / "ablate-no-tsus.jsonl").read_text().splitlines()
    assert json.loads(report[0])["episodes"] == 2
    assert (out / "checkpoints" / "dual-no-tsus.ckpt").is_file()
    assert (out / "checkpoints" / "pickplace.ckpt").is_file()
