import json
import subprocess
import sys

import pytest
import yaml

from seqpo.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, inspect_log, main

SMALL = """
policy: {vocab_size: 8, context_window: 8, hidden_dim: 6}
task: {kind: mod_sum, query_length: [3, 4]}
train: {group_size: 4, queries_per_batch: 4, minibatches_per_batch: 2, steps: 2, learning_rate: 0.01}
"""


def without_wall_time(text):
    return [{k: v for k, v in json.loads(l).items() if k != "wall_time"} for l in text.splitlines()]


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for name in list(os.environ):
        if name.startswith("SEQPO__"):
            monkeypatch.delenv(name)


def test_train_writes_outputs(config, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--config", str(config), "--out", str(out), "--override", "train.algorithm=grpo",
                 "--seed", "3"])
    assert code == EXIT_OK
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["train"]["algorithm"] == "grpo" and saved["train"]["seed"] == 3
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 4
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "ok" and summary["updates"] == 4
    assert "trained 2 steps" in capsys.readouterr().out


def test_refuses_non_empty_output(config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_OK
    before = (out / "metrics.jsonl").read_text()
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert (out / "metrics.jsonl").read_text() == before
    assert main(["train", "--config", str(config), "--out", str(out), "--force"]) == EXIT_OK
    assert without_wall_time((out / "metrics.jsonl").read_text()) == without_wall_time(before)


def test_schema_error_exit_code(config, tmp_path, capsys):
    code = main(["train", "--config", str(config), "--out", str(tmp_path / "r"), "--override", "train.group_size=1"])
    assert code == EXIT_CONFIG
    assert "group_size" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_missing_config_is_io_error(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == EXIT_IO


def test_divergence_exit_code(config, tmp_path, monkeypatch):
    import numpy as np

    from seqpo import trainer

    real = trainer._minibatch_gradient

    def broken(*args):
        g = real(*args)
        g[:] = np.nan
        return g

    monkeypatch.setattr(trainer, "_minibatch_gradient", broken)
    out = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == EXIT_DIVERGED
    assert json.loads((out / "summary.json").read_text())["status"] == "diverged"
    assert (out / "checkpoint.npz").exists()


def test_study_command(config, tmp_path, capsys):
    out = tmp_path / "study"
    code = main(["study", "--config", str(config), "--out", str(out), "--override", "study.study=efficiency"])
    assert code == EXIT_OK
    assert (out / "report.json").exists()
    assert "gspo_reward_ge_grpo" in capsys.readouterr().out
    assert main(["study", "--config", str(config), "--out", str(tmp_path / "s2")]) == EXIT_CONFIG


def test_inspect_zero_lr_log(config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out), "--override", "train.learning_rate=0"])
    res = inspect_log(out / "rollouts.jsonl", out / "metrics.jsonl")
    assert res.ratios and all(r == 1.0 for r in res.ratios)
    assert res.totals["clipped_tokens"] == 0 and res.totals["clipped_sequences"] == 0
    assert main(["inspect", str(out / "rollouts.jsonl")]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "clipped tokens 0/" in printed and "agree" in printed


def test_inspect_reports_corrupt_line(config, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(config), "--out", str(out), "--override", "train.algorithm=grpo"])
    log = out / "rollouts.jsonl"
    lines = log.read_text().splitlines()
    n = len(lines)
    lines[5] = lines[5][: len(lines[5]) // 2]
    log.write_text("\n".join(lines) + "\n")
    res = inspect_log(log)
    assert [e[0] for e in res.parse_errors] == [6]
    assert res.responses == n - 2
    assert main(["inspect", str(log)]) == EXIT_OK
    assert "parse error at line 6" in capsys.readouterr().out


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "seqpo", "train", "--config", str(config), "--out", str(tmp_path / "r"),
         "--override", "train.group_size=1"],
        capture_output=True, text=True,
    )
    assert proc.returncode == EXIT_CONFIG
    assert "group_size" in proc.stderr
