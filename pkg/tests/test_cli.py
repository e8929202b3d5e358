import json
import os

import numpy as np
import pytest

from sleepnet import cli, harness, tasks


@pytest.fixture
def tiny_config(tmp_path):
    cfg = {
        "name": "cli-smoke",
        "model": {"depth": 2, "dim": 12, "heads": 2, "layout": ["attn", "ssm"],
                  "vocab": 2, "window": 8, "sleep_passes": 1, "evict": "hard",
                  "loop_span": None, "ssm_rule": "gated", "mlp_factor": 2,
                  "rope_base": 10000.0, "dtype": "float32"},
        "task": {"task": "automaton", "width": 8, "states": 2, "steps": 0},
        "seed": 1,
        "batch_size": 8,
        "token_budget": 8 * 18 * 4,
        "warmup_steps": 0,
        "eval_every": 4,
        "eval_samples": 8,
        "bench_seq_len": 40,
        "bench_batch": 2,
        "bench_iters": 1,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_gen_roundtrip(tmp_path):
    out = str(tmp_path / "data.jsonl")
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({"width": 8, "states": 2, "steps": 1}))
    rc = cli.main(["gen", "--task", "automaton", "--spec", str(spec_path),
                   "--seed", "5", "--count", "7", "--out", out])
    assert rc == 0
    header, samples = tasks.read_dataset(out)
    assert header["count"] == 7
    assert len(samples) == 7


def test_gen_depo_defaults(tmp_path):
    out = str(tmp_path / "depo.jsonl")
    rc = cli.main(["gen", "--task", "depo", "--seed", "0", "--count", "3", "--out", out])
    assert rc == 0
    _, samples = tasks.read_dataset(out)
    assert samples[0].tokens.shape[0] == 360


def test_train_eval_cycle(tmp_path, tiny_config):
    out_dir = str(tmp_path / "run")
    rc = cli.main(["train", "--config", tiny_config, "--out-dir", out_dir])
    assert rc == 0
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    assert os.path.exists(ckpt)
    assert os.path.exists(os.path.join(out_dir, "metrics.jsonl"))

    metrics_out = str(tmp_path / "eval.json")
    rc = cli.main(["eval", "--ckpt", ckpt, "--out", metrics_out])
    assert rc == 0
    payload = json.loads(open(metrics_out).read())
    assert "t=0" in payload["metrics"]


def test_train_resume(tmp_path, tiny_config):
    out_dir = str(tmp_path / "run")
    rc = cli.main(["train", "--config", tiny_config, "--out-dir", out_dir])
    assert rc == 0
    rc = cli.main(["train", "--config", tiny_config, "--out-dir", out_dir,
                   "--resume", os.path.join(out_dir, "checkpoint.bin")])
    assert rc == 0  # nothing left to do, still clean exit


def test_gradcheck_command(tmp_path):
    rc = cli.main(["gradcheck", "--config", "configs/gradcheck_tiny.json"])
    assert rc == 0


def test_bench_command(tmp_path, tiny_config):
    out = str(tmp_path / "bench.csv")
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"N": [1, 2], "mode": ["hard"]}))
    rc = cli.main(["bench", "--config", tiny_config, "--grid", str(grid), "--out", out])
    assert rc == 0
    lines = open(out).read().strip().split("\n")
    assert len(lines) == 3


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{не json")
    rc = cli.main(["train", "--config", str(bad)])
    assert rc == 2


def test_missing_config_exit_code():
    assert cli.main(["train", "--config", "/nonexistent/cfg.json"]) == 2


def test_env_seed_override(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("SLEEPNET_SEED", "77")
    out_dir = str(tmp_path / "run")
    rc = cli.main(["train", "--config", tiny_config, "--out-dir", out_dir])
    assert rc == 0
    header, _ = harness.read_metrics(os.path.join(out_dir, "metrics.jsonl"))
    assert header["run"]["seed"] == 77
