import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from sleepnet import harness, layers, tasks, optim, engine
from sleepnet import tensor as T


def smoke_cfg(tmp_path=None, **kw):
    d = {
        "name": "smoke",
        "model": {"depth": 2, "dim": 16, "heads": 2, "layout": ["attn", "ssm"],
                  "vocab": 2, "window": 8, "sleep_passes": 1, "evict": "hard",
                  "loop_span": None, "ssm_rule": "gated", "mlp_factor": 2,
                  "rope_base": 10000.0, "dtype": "float32"},
        "task": {"task": "automaton", "width": 8, "states": 2, "steps": 0},
        "seed": 3,
        "batch_size": 16,
        "token_budget": 16 * 18 * 12,   # 12 steps
        "muon_lr": 2e-3,
        "adamw_lr": 5e-5,
        "warmup_steps": 0,
        "eval_every": 6,
        "eval_samples": 32,
    }
    d.update(kw)
    return harness.RunConfig.from_dict(d)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_config_roundtrip(tmp_path):
    cfg = smoke_cfg()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = harness.RunConfig.from_file(path)
    assert again.to_dict() == cfg.to_dict()


def test_config_env_seed_override(tmp_path, monkeypatch):
    cfg = smoke_cfg()
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    monkeypatch.setenv("SLEEPNET_SEED", "99")
    assert harness.RunConfig.from_file(path).seed == 99


def test_config_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{\"model\": {\"depth\": 3, \"layout\": [\"attn\"]}}")
    with pytest.raises(harness.ConfigError):
        harness.RunConfig.from_file(path)


def test_invalid_freeze_plan_rejected():
    with pytest.raises(harness.ConfigError):
        smoke_cfg(freeze="everything")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_smoke_loss_decreases_on_retrieval():
    # t=0 is pure first-bit retrieval and learns essentially immediately:
    # ten optimizer steps on one batch must drive the loss down step by step
    cfg = smoke_cfg(batch_size=64, muon_lr=2e-3, adamw_lr=5e-4)
    model = layers.init_model(cfg.model, seed=cfg.seed)
    groups = optim.build_param_groups(model, muon_lr=cfg.muon_lr, adamw_lr=cfg.adamw_lr)
    opt = optim.Optimizer(groups)
    tokens, mask = harness.make_batch(cfg, 1)
    losses = []
    for _ in range(11):
        tape = T.Tape()
        with tape:
            loss = engine.run_sequence(model, tokens, mask)
            losses.append(loss.item())
            tape.backward(loss)
        harness.clip_gradients(list(model.named_parameters().values()), cfg.clip_norm)
        opt.step()
        opt.zero_grad()
    drops = sum(b < a for a, b in zip(losses, losses[1:]))
    assert drops >= 8, losses


def test_metrics_file_schema(tmp_path):
    cfg = smoke_cfg()
    harness.train(cfg, str(tmp_path / "run"))
    header, records = harness.read_metrics(tmp_path / "run" / "metrics.jsonl")
    assert header["schema"] == harness.METRICS_SCHEMA
    assert header["run"]["name"] == "smoke"
    assert records, "no metric records written"
    steps = [r["step"] for r in records]
    assert steps == sorted(steps)
    toks = [r["tokens_seen"] for r in records]
    assert toks == sorted(toks)
    for r in records:
        assert {"version", "step", "tokens_seen", "train_loss", "eval",
                "wall_clock_s", "tokens_per_sec"} <= set(r)


def test_tokens_seen_accounting(tmp_path):
    cfg = smoke_cfg()
    harness.train(cfg, str(tmp_path / "run"))
    _, records = harness.read_metrics(tmp_path / "run" / "metrics.jsonl")
    seq_len = cfg.task_spec().total_length()
    assert records[-1]["tokens_seen"] == cfg.steps_total() * cfg.batch_size * seq_len


def test_determinism_identical_configs_identical_metrics(tmp_path):
    cfg = smoke_cfg()
    harness.train(cfg, str(tmp_path / "a"))
    harness.train(cfg, str(tmp_path / "b"))

    def stripped(path):
        _, records = harness.read_metrics(path)
        return [{k: v for k, v in r.items() if k not in ("wall_clock_s", "tokens_per_sec")}
                for r in records]

    assert stripped(tmp_path / "a" / "metrics.jsonl") == stripped(tmp_path / "b" / "metrics.jsonl")


def test_data_order_independent_of_sleep_passes():
    cfg1 = smoke_cfg()
    cfg4 = smoke_cfg(model={**cfg1.model.to_dict(), "sleep_passes": 4})
    for step in (1, 5, 9):
        t1, m1 = harness.make_batch(cfg1, step)
        t4, m4 = harness.make_batch(cfg4, step)
        npt.assert_array_equal(t1, t4)
        npt.assert_array_equal(m1, m4)


def test_resume_is_bitwise(tmp_path):
    cfg = smoke_cfg(checkpoint_every=6, eval_every=6)
    harness.train(cfg, str(tmp_path / "full"))
    # interrupted run: stop at step 6, then resume to completion
    harness.train(cfg, str(tmp_path / "part"), max_steps=6)
    ckpt = os.path.join(tmp_path, "part", "checkpoint.bin")
    harness.train(cfg, str(tmp_path / "part"), resume=ckpt)

    full_meta, full_params, full_opt = harness.load_checkpoint(
        os.path.join(tmp_path, "full", "checkpoint.bin"))
    part_meta, part_params, part_opt = harness.load_checkpoint(
        os.path.join(tmp_path, "part", "checkpoint.bin"))
    assert full_meta["step"] == part_meta["step"]
    assert full_meta["tokens_seen"] == part_meta["tokens_seen"]
    for name in full_params:
        assert full_params[name].tobytes() == part_params[name].tobytes(), name
    for name in full_opt:
        assert full_opt[name].tobytes() == part_opt[name].tobytes(), name


def test_freeze_plan_ssm_only(tmp_path):
    cfg = smoke_cfg(freeze="ssm_only")
    model_before = layers.init_model(cfg.model, seed=cfg.seed)
    before = {k: p.data.copy() for k, p in model_before.named_parameters().items()}
    _, model, _, _ = harness.train(cfg, str(tmp_path / "run"), max_steps=2)
    after = model.named_parameters()
    changed, frozen = [], []
    for name, arr in before.items():
        same = arr.tobytes() == after[name].data.tobytes()
        (frozen if same else changed).append(name)
    assert all(".ssm." in n for n in changed)
    assert any(".ssm." in n for n in changed)
    for name in frozen:
        assert ".ssm." not in name or after[name].grad is None


def test_nan_loss_aborts_with_numerical_error(tmp_path, monkeypatch):
    cfg = smoke_cfg()
    real = engine.run_sequence

    def poisoned(model, tokens, mask, **kw):
        loss = real(model, tokens, mask, **kw)
        loss.data = np.asarray(np.nan, dtype=loss.data.dtype)
        return loss

    monkeypatch.setattr(harness.engine, "run_sequence", poisoned)
    with pytest.raises(optim.NumericalError):
        harness.train(cfg, str(tmp_path / "run"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_magic_and_roundtrip(tmp_path):
    cfg = smoke_cfg()
    model = layers.init_model(cfg.model, seed=cfg.seed)
    groups = optim.build_param_groups(model)
    opt = optim.Optimizer(groups)
    path = tmp_path / "ck.bin"
    harness.save_checkpoint(path, model, opt, cfg, step=7, tokens_seen=1234)
    raw = path.read_bytes()
    assert raw[:4] == b"SLPW"
    meta, params, opt_state = harness.load_checkpoint(path)
    assert meta["step"] == 7 and meta["tokens_seen"] == 1234
    cfg2, model2 = harness.restore_model(meta, params)
    for name, p in model.named_parameters().items():
        npt.assert_array_equal(p.data, model2.named_parameters()[name].data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(harness.ConfigError, match="magic"):
        harness.load_checkpoint(path)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_eval_untrained_automaton_near_chance():
    cfg = smoke_cfg(eval_samples=128)
    model = layers.init_model(cfg.model, seed=11)
    res = harness.evaluate(model, cfg)
    acc = res["t=0"]["per_label_acc"]
    assert 0.3 <= acc <= 0.7


def test_eval_oracle_stuffed_logits_reach_perfect_accuracy():
    # plumbing check: force the output projection to copy the input token
    # embedding; with steps=0 unavailable we instead stuff logits via a
    # synthetic model whose prediction is read from fast weights is overkill,
    # so monkey-build: vocab=2, make out_proj huge on the first feature and
    # embed so that carry-in token maps to the right answer is fragile;
    # instead run the decode path on hand-made captures.
    chunk = engine.PhaseChunk(tokens=np.array([[1, 0, 1]]), mask=np.array([0, 1, 1]),
                              start=4, carry_in=np.array([0]), prediction=True)
    logits = np.zeros((1, 3, 2), dtype=np.float32)
    logits[0, 1, 0] = 5.0   # predicts token 0 at position 1
    logits[0, 2, 1] = 5.0   # predicts token 1 at position 2
    preds, tgts, nll = harness._decode_captures([(chunk, logits)])
    assert (preds == tgts).all()
    assert preds.shape == (1, 2)


def test_eval_does_not_mutate_params_or_opt_state():
    cfg = smoke_cfg()
    model = layers.init_model(cfg.model, seed=12)
    opt = optim.Optimizer(optim.build_param_groups(model))
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    opt_before = {k: v.copy() for k, v in opt.state_arrays().items()}
    harness.evaluate(model, cfg, count=16)
    for k, p in model.named_parameters().items():
        npt.assert_array_equal(p.data, before[k])
        assert p.grad is None
    for k, v in opt.state_arrays().items():
        npt.assert_array_equal(v, opt_before[k])


def test_eval_depo_per_k_breakdown_sums_to_pooled():
    cfg = harness.RunConfig.from_dict({
        "name": "depo-eval",
        "model": {"depth": 2, "dim": 16, "heads": 2, "layout": ["attn", "ssm"],
                  "vocab": 43, "window": 20, "sleep_passes": 1, "evict": "hard",
                  "loop_span": None, "ssm_rule": "gated", "mlp_factor": 2,
                  "rope_base": 10000.0, "dtype": "float32"},
        "task": {"task": "depo", "max_nodes": 20, "min_nodes": 5, "cycle_budget": 80,
                 "queries": 10, "query_budget": 60, "hops": [1, 8], "fixed_hops": None},
        "seed": 5, "batch_size": 4, "token_budget": 1000,
        "eval_samples": 24, "eval_hops": [1, 2, 4]})
    model = layers.init_model(cfg.model, seed=13)
    res = harness.evaluate(model, cfg)
    assert set(res) == {"k=1", "k=2", "k=4", "pooled"}
    weighted = sum(res[f"k={k}"]["loss"] * res[f"k={k}"]["n"] for k in (1, 2, 4))
    total_n = sum(res[f"k={k}"]["n"] for k in (1, 2, 4))
    npt.assert_allclose(weighted / total_n, res["pooled"]["loss"], rtol=1e-6)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def test_bench_counters_and_monotone_throughput(tmp_path):
    cfg = smoke_cfg(bench_seq_len=64, bench_batch=4, bench_iters=2)
    rows = harness.bench(cfg, {"N": [1, 2], "mode": ["hard"]})
    assert len(rows) == 2
    for r in rows:
        assert r["block_passes"] == r["block_passes_expected"]
    by_n = {r["n_passes"]: r["tokens_per_sec"] for r in rows}
    assert by_n[2] < by_n[1]
    path = tmp_path / "bench.csv"
    harness.write_bench_csv(path, rows)
    lines = path.read_text().strip().split("\n")
    assert lines[0].startswith("n_passes,window,mode,")
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_passes_on_tiny_config():
    cfg = harness.RunConfig.from_file("configs/gradcheck_tiny.json")
    report = harness.gradcheck(cfg, samples_per_case=40)
    assert report["ok"], report
    assert set(report["scenarios"]) == set(harness.GRADCHECK_SCENARIOS)
    for entry in report["scenarios"].values():
        assert entry["max_rel_err"] <= 1e-4


def test_gradcheck_rejects_large_models():
    cfg = smoke_cfg(model={**smoke_cfg().model.to_dict(), "dim": 64})
    with pytest.raises(harness.ConfigError, match="tiny"):
        harness.gradcheck(cfg, samples_per_case=2)
