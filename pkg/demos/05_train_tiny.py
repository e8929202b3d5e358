#!/usr/bin/env python3
"""Train a small hybrid on the easy end of the automaton task (t=2).

Runs a couple hundred steps (a minute or two on a laptop core), prints the
learning curve, and saves a plot when matplotlib is around.  The full
trend experiments live in configs/ + scripts/run_trends.py.
"""

import json

from sleepnet import harness

d = {
    "name": "demo-tiny",
    "model": {"depth": 4, "dim": 64, "heads": 4,
              "layout": ["attn", "ssm", "attn", "ssm"],
              "vocab": 2, "window": 12, "sleep_passes": 2, "evict": "hard",
              "loop_span": None, "ssm_rule": "gated", "mlp_factor": 4,
              "rope_base": 10000.0, "dtype": "float32"},
    "task": {"task": "automaton", "width": 12, "states": 4, "steps": 2},
    "seed": 0,
    "batch_size": 64,
    "token_budget": 64 * 52 * 250,
    "muon_lr": 2e-3,
    "adamw_lr": 5e-5,
    "warmup_steps": 50,
    "eval_every": 50,
    "eval_samples": 256,
}
cfg = harness.RunConfig.from_dict(d)
print(f"training {cfg.steps_total()} steps on t=2 (N=2 sleep passes)...")
harness.train(cfg, "runs/demo-tiny", log=print)

_, records = harness.read_metrics("runs/demo-tiny/metrics.jsonl")
print("\nstep  train-loss  eval-acc  eval-loss")
for r in records:
    e = r["eval"]["t=2"]
    print(f"{r['step']:4d}  {r['train_loss']:.4f}      {e['per_label_acc']:.3f}     {e['loss']:.4f}")

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(steps, [r["train_loss"] for r in records], label="train")
    ax1.plot(steps, [r["eval"]["t=2"]["loss"] for r in records], label="eval")
    ax1.set_xlabel("step"); ax1.set_ylabel("loss"); ax1.legend()
    ax2.plot(steps, [r["eval"]["t=2"]["per_label_acc"] for r in records])
    ax2.set_xlabel("step"); ax2.set_ylabel("per-label accuracy")
    fig.tight_layout()
    fig.savefig("runs/demo-tiny/curves.png", dpi=120)
    print("\nwrote runs/demo-tiny/curves.png")
except ImportError:
    print("\n(matplotlib not installed; skipped the plot)")
