#!/usr/bin/env python3
"""Measure training throughput as the sleep-pass count grows.

Offline recurrence makes consolidation N times deeper, so tokens/sec falls
roughly like 1/N at full-stack looping, while eviction policy barely
matters next to block compute.
"""

from sleepnet import harness

cfg = harness.RunConfig.from_file("configs/automaton_small.json")
cfg.bench_seq_len = 600
cfg.bench_batch = 8
cfg.bench_iters = 2

rows = harness.bench(cfg, {"N": [1, 2, 4], "mode": ["hard", "sliding"]})
harness.write_bench_csv("runs/bench_demo.csv", rows)

print(f"{'N':>3} {'window':>7} {'mode':>8} {'tokens/sec':>11} {'block passes':>13}")
for r in rows:
    print(f"{r['n_passes']:>3} {r['window']:>7} {r['mode']:>8} "
          f"{r['tokens_per_sec']:>11.0f} {r['block_passes']:>13}")

base = next(r for r in rows if r["n_passes"] == 1 and r["mode"] == "hard")
quad = next(r for r in rows if r["n_passes"] == 4 and r["mode"] == "hard")
print(f"\nthroughput(N=4) / throughput(N=1) = "
      f"{quad['tokens_per_sec'] / base['tokens_per_sec']:.2f} "
      f"(compute per token grew {quad['block_passes'] / base['block_passes']:.1f}x)")
print("wrote runs/bench_demo.csv")
