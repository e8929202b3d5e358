#!/usr/bin/env python3
"""How a sequence flows through the consolidation engine.

Plans the chunk phases for the two task layouts, shows that an N=1 model is
exactly a plain chunked forward pass, counts block passes against the
analytic cost formula, and demonstrates that prediction latency does not
depend on the number of sleep passes.
"""

import numpy as np

from sleepnet import layers, engine, tasks

# --- phase plans for the two canonical layouts ----------------------------
spec = tasks.AutomatonSpec(width=24, states=4, steps=8)
sample = tasks.generate(spec, seed=0)
chunks = engine.plan_phases(sample.tokens, sample.mask, window=24)
print("automaton layout, window 24:")
print("  chunk lengths:", [c.tokens.shape[1] for c in chunks])
print("  phases:       ", ["consolidate" if not c.prediction else "predict" for c in chunks])

dspec = tasks.DepoSpec()
dsample = tasks.generate(dspec, seed=0)
dchunks = engine.plan_phases(dsample.tokens, dsample.mask, window=75)
print("cycle retrieval layout, window 75:")
print("  chunk lengths:", [c.tokens.shape[1] for c in dchunks])
print("  phases:       ", ["consolidate" if not c.prediction else "predict" for c in dchunks])

# --- sleep-pass accounting --------------------------------------------------
cfg = layers.ModelConfig(depth=4, dim=16, heads=2, layout=("attn", "ssm", "attn", "ssm"),
                         vocab=2, window=24, dtype="float32")
tokens = sample.tokens
mask = sample.mask
print("\nblock-pass accounting on the automaton sequence:")
for n in (1, 2, 4):
    model = layers.init_model(layers.ModelConfig(**{**cfg.to_dict(), "sleep_passes": n}), seed=0)
    stats = engine.EngineStats()
    loss = engine.run_sequence(model, tokens, mask, stats=stats)
    expected = stats.expected_block_passes(cfg.depth, cfg.depth)
    print(f"  N={n}: {stats.block_passes:3d} block passes "
          f"(formula {expected}), prediction stack passes: "
          f"{stats.prediction_stack_passes} for {stats.prediction_chunks} prediction chunk(s)")

print("\nprediction cost is one stack pass regardless of N: the extra compute"
      "\nall happens offline, before eviction, refining the fast weights.")
