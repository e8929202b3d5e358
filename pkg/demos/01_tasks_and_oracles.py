#!/usr/bin/env python3
"""Walk through both synthetic tasks and check them against their oracles.

The automaton task: four random binary states, and the answer for each is
its first bit after t transitions of rule 110 (periodic boundary).  The
retrieval task: a shuffled directed cycle, then "k hops after u" queries.
Both generators are pure functions of (spec, seed).
"""

import numpy as np

from sleepnet import tasks

rng = np.random.default_rng(7)

# --- rule 110, drawn as a little space-time diagram -----------------------
state = "000000000100000000"
print("rule 110 from a single seed cell:")
for step in range(12):
    print("  " + state.replace("0", ".").replace("1", "#"))
    state = tasks.rule110_step(state)

# --- automaton samples ----------------------------------------------------
spec = tasks.AutomatonSpec(width=12, states=4, steps=8)
sample = tasks.gen_automaton(spec, rng)
states = sample.tokens[:48].reshape(4, 12)
labels = sample.tokens[48:]
print(f"\nautomaton sample (w={spec.width}, t={spec.steps}):")
for i, row in enumerate(states):
    bits = "".join(str(b) for b in row)
    rolled = bits
    for _ in range(spec.steps):
        rolled = tasks.rule110_step(rolled)
    print(f"  state{i} {bits} -> first bit after {spec.steps} steps: {rolled[0]}"
          f" (label token: {labels[i]})")
print(f"  mask marks positions {np.flatnonzero(sample.mask).tolist()}")

# --- retrieval samples ------------------------------------------------------
dspec = tasks.DepoSpec(max_nodes=10, min_nodes=6, cycle_budget=40, queries=3,
                       query_budget=18, hops=(1, 4))
dsample = tasks.gen_depo(dspec, rng)
edges, queries = tasks.parse_depo_sample(dsample.tokens, dspec.cycle_budget)
print(f"\ncycle retrieval sample ({len(edges)} nodes):")
print("  successor map:", dict(sorted(edges.items())))
for k, start, answer, pos in queries:
    check = tasks.khop_oracle(edges, start, k)
    print(f"  {k} hop(s) after node {start} -> {answer} (oracle: {check})")
    assert answer == check

print("\nall answers match brute-force traversal")
