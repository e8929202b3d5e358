#!/usr/bin/env python3
"""Run the scaled trend-reproduction grid: both tasks, N in {1, 4}, 3 seeds.

Each run trains to its full token budget and leaves metrics + checkpoint
under results/<task>-n<N>-s<seed>/.  Completed runs (marker file present)
are skipped, so the script is resumable.  Runs are ordered so every seed
finishes an (N=1, N=4) pair for the automaton before the retrieval task
starts.
"""

import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sleepnet import harness

ROOT = os.path.join(os.path.dirname(__file__), "..")
RESULTS = os.path.join(ROOT, "results")


def run_one(base_cfg_path, n_passes, seed):
    with open(base_cfg_path) as f:
        d = json.load(f)
    d["model"]["sleep_passes"] = n_passes
    d["seed"] = seed
    d["name"] = f"{d['name']}-n{n_passes}-s{seed}"
    out_dir = os.path.join(RESULTS, d["name"])
    marker = os.path.join(out_dir, "DONE")
    if os.path.exists(marker):
        print(f"[skip] {d['name']} already complete", flush=True)
        return
    cfg = harness.RunConfig.from_dict(d)
    resume = os.path.join(out_dir, "checkpoint.bin")
    resume = resume if os.path.exists(resume) else None
    t0 = time.time()
    print(f"[run ] {d['name']}: {cfg.steps_total()} steps"
          + (" (resuming)" if resume else ""), flush=True)
    harness.train(cfg, out_dir, resume=resume,
                  log=lambda msg: print(f"  {d['name']} {msg}", flush=True))
    with open(marker, "w") as f:
        f.write(f"{time.time() - t0:.1f}s\n")
    print(f"[done] {d['name']} in {(time.time() - t0) / 3600:.2f} h", flush=True)


def main():
    os.makedirs(RESULTS, exist_ok=True)
    jobs = []
    for seed in (0, 1, 2):
        for n in (1, 4):
            jobs.append((os.path.join(ROOT, "configs", "automaton_small.json"), n, seed))
    for seed in (0, 1, 2):
        for n in (1, 4):
            jobs.append((os.path.join(ROOT, "configs", "depo_small.json"), n, seed))
    for cfg_path, n, seed in jobs:
        run_one(cfg_path, n, seed)
    print("[all done]", flush=True)


if __name__ == "__main__":
    main()
