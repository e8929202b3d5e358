"""Command line surface: gen, train, eval, gradcheck, bench.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  The
SLEEPNET_SEED environment variable overrides the config seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, tasks, optim


def _load_json(path, what):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise harness.ConfigError(f"cannot read {what} {path}: {e}") from e


def cmd_gen(args):
    if args.spec:
        spec_dict = _load_json(args.spec, "task spec")
        spec_dict.setdefault("task", args.task)
        if spec_dict["task"] != args.task:
            raise harness.ConfigError(f"--task {args.task} conflicts with spec file")
    else:
        spec_dict = {"task": args.task}
    spec = tasks.spec_from_dict(spec_dict)
    seed = int(os.environ.get("SLEEPNET_SEED", args.seed))
    tasks.write_dataset(args.out, spec, range(seed, seed + args.count))
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_train(args):
    cfg = harness.RunConfig.from_file(args.config)
    out_dir = args.out_dir or os.path.join("runs", cfg.name)
    ckpt, _, _, last_loss = harness.train(cfg, out_dir, resume=args.resume, log=print)
    tail = f" (final train loss {last_loss:.4f})" if last_loss is not None else ""
    print(f"finished: checkpoint {ckpt}{tail}")
    return 0


def cmd_eval(args):
    meta, params, _ = harness.load_checkpoint(args.ckpt)
    cfg, model = harness.restore_model(meta, params)
    if args.task_spec:
        spec_dict = _load_json(args.task_spec, "task spec")
        cfg.task = spec_dict
        cfg.task_spec()
    results = harness.evaluate(model, cfg)
    payload = {"checkpoint": args.ckpt, "step": meta["step"], "metrics": results}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2)
    print(json.dumps(payload, indent=2))
    return 0


def cmd_gradcheck(args):
    cfg = harness.RunConfig.from_file(args.config)
    report = harness.gradcheck(cfg, log=print)
    if not report["ok"]:
        print("gradcheck FAILED")
        for name, entry in report["scenarios"].items():
            for failure in entry["failures"]:
                print(f"  {name}: {failure}")
        return 3
    print(f"gradcheck ok (tolerance {report['tolerance']})")
    return 0


def cmd_bench(args):
    cfg = harness.RunConfig.from_file(args.config)
    grid = _load_json(args.grid, "bench grid") if args.grid else {}
    rows = harness.bench(cfg, grid)
    harness.write_bench_csv(args.out, rows)
    for r in rows:
        print(f"N={r['n_passes']} L={r['window']} {r['mode']}: "
              f"{r['tokens_per_sec']} tok/s ({r['block_passes']} block passes)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sleepnet",
                                description="offline consolidation for hybrid sequence models")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="materialize a dataset file")
    g.add_argument("--task", choices=["automaton", "depo"], required=True)
    g.add_argument("--spec", help="JSON task spec file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--out-dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task-spec", help="override task spec JSON")
    e.add_argument("--out", help="write metrics JSON here")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    c.add_argument("--config", required=True)
    c.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bench", help="throughput over an (N, L) grid")
    b.add_argument("--config", required=True)
    b.add_argument("--grid", help="JSON grid file, e.g. {\"N\": [1, 2, 4]}")
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except optim.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
