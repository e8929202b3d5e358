"""Training, evaluation, benchmarking, gradient checking and persistence.

A run is fully reconstructible from its config and seed: batches are drawn
from a per-step seeded stream (seed, TRAIN_NS, step), evaluation sets from
the disjoint (seed, EVAL_NS, ...) namespace, and the step counter is part
of every checkpoint, so a resumed run consumes exactly the same data as an
uninterrupted one.  The sleep pass count has no influence on data order.

Metrics are newline-delimited JSON: one header record (schema name,
version, run summary) followed by append-only step records.  Checkpoints
are little-endian binary: magic "SLPW", version, a JSON config blob, then
named tensors; optimizer state lives under the reserved "__opt__/" prefix.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from . import layers, engine, tasks, optim

METRICS_SCHEMA = "sleepnet-metrics"
METRICS_VERSION = 1
CHECKPOINT_MAGIC = b"SLPW"
CHECKPOINT_VERSION = 1

TRAIN_NS = 1   # rng namespace tags; eval draws can never collide with training
EVAL_NS = 2
BENCH_NS = 3


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    model: layers.ModelConfig
    task: dict
    name: str = "run"
    seed: int = 0
    batch_size: int = 64
    token_budget: int = 20_000_000
    muon_lr: float = 2e-3
    adamw_lr: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 100
    clip_norm: float = 1.0
    eval_every: int = 500
    eval_samples: int = 256
    eval_hops: tuple = ()        # depo: per-k evaluation sets
    checkpoint_every: int = 0    # 0: only at the end
    freeze: str | None = None    # "ssm_only" warm-up stage
    bench_seq_len: int = 1200
    bench_batch: int = 8
    bench_iters: int = 3

    def __post_init__(self):
        if self.batch_size < 1 or self.token_budget < 1:
            raise ConfigError("batch size and token budget must be positive")
        if self.freeze not in (None, "ssm_only"):
            raise ConfigError(f"unknown freeze plan {self.freeze!r}")
        self.eval_hops = tuple(self.eval_hops)

    def task_spec(self):
        return tasks.spec_from_dict(self.task)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["eval_hops"] = list(self.eval_hops)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            d["model"] = layers.ModelConfig.from_dict(d["model"])
            cfg = cls(**d)
            cfg.task_spec()
        except (TypeError, KeyError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        env_seed = os.environ.get("SLEEPNET_SEED")
        if env_seed is not None:
            d["seed"] = int(env_seed)
        return cls.from_dict(d)

    def steps_total(self):
        seq_len = self.task_spec().total_length()
        return max(1, -(-self.token_budget // (self.batch_size * seq_len)))


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def make_batch(cfg, step):
    """Deterministic batch for a step: rng stream (seed, TRAIN_NS, step)."""
    spec = cfg.task_spec()
    rng = np.random.default_rng([cfg.seed, TRAIN_NS, step])
    samples = [tasks.gen_automaton(spec, rng) if isinstance(spec, tasks.AutomatonSpec)
               else tasks.gen_depo(spec, rng)
               for _ in range(cfg.batch_size)]
    tokens = np.stack([s.tokens for s in samples])
    mask = samples[0].mask
    return tokens, mask


def make_eval_batch(cfg, spec, count, tag):
    """Evaluation samples from the disjoint (seed, EVAL_NS, tag, i) space."""
    samples = [tasks.gen_automaton(spec, np.random.default_rng([cfg.seed, EVAL_NS, tag, i]))
               if isinstance(spec, tasks.AutomatonSpec)
               else tasks.gen_depo(spec, np.random.default_rng([cfg.seed, EVAL_NS, tag, i]))
               for i in range(count)]
    tokens = np.stack([s.tokens for s in samples])
    return tokens, samples[0].mask, samples


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    def __init__(self, path, run_summary, append=False):
        self.path = str(path)
        mode = "a" if append and os.path.exists(self.path) else "w"
        self.f = open(self.path, mode)
        if mode == "w":
            header = {"schema": METRICS_SCHEMA, "version": METRICS_VERSION, "run": run_summary}
            self.f.write(json.dumps(header) + "\n")
            self.f.flush()

    def write(self, record):
        record = {"version": METRICS_VERSION, **record}
        self.f.write(json.dumps(record) + "\n")
        self.f.flush()

    def close(self):
        self.f.close()


def read_metrics(path):
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    header, records = lines[0], lines[1:]
    if header.get("schema") != METRICS_SCHEMA or header.get("version") != METRICS_VERSION:
        raise ValueError(f"unsupported metrics schema in {path}")
    return header, records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def _write_array(f, name, arr):
    name_b = name.encode()
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}q", *arr.shape) if arr.ndim else b"")
    f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    f.write(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(path, model, opt, cfg, step, tokens_seen):
    blob = json.dumps({"config": cfg.to_dict(), "step": step,
                       "tokens_seen": tokens_seen}).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, p in model.named_parameters().items():
            _write_array(f, name, p.data)
        if opt is not None:
            for name, arr in opt.state_arrays().items():
                _write_array(f, "__opt__/" + name, arr)


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {version} unsupported")
        (blob_len,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(blob_len).decode())
        arrays = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            (name_len,) = struct.unpack("<I", raw)
            name = f.read(name_len).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}q", f.read(8 * rank)) if rank else ()
            (tag,) = struct.unpack("<B", f.read(1))
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    params = {k: v for k, v in arrays.items() if not k.startswith("__opt__/")}
    opt_state = {k[len("__opt__/"):]: v for k, v in arrays.items() if k.startswith("__opt__/")}
    return meta, params, opt_state


def restore_model(meta, params):
    cfg = RunConfig.from_dict(meta["config"])
    model = layers.init_model(cfg.model, seed=cfg.seed)
    named = model.named_parameters()
    if set(named) != set(params):
        raise ConfigError("checkpoint parameters do not match the model config")
    for name, p in named.items():
        if p.shape != params[name].shape:
            raise ConfigError(f"shape mismatch for {name}")
        p.data = params[name].astype(p.dtype, copy=True)
    return cfg, model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _decode_captures(captures):
    """Greedy argmax at masked positions: (predictions, targets, nll) arrays."""
    preds, targets, nlls = [], [], []
    for chunk, logits in captures:
        pos = np.flatnonzero(chunk.mask)
        lg = logits[:, pos, :]
        m = lg.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(lg - m).sum(axis=-1)) + m[..., 0]
        tgt = chunk.tokens[:, pos]
        picked = np.take_along_axis(lg, tgt[..., None], axis=-1)[..., 0]
        preds.append(lg.argmax(axis=-1))
        targets.append(tgt)
        nlls.append(lse - picked)
    return (np.concatenate(preds, axis=1), np.concatenate(targets, axis=1),
            np.concatenate(nlls, axis=1))


def _eval_batches(model, tokens, mask, batch_size=64):
    all_preds, all_tgts, all_nll = [], [], []
    for lo in range(0, tokens.shape[0], batch_size):
        capture = []
        engine.run_sequence(model, tokens[lo:lo + batch_size], mask, capture=capture)
        p, t, n = _decode_captures(capture)
        all_preds.append(p)
        all_tgts.append(t)
        all_nll.append(n)
    return (np.concatenate(all_preds), np.concatenate(all_tgts), np.concatenate(all_nll))


def evaluate(model, cfg, count=None):
    """Held-out metrics keyed by difficulty (t, or one entry per eval hop).

    Never touches parameters, optimizer state or any tape: forward passes
    run untaped.  Automaton reports both per-label and per-sequence exact
    accuracy; the retrieval task reports per-k loss and accuracy plus the
    pooled loss over all per-k sets.
    """
    count = count or cfg.eval_samples
    spec = cfg.task_spec()
    results = {}
    if isinstance(spec, tasks.AutomatonSpec):
        tokens, mask, _ = make_eval_batch(cfg, spec, count, tag=0)
        preds, tgts, nll = _eval_batches(model, tokens, mask)
        results[f"t={spec.steps}"] = {
            "per_label_acc": float((preds == tgts).mean()),
            "per_seq_acc": float((preds == tgts).all(axis=1).mean()),
            "loss": float(nll.mean()),
            "n": int(tgts.size),
        }
        return results
    hops = cfg.eval_hops or (spec.hops[1],)
    pooled_nll, pooled_n = 0.0, 0
    for i, k in enumerate(hops):
        kspec = replace(spec, fixed_hops=int(k))
        tokens, mask, _ = make_eval_batch(cfg, kspec, count, tag=int(k))
        preds, tgts, nll = _eval_batches(model, tokens, mask)
        results[f"k={k}"] = {
            "acc": float((preds == tgts).mean()),
            "loss": float(nll.mean()),
            "n": int(tgts.size),
        }
        pooled_nll += float(nll.sum())
        pooled_n += int(nll.size)
    results["pooled"] = {"loss": pooled_nll / pooled_n, "n": pooled_n}
    return results


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def clip_gradients(params, max_norm):
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def _frozen(name, plan):
    if plan == "ssm_only":
        return ".ssm." not in name
    return False


def train(cfg, out_dir, resume=None, log=None, max_steps=None):
    """Run the training loop to the token budget; returns the checkpoint path.

    Freeze plans drop gradients by name before the optimizer step, so
    frozen parameters stay bitwise identical.  A non-finite loss aborts
    with the last saved checkpoint left in place.
    """
    os.makedirs(out_dir, exist_ok=True)
    model = layers.init_model(cfg.model, seed=cfg.seed)
    groups = optim.build_param_groups(
        model, muon_lr=cfg.muon_lr, adamw_lr=cfg.adamw_lr, weight_decay=cfg.weight_decay)
    opt = optim.Optimizer(groups)
    start_step, tokens_seen = 0, 0
    if resume is not None:
        meta, params, opt_state = load_checkpoint(resume)
        _, model = restore_model(meta, params)
        groups = optim.build_param_groups(
            model, muon_lr=cfg.muon_lr, adamw_lr=cfg.adamw_lr, weight_decay=cfg.weight_decay)
        opt = optim.Optimizer(groups)
        opt.load_state_arrays(opt_state)
        start_step = meta["step"]
        tokens_seen = meta["tokens_seen"]

    writer = MetricsWriter(os.path.join(out_dir, "metrics.jsonl"),
                           run_summary=cfg.to_dict(), append=resume is not None)
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    params = model.named_parameters()
    trainable = {n: p for n, p in params.items() if not _frozen(n, cfg.freeze)}

    seq_len = cfg.task_spec().total_length()
    steps_total = cfg.steps_total()
    if max_steps is not None:
        steps_total = min(steps_total, start_step + max_steps)
    base_lrs = [g.lr for g in groups]
    t_start = time.perf_counter()
    tokens_at_start = tokens_seen
    last_loss = None

    try:
        for step in range(start_step + 1, steps_total + 1):
            tokens_batch, mask = make_batch(cfg, step)
            tape = T.Tape()
            with tape:
                loss = engine.run_sequence(model, tokens_batch, mask)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise optim.NumericalError(f"non-finite loss at step {step}")
                tape.backward(loss)
            tape.reset()
            warm = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else 1.0
            for g, base in zip(groups, base_lrs):
                g.lr = base * warm
            if cfg.freeze:
                for name, p in params.items():
                    if name not in trainable:
                        p.grad = None
            clip_gradients(list(trainable.values()), cfg.clip_norm)
            opt.step()
            opt.zero_grad()
            tokens_seen += tokens_batch.size
            last_loss = loss_val

            if step % cfg.eval_every == 0 or step == steps_total:
                dt = time.perf_counter() - t_start
                tps = (tokens_seen - tokens_at_start) / dt if dt > 0 else 0.0
                record = {
                    "step": step,
                    "tokens_seen": tokens_seen,
                    "train_loss": loss_val,
                    "eval": evaluate(model, cfg),
                    "wall_clock_s": round(dt, 3),
                    "tokens_per_sec": round(tps, 1),
                }
                writer.write(record)
                if log:
                    log(f"step {step}/{steps_total} loss {loss_val:.4f} tok/s {tps:.0f}")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(ckpt_path, model, opt, cfg, step, tokens_seen)
        save_checkpoint(ckpt_path, model, opt, cfg, steps_total, tokens_seen)
    finally:
        writer.close()
    return ckpt_path, model, opt, last_loss


# ---------------------------------------------------------------------------
# throughput bench
# ---------------------------------------------------------------------------


def _bench_stream(cfg, model_cfg, rng):
    length = cfg.bench_seq_len
    tokens = rng.integers(0, model_cfg.vocab, size=(cfg.bench_batch, length))
    mask = np.zeros(length, dtype=np.int64)
    mask[-min(16, model_cfg.window):] = 1
    return tokens, mask


def bench(cfg, grid):
    """Training-step throughput over a (N, L, mode) grid; returns csv rows.

    One untimed warmup iteration per cell; tokens/sec counts real stream
    tokens.  Each cell also cross-checks the block-pass counter against the
    analytic formula.
    """
    rows = []
    for n in grid.get("N", [cfg.model.sleep_passes]):
        for window in grid.get("L", [cfg.model.window]):
            for mode in grid.get("mode", [cfg.model.evict]):
                model_cfg = replace(cfg.model, sleep_passes=int(n), window=int(window), evict=mode)
                model = layers.init_model(model_cfg, seed=cfg.seed)
                groups = optim.build_param_groups(model, muon_lr=cfg.muon_lr, adamw_lr=cfg.adamw_lr)
                opt = optim.Optimizer(groups)
                rng = np.random.default_rng([cfg.seed, BENCH_NS, int(n), int(window)])
                tokens, mask = _bench_stream(cfg, model_cfg, rng)
                stats = engine.EngineStats()
                elapsed = 0.0
                for it in range(cfg.bench_iters + 1):
                    t0 = time.perf_counter()
                    tape = T.Tape()
                    with tape:
                        loss = engine.run_sequence(model, tokens, mask,
                                                   stats=stats if it == 0 else None)
                        tape.backward(loss)
                    tape.reset()
                    opt.step()
                    opt.zero_grad()
                    if it > 0:
                        elapsed += time.perf_counter() - t0
                lo, hi = model_cfg.span
                expected = stats.expected_block_passes(hi - lo, model_cfg.depth)
                tps = cfg.bench_iters * tokens.size / elapsed
                rows.append({
                    "n_passes": int(n),
                    "window": int(window),
                    "mode": mode,
                    "tokens_per_sec": round(tps, 2),
                    "block_passes": stats.block_passes,
                    "block_passes_expected": expected,
                })
    return rows


def write_bench_csv(path, rows):
    cols = ["n_passes", "window", "mode", "tokens_per_sec", "block_passes",
            "block_passes_expected"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join(str(r[c]) for c in cols) + "\n")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

GRADCHECK_SCENARIOS = ("single_chunk_n1", "three_chunks_n3_hard", "sliding_n2")


def _gradcheck_case(scenario, base_cfg, seed):
    m = base_cfg.model
    if m.dim > 16 or m.depth > 4:
        raise ConfigError("gradcheck needs a tiny model (dim <= 16, depth <= 4)")
    common = dict(depth=m.depth, dim=m.dim, heads=m.heads, layout=m.layout,
                  vocab=m.vocab, mlp_factor=m.mlp_factor, ssm_rule=m.ssm_rule,
                  dtype="float64")
    rng = np.random.default_rng([seed, 17, GRADCHECK_SCENARIOS.index(scenario)])
    if scenario == "single_chunk_n1":
        cfg = layers.ModelConfig(window=8, sleep_passes=1, evict="hard", **common)
        tokens = rng.integers(0, m.vocab, size=8)
        mask = np.ones(8, dtype=np.int64)
    elif scenario == "three_chunks_n3_hard":
        cfg = layers.ModelConfig(window=8, sleep_passes=3, evict="hard", **common)
        tokens = rng.integers(0, m.vocab, size=20)
        mask = np.zeros(20, dtype=np.int64)
        mask[16:] = 1
    else:
        cfg = layers.ModelConfig(window=8, sleep_passes=2, evict="sliding", **common)
        tokens = rng.integers(0, m.vocab, size=20)
        mask = np.zeros(20, dtype=np.int64)
        mask[16:] = 1
    return cfg, tokens, mask


def gradcheck(base_cfg, samples_per_case=200, h=1e-5, tol=1e-4, log=None):
    """Full-pipeline analytic gradients vs central differences (float64).

    Samples parameter entries uniformly across all tensors; every scenario
    must stay within ``tol`` max relative error (denominator floored at
    1e-6).  Returns a report dict; ``ok`` is the overall verdict.
    """
    report = {"scenarios": {}, "ok": True, "tolerance": tol}
    for scenario in GRADCHECK_SCENARIOS:
        cfg, tokens, mask = _gradcheck_case(scenario, base_cfg, base_cfg.seed)
        model = layers.init_model(cfg, seed=base_cfg.seed + 1)
        params = model.named_parameters()
        tape = T.Tape()
        with tape:
            loss = engine.run_sequence(model, tokens, mask)
            tape.backward(loss)
        tape.reset()
        grads = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

        names = sorted(params)
        sizes = np.array([params[n].size for n in names])
        rng = np.random.default_rng([base_cfg.seed, 23, GRADCHECK_SCENARIOS.index(scenario)])
        flat_idx = rng.choice(int(sizes.sum()), size=min(samples_per_case, int(sizes.sum())),
                              replace=False)
        offsets = np.cumsum(sizes)
        worst = (0.0, None)
        failures = []
        for fi in sorted(flat_idx):
            which = int(np.searchsorted(offsets, fi, side="right"))
            local = int(fi - (offsets[which - 1] if which else 0))
            name = names[which]
            arr = params[name].data
            flat = arr.reshape(-1)
            orig = flat[local]
            flat[local] = orig + h
            lp = engine.run_sequence(model, tokens, mask).item()
            flat[local] = orig - h
            lm = engine.run_sequence(model, tokens, mask).item()
            flat[local] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[name].reshape(-1)[local]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            if rel > worst[0]:
                worst = (rel, f"{name}[{local}]")
            if rel > tol:
                failures.append({"param": f"{name}[{local}]", "analytic": an,
                                 "finite_diff": fd, "rel_err": rel})
        entry = {
            "checked": len(flat_idx),
            "max_rel_err": worst[0],
            "worst_param": worst[1],
            "failures": failures,
            "ok": not failures,
        }
        report["scenarios"][scenario] = entry
        report["ok"] &= entry["ok"]
        if log:
            log(f"gradcheck {scenario}: max rel err {worst[0]:.3e} "
                f"over {len(flat_idx)} params -> {'ok' if entry['ok'] else 'FAIL'}")
    return report
