"""Non-mixing building blocks and model assembly.

Blocks are pre-norm residual: ``h + mixer(rmsnorm(h))`` followed by
``+ mlp(rmsnorm(.))``.  The MLP is gated (``down(silu(gate(x)) * up(x))``)
with no biases anywhere; embedding and output projection are untied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from . import mixers
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Architecture plus the consolidation schedule it runs under.

    ``layout`` tags each block "attn" or "ssm"; ``loop_span`` is the
    half-open block range looped during sleep (None = loop the full stack).
    """

    depth: int = 4
    dim: int = 64
    heads: int = 4
    layout: tuple = ("attn", "ssm", "attn", "ssm")
    vocab: int = 2
    window: int = 12
    sleep_passes: int = 1
    evict: str = "hard"
    loop_span: tuple | None = None
    ssm_rule: str = "gated"
    mlp_factor: int = 4
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        self.layout = tuple(self.layout)
        if len(self.layout) != self.depth:
            raise ValueError(f"layout length {len(self.layout)} != depth {self.depth}")
        if any(k not in ("attn", "ssm") for k in self.layout):
            raise ValueError(f"unknown block kind in layout {self.layout}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.loop_span is not None:
            self.loop_span = tuple(self.loop_span)
            lo, hi = self.loop_span
            if not (0 <= lo < hi <= self.depth):
                raise ValueError(f"loop span {self.loop_span} outside [0, {self.depth})")
        if self.evict not in ("hard", "sliding"):
            raise ValueError(f"eviction mode must be hard|sliding, got {self.evict!r}")
        if self.sleep_passes < 1:
            raise ValueError("sleep_passes must be >= 1")
        if self.ssm_rule not in ("gated", "delta"):
            raise ValueError(f"ssm rule must be gated|delta, got {self.ssm_rule!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def span(self):
        return self.loop_span if self.loop_span is not None else (0, self.depth)

    def to_dict(self):
        d = asdict(self)
        d["layout"] = list(self.layout)
        d["loop_span"] = list(self.loop_span) if self.loop_span is not None else None
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttnParams:
    w_qkv: Tensor
    w_o: Tensor


@dataclass
class SsmParams:
    w_qkv: Tensor
    w_o: Tensor
    w_alpha: Tensor
    b_alpha: Tensor
    w_beta: Tensor
    b_beta: Tensor


@dataclass
class MlpParams:
    w_upgate: Tensor
    w_down: Tensor


@dataclass
class BlockParams:
    kind: str
    norm1: Tensor
    norm2: Tensor
    mixer: object
    mlp: MlpParams


@dataclass
class Model:
    cfg: ModelConfig
    embed: Tensor
    blocks: list
    final_norm: Tensor
    out_proj: Tensor

    def named_parameters(self):
        """Stable name -> tensor map covering every trainable parameter."""
        params = {"embed": self.embed, "final_norm": self.final_norm, "out_proj": self.out_proj}
        for i, blk in enumerate(self.blocks):
            params[f"block{i}.norm1"] = blk.norm1
            params[f"block{i}.norm2"] = blk.norm2
            params[f"block{i}.mlp.w_upgate"] = blk.mlp.w_upgate
            params[f"block{i}.mlp.w_down"] = blk.mlp.w_down
            mx = blk.mixer
            if blk.kind == "attn":
                params[f"block{i}.attn.w_qkv"] = mx.w_qkv
                params[f"block{i}.attn.w_o"] = mx.w_o
            else:
                params[f"block{i}.ssm.w_qkv"] = mx.w_qkv
                params[f"block{i}.ssm.w_o"] = mx.w_o
                params[f"block{i}.ssm.w_alpha"] = mx.w_alpha
                params[f"block{i}.ssm.b_alpha"] = mx.b_alpha
                params[f"block{i}.ssm.w_beta"] = mx.w_beta
                params[f"block{i}.ssm.b_beta"] = mx.b_beta
        return params

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None


PROJ_STD = 0.02
ALPHA_BIAS_INIT = 6.0   # sigmoid(6) ~ 0.9975: nearly lossless retention at init,
                        # so N sleep passes (N*T decay applications per chunk)
                        # do not erase earlier chunks before learning starts
BETA_BIAS_INIT = -1.0   # sigmoid(-1) ~ 0.27: gentle writes at init


def init_model(cfg, seed=0):
    """Fresh parameters: normal(0, 0.02) projections, unit norm scales."""
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype

    def proj(rows, cols):
        return Tensor(rng.normal(0.0, PROJ_STD, size=(rows, cols)).astype(dt), requires_grad=True)

    d = cfg.dim
    blocks = []
    for kind in cfg.layout:
        if kind == "attn":
            mixer = AttnParams(w_qkv=proj(d, 3 * d), w_o=proj(d, d))
        else:
            mixer = SsmParams(
                w_qkv=proj(d, 3 * d),
                w_o=proj(d, d),
                w_alpha=proj(d, cfg.heads),
                b_alpha=Tensor(np.full(cfg.heads, ALPHA_BIAS_INIT, dtype=dt), requires_grad=True),
                w_beta=proj(d, cfg.heads),
                b_beta=Tensor(np.full(cfg.heads, BETA_BIAS_INIT, dtype=dt), requires_grad=True),
            )
        blocks.append(BlockParams(
            kind=kind,
            norm1=Tensor(np.ones(d, dtype=dt), requires_grad=True),
            norm2=Tensor(np.ones(d, dtype=dt), requires_grad=True),
            mixer=mixer,
            mlp=MlpParams(w_upgate=proj(d, 2 * cfg.mlp_factor * d), w_down=proj(cfg.mlp_factor * d, d)),
        ))
    return Model(
        cfg=cfg,
        embed=proj(cfg.vocab, d),
        blocks=blocks,
        final_norm=Tensor(np.ones(d, dtype=dt), requires_grad=True),
        out_proj=proj(d, cfg.vocab),
    )


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def embed(table, ids):
    """Row lookup; backward scatters gradient into the looked-up rows only."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")
    out = Tensor(table.data[ids])

    def bwd(gouts):
        g = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(g, ids, gouts[0])
        return (g,)

    T.record("embed", (table,), (out,), bwd)
    return out


RMSNORM_EPS = 1e-6


def rmsnorm(x, scale, eps=RMSNORM_EPS):
    """x / rms(x, last axis) * scale, with eps inside the root."""
    n = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    r = 1.0 / np.sqrt(ms)
    xhat = x.data * r
    y = Tensor(xhat * scale.data)

    def bwd(gouts):
        g = gouts[0]
        gscale = (g * xhat).reshape(-1, n).sum(axis=0)
        du = g * scale.data
        gx = r * du - x.data * (r ** 3 / n) * (du * x.data).sum(axis=-1, keepdims=True)
        return gx, gscale

    T.record("rmsnorm", (x, scale), (y,), bwd)
    return y


def mlp(p, x):
    """Gated MLP: down(silu(gate(x)) * up(x)); zero maps to zero (no biases)."""
    hidden = p.w_upgate.shape[1] // 2
    ug = T.matmul(x, p.w_upgate)
    gate = T.slice_axis(ug, 2, 0, hidden)
    up = T.slice_axis(ug, 2, hidden, 2 * hidden)
    return T.matmul(T.mul(T.silu(gate), up), p.w_down)


def block_forward(block, h, state, positions, cfg):
    """Pre-norm residual block; returns (h', updated mixer state).

    Never mutates the input activations: every op allocates fresh output.
    """
    if block.kind == "attn":
        mixed, state = mixers.attention_forward(block.mixer, rmsnorm(h, block.norm1), state, positions, cfg)
    else:
        mixed, state = mixers.ssm_forward(block.mixer, rmsnorm(h, block.norm1), state, cfg)
    h = T.add(h, mixed)
    h = T.add(h, mlp(block.mlp, rmsnorm(h, block.norm2)))
    return h, state


def run_blocks(model, h, states, positions, block_range=None):
    """Run blocks [lo, hi) threading per-block mixer state; states list is copied."""
    lo, hi = block_range if block_range is not None else (0, model.cfg.depth)
    states = list(states)
    for i in range(lo, hi):
        h, states[i] = block_forward(model.blocks[i], h, states[i], positions, model.cfg)
    return h, states


def output_logits(model, h):
    return T.matmul(rmsnorm(h, model.final_norm), model.out_proj)
