"""Offline consolidation engine: chunk, sleep, evict, predict.

A token stream is split into chunks of at most ``window`` tokens.  Chunks
whose loss mask is all zero are consolidation chunks: the model embeds them
once and loops the configured block span N times, threading the fast
weights through every pass while the attention cache stays pass-local (each
pass replaces the KV rows the previous pass wrote).  The refined chunk
features are then discarded and the cache is evicted.  Chunks containing
masked positions are prediction chunks: exactly one pass through the full
stack, teacher-forced, with masked cross entropy on the masked targets.

Prediction is next-token style: a chunk's input row i is the token
preceding target i, so each chunk consumes a one-token carry-in from the
stream (token id only, never hidden state), and the model can never see an
answer token at its own prediction position.

Everything stays on one tape, so gradients reach every sleep pass of every
chunk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import layers, mixers


@dataclass
class SleepConfig:
    """Consolidation schedule: window, pass count, eviction, loop span."""

    window: int
    passes: int = 1
    evict: str = "hard"
    span: tuple | None = None

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("sleep passes must be >= 1")
        if self.evict not in ("hard", "sliding"):
            raise ValueError(f"eviction mode must be hard|sliding, got {self.evict!r}")

    @classmethod
    def from_model(cls, cfg):
        return cls(window=cfg.window, passes=cfg.sleep_passes, evict=cfg.evict, span=cfg.loop_span)


@dataclass
class PhaseChunk:
    tokens: np.ndarray        # [B, T_c] token ids
    mask: np.ndarray          # [T_c] loss mask shared across the batch
    start: int                # absolute index of the first token
    carry_in: np.ndarray      # [B] id of the token preceding the chunk (0 at stream start)
    prediction: bool


@dataclass
class EngineStats:
    """Instrumentation counters for the latency/compute invariants."""

    block_passes: int = 0
    consolidation_chunks: int = 0
    prediction_chunks: int = 0
    consolidation_block_passes: int = 0
    prediction_stack_passes: int = 0
    max_cache_rows: int = 0
    n_passes: int = 1

    def expected_block_passes(self, span_len, depth):
        """Analytic cost: N * (consolidation chunks * span) + prediction chunks * D."""
        return self.n_passes * self.consolidation_chunks * span_len + self.prediction_chunks * depth

    def observe_cache(self, states):
        for s in states:
            if isinstance(s, mixers.KVCache):
                self.max_cache_rows = max(self.max_cache_rows, s.rows)


def plan_phases(tokens, mask, window):
    """Greedy split into chunks of length <= window, tagged by phase.

    The mask may be [T] or [B, T] with identical rows (one plan serves the
    whole batch).  When the masked positions form a single contiguous block
    running to the end of the sequence (the automaton layout: context, then
    answers), a boundary is forced at the block start so prediction tokens
    begin a fresh chunk.  Interleaved query/answer masks are left to the
    greedy split and yield mixed chunks, which take the prediction branch.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    mask = np.asarray(mask)
    if mask.ndim == 2:
        if not (mask == mask[0]).all():
            raise ValueError("batched planning needs identical masks across the batch")
        mask = mask[0]
    total = tokens.shape[1]
    if total == 0:
        raise ValueError("cannot plan an empty sequence")
    if mask.shape[0] != total:
        raise ValueError(f"tokens ({total}) and mask ({mask.shape[0]}) lengths differ")

    boundaries = {0, total}
    hot = np.flatnonzero(mask)
    if hot.size:
        first = int(hot[0])
        contiguous_suffix = hot.size == total - first
        if contiguous_suffix and first > 0:
            boundaries.add(first)
    cuts = sorted(boundaries)
    starts = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        starts.extend(range(lo, hi, window))
    starts.append(total)

    chunks = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        carry = tokens[:, lo - 1] if lo > 0 else np.zeros(tokens.shape[0], dtype=np.int64)
        chunks.append(PhaseChunk(
            tokens=tokens[:, lo:hi],
            mask=mask[lo:hi],
            start=lo,
            carry_in=carry,
            prediction=bool(mask[lo:hi].any()),
        ))
    return chunks


def init_states(model, batch):
    """Per-block mixer state at sequence start: empty caches, zero fast weights."""
    cfg = model.cfg
    states = []
    for kind in cfg.layout:
        if kind == "attn":
            states.append(mixers.empty_cache())
        else:
            states.append(mixers.init_fast_weights(batch, cfg.heads, cfg.dim // cfg.heads, cfg.np_dtype))
    return states


def _evict_caches(model, states, sleep):
    states = list(states)
    for i, kind in enumerate(model.cfg.layout):
        if kind == "attn":
            states[i] = mixers.evict(states[i], sleep.evict, sleep.window)
    return states


def consolidate_chunk(model, h0, positions, states, sleep, stats=None, taps=None, chunk_index=0):
    """Run N sleep passes over an embedded chunk; refined features are discarded.

    Attention is pass-local: every pass starts from the cache as it was
    before the chunk, so KV rows written by pass n are replaced by pass
    n+1's rows.  Fast weights thread through all passes (and carry the
    gradient).  Returns the post-eviction states.
    """
    cfg = model.cfg
    lo, hi = sleep.span if sleep.span is not None else (0, cfg.depth)
    cache_before = {i: states[i] for i in range(lo, hi) if cfg.layout[i] == "attn"}
    h = h0
    states = list(states)
    for n in range(sleep.passes):
        for i, snap in cache_before.items():
            states[i] = snap
        h, states = layers.run_blocks(model, h, states, positions, (lo, hi))
        if stats is not None:
            stats.block_passes += hi - lo
            stats.consolidation_block_passes += hi - lo
            stats.observe_cache(states)
        if taps is not None:
            for i in range(lo, hi):
                if cfg.layout[i] == "ssm":
                    states[i].retain_grad = True
                    taps.append((chunk_index, n, i, states[i]))
    # refined h is dropped here; downstream state is (fast weights, evicted cache)
    if stats is not None:
        stats.consolidation_chunks += 1
    return _evict_caches(model, states, sleep)


def predict_chunk(model, chunk, states, sleep, stats=None, capture=None):
    """One full-stack pass over a prediction chunk; masked CE on its targets.

    Teacher forcing within the chunk: inputs are the chunk tokens shifted
    right by one with the carry-in token first, and row i is scored against
    chunk token i wherever the mask is set.  When ``capture`` is a list it
    receives (chunk, logits array) pairs for greedy decoding at evaluation.
    """
    if not chunk.mask.any():
        raise ValueError("prediction chunk has an all-zero mask")
    cfg = model.cfg
    inputs = np.concatenate([chunk.carry_in[:, None], chunk.tokens[:, :-1]], axis=1)
    positions = np.arange(chunk.start - 1, chunk.start - 1 + chunk.tokens.shape[1])
    h = layers.embed(model.embed, inputs)
    h, states = layers.run_blocks(model, h, states, positions, (0, cfg.depth))
    logits = layers.output_logits(model, h)
    mask = np.broadcast_to(chunk.mask, chunk.tokens.shape)
    loss = T.cross_entropy_masked(logits, chunk.tokens, mask)
    if capture is not None:
        capture.append((chunk, logits.data))
    if stats is not None:
        stats.block_passes += cfg.depth
        stats.prediction_chunks += 1
        stats.prediction_stack_passes += 1
        stats.observe_cache(states)
    return loss, _evict_caches(model, states, sleep)


def run_sequence(model, tokens, mask, sleep=None, stats=None, taps=None, capture=None):
    """Fold a (batched) token stream through the sleep schedule; sum the losses.

    ``tokens``: [T] or [B, T]; ``mask``: [T] (or [B, T] with equal rows).
    Fast weights start at zero.  Returns the summed prediction-chunk losses
    (each chunk loss is the mean NLL over its masked positions); the whole
    recurrence stays on the caller's tape.
    """
    cfg = model.cfg
    sleep = sleep if sleep is not None else SleepConfig.from_model(cfg)
    chunks = plan_phases(tokens, mask, sleep.window)
    if not any(c.prediction for c in chunks):
        raise ValueError("sequence has no masked positions: nothing to train on")
    if stats is not None:
        stats.n_passes = sleep.passes
    batch = chunks[0].tokens.shape[0]
    states = init_states(model, batch)
    loss = None
    for ci, chunk in enumerate(chunks):
        if chunk.prediction:
            chunk_loss, states = predict_chunk(model, chunk, states, sleep, stats, capture)
            loss = chunk_loss if loss is None else T.add(loss, chunk_loss)
        else:
            positions = np.arange(chunk.start, chunk.start + chunk.tokens.shape[1])
            h0 = layers.embed(model.embed, chunk.tokens)
            states = consolidate_chunk(model, h0, positions, states, sleep, stats, taps, ci)
        if stats is not None:
            stats.observe_cache(states)
    return loss
