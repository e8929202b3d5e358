"""Sequence mixers: windowed causal attention and the fast-weight recurrence.

Attention stores keys/values in a :class:`KVCache` that the sleep engine
evicts at chunk boundaries (hard: drop everything; sliding: keep the newest
``window - 1`` rows).  Rotary positions use absolute indices that never
reset, so sliding eviction keeps positional continuity across boundaries.

The fast-weight layer keeps a per-head matrix state updated by a gated
outer-product rule

    S_t = alpha_t * S_{t-1} + beta_t * v_t k_t^T,      o_t = S_t q_t

with keys L2-normalized before the update.  A delta-rule variant

    S_t = S_{t-1} (alpha_t I - alpha_t beta_t k_t k_t^T) + beta_t v_t k_t^T

is selectable per model config.  Both scans are single fused tape ops whose
backward replays the state sequence, so taping cost stays per-chunk instead
of per-token.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class WindowOverflowError(RuntimeError):
    """A chunk would push the attention cache past the window budget."""


class StateKindError(TypeError):
    """Mixer was handed state of the wrong kind."""


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------


class KVCache:
    """Per-attention-layer ring of cached (key, value) rows.

    ``segments`` is a tuple of ``(k, v, pos)`` with k, v of shape
    [B, H, t, d_head] and ``pos`` the absolute positions of the rows.  The
    cache is immutable; appending or evicting returns a new cache.  Rows are
    tape tensors, so gradients flow into retained rows across chunk
    boundaries in sliding mode.
    """

    __slots__ = ("segments",)

    def __init__(self, segments=()):
        self.segments = tuple(segments)

    @property
    def rows(self):
        return sum(s[0].shape[2] for s in self.segments)

    def keys(self):
        return [s[0] for s in self.segments]

    def values(self):
        return [s[1] for s in self.segments]

    def positions(self):
        if not self.segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([s[2] for s in self.segments])

    def extended(self, k, v, pos):
        return KVCache(self.segments + ((k, v, np.asarray(pos, dtype=np.int64)),))


def empty_cache():
    return KVCache()


def evict(cache, mode, window):
    """Apply the eviction policy at a chunk boundary.

    hard: the cache is cleared entirely.  sliding: the newest
    ``min(rows, window - 1)`` rows survive, order and absolute positions
    preserved.
    """
    if mode == "hard":
        return KVCache()
    if mode != "sliding":
        raise ValueError(f"unknown eviction mode {mode!r}")
    return _keep_newest(cache, min(cache.rows, window - 1))


def _keep_newest(cache, keep):
    if keep >= cache.rows:
        return cache
    segments = []
    need = keep
    for k, v, pos in reversed(cache.segments):
        t = k.shape[2]
        if need <= 0:
            break
        if t <= need:
            segments.append((k, v, pos))
            need -= t
        else:
            segments.append((
                T.slice_axis(k, 2, t - need, t),
                T.slice_axis(v, 2, t - need, t),
                pos[t - need:],
            ))
            need = 0
    return KVCache(tuple(reversed(segments)))


# ---------------------------------------------------------------------------
# rotary positions
# ---------------------------------------------------------------------------


def rope(x, positions, base=10000.0):
    """Rotate query/key features by absolute position phases.

    ``x``: [B, H, T, d_head] with even d_head; first/second halves form the
    rotation pairs.  Backward rotates the incoming gradient by the opposite
    angle.
    """
    dh = x.shape[-1]
    half = dh // 2
    pos = np.asarray(positions, dtype=np.float64)
    inv = base ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    ang = pos[:, None] * inv[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    out = np.empty_like(x.data)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:] = x2 * cos + x1 * sin
    y = Tensor(out)

    def bwd(gouts):
        g = gouts[0]
        g1 = g[..., :half]
        g2 = g[..., half:]
        gx = np.empty_like(g)
        gx[..., :half] = g1 * cos + g2 * sin
        gx[..., half:] = g2 * cos - g1 * sin
        return (gx,)

    T.record("rope", (x,), (y,), bwd)
    return y


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(t, heads):
    b, n, d = t.shape
    return T.transpose(T.reshape(t, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(t):
    b, h, n, dh = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1, 3)), (b, n, h * dh))


def attention_forward(p, x, cache, positions, cfg):
    """Causal multi-head attention over cache rows plus the current chunk.

    Position i attends to every cached row and to chunk positions <= i; in
    sliding mode each query is additionally masked to the ``window`` most
    recent positions.  A position is represented at most once: chunk rows
    supersede cached rows at the same absolute position (this happens only
    at prediction chunks in sliding mode, where the shifted carry-in input
    re-covers the last retained position).  Returns the output and the
    cache extended by the chunk's key/value rows; overflowing the window is
    a hard error.
    """
    if not isinstance(cache, KVCache):
        raise StateKindError(f"attention block needs a KVCache, got {type(cache).__name__}")
    b, tc, d = x.shape
    heads = cfg.heads
    window = cfg.window
    if cfg.evict == "hard":
        if cache.rows + tc > window:
            raise WindowOverflowError(
                f"cache rows ({cache.rows}) + chunk ({tc}) exceed window {window}")
    elif tc > window:
        raise WindowOverflowError(f"chunk length {tc} exceeds window {window}")

    qkv = T.matmul(x, p.w_qkv)
    q = _split_heads(T.slice_axis(qkv, 2, 0, d), heads)
    k = _split_heads(T.slice_axis(qkv, 2, d, 2 * d), heads)
    v = _split_heads(T.slice_axis(qkv, 2, 2 * d, 3 * d), heads)
    positions = np.asarray(positions, dtype=np.int64)
    q = rope(q, positions, cfg.rope_base)
    k_rot = rope(k, positions, cfg.rope_base)

    cache = _drop_rows_from(cache, int(positions[0]))
    new_cache = cache.extended(k_rot, v, positions)
    if cache.rows:
        k_all = T.concat(cache.keys() + [k_rot], axis=2)
        v_all = T.concat(cache.values() + [v], axis=2)
        kpos = np.concatenate([cache.positions(), positions])
    else:
        k_all, v_all, kpos = k_rot, v, positions

    dh = d // heads
    scores = T.scale(T.matmul(q, T.transpose(k_all)), 1.0 / np.sqrt(dh))
    allowed = kpos[None, :] <= positions[:, None]
    if cfg.evict == "sliding":
        allowed &= kpos[None, :] > positions[:, None] - window
    bias = np.where(allowed, 0.0, -1e9).astype(x.dtype)
    probs = T.softmax(T.add(scores, T.constant(bias[None, None])), axis=-1)
    ctx = _merge_heads(T.matmul(probs, v_all))
    if cfg.evict == "sliding":
        # drop rows no future query can attend to, so stored rows never exceed the window
        reachable = int((new_cache.positions() > positions[-1] - window).sum())
        new_cache = _keep_newest(new_cache, reachable)
    return T.matmul(ctx, p.w_o), new_cache


def _drop_rows_from(cache, first_position):
    """Remove cached rows at positions >= first_position (about to be rewritten)."""
    if not cache.segments or cache.positions()[-1] < first_position:
        return cache
    segments = []
    for k, v, pos in cache.segments:
        keep = int((pos < first_position).sum())
        if keep == len(pos):
            segments.append((k, v, pos))
        elif keep > 0:
            segments.append((T.slice_axis(k, 2, 0, keep), T.slice_axis(v, 2, 0, keep), pos[:keep]))
    return KVCache(tuple(segments))


# ---------------------------------------------------------------------------
# fast-weight recurrence
# ---------------------------------------------------------------------------


def init_fast_weights(batch, heads, d_head, dtype):
    """Zero state at sequence start; shape is constant in sequence length."""
    return T.zeros((batch, heads, d_head, d_head), dtype=dtype)


def fast_weight_scan(q, k, v, alpha, beta, s0):
    """Gated outer-product scan over a chunk (one fused tape op).

    q, k, v: [B, H, T, d_head]; alpha, beta: [B, H, T]; s0: [B, H, d, d].
    Returns per-position reads o_t = S_t q_t and the final state.

    Unrolling the recurrence gives the closed form

        S_t = exp(L_t) S_0 + sum_{j<=t} exp(L_t - L_j) beta_j v_j k_j^T,
        L_t = sum_{i<=t} log alpha_i,

    so the whole chunk evaluates as a handful of batched matrix products
    with a lower-triangular decay matrix.  Decay ratios are formed in
    float64 log space: the exponents are never positive, so nothing can
    overflow, and long-range entries underflow to exactly the zeros the
    product of gates would reach.  Backward uses the same blocked algebra.
    """
    qd, kd, vd, ad, bd = q.data, k.data, v.data, alpha.data, beta.data
    dt = qd.dtype
    tc = qd.shape[2]
    la = np.log(ad.astype(np.float64))
    lc = np.cumsum(la, axis=-1)                     # L_t
    tril = np.tril(np.ones((tc, tc), dtype=bool))
    decay = np.where(tril, np.exp(lc[..., :, None] - lc[..., None, :]), 0.0)  # G[t, j]
    e = np.exp(lc).astype(dt)                       # exp(L_t)
    w = (decay * bd.astype(np.float64)[..., None, :]).astype(dt)              # W = G * beta_j
    scores = qd @ np.swapaxes(kd, -1, -2)
    m = w * scores
    s0t = np.swapaxes(s0.data, -1, -2)
    outs = m @ vd + e[..., None] * (qd @ s0t)
    c = (np.exp(lc[..., -1:] - lc) * bd.astype(np.float64)).astype(dt)        # exp(L_T - L_j) beta_j
    e_last = e[..., -1]
    s_last = (e_last[..., None, None] * s0.data
              + np.swapaxes(vd * c[..., None], -1, -2) @ kd)
    o = Tensor(outs)
    s_final = Tensor(s_last)

    def bwd(gouts):
        go, gs = gouts
        dm = go @ np.swapaxes(vd, -1, -2)
        gv = np.swapaxes(m, -1, -2) @ go
        gq = e[..., None] * (go @ s0.data)
        gs0 = np.swapaxes(e[..., None] * go, -1, -2) @ qd + e_last[..., None, None] * gs
        de = (go * (qd @ s0t)).sum(axis=-1)
        dp = dm * w
        gq += dp @ kd
        gk = np.swapaxes(dp, -1, -2) @ qd
        dw = dm * scores
        gbeta = (dw * decay.astype(dt)).sum(axis=-2)
        # final-state writes: S_T = e_T S0 + sum_j c_j v_j k_j^T
        v_gs = vd @ gs                               # [B,H,T,dk]
        dc = (v_gs * kd).sum(axis=-1)
        gv += c[..., None] * (kd @ np.swapaxes(gs, -1, -2))
        gk += c[..., None] * v_gs
        ratio_last = np.exp(lc[..., -1:] - lc)
        gbeta += (dc.astype(np.float64) * ratio_last).astype(dt)
        # decay-exponent adjoints, accumulated in float64
        gg = (dw.astype(np.float64) * bd.astype(np.float64)[..., None, :]) * decay
        dl = gg.sum(axis=-1) - gg.sum(axis=-2)
        dl += de.astype(np.float64) * np.exp(lc)
        cc = dc.astype(np.float64) * (ratio_last * bd.astype(np.float64))
        dl[..., -1] += cc.sum(axis=-1) + (gs.astype(np.float64) * s0.data.astype(np.float64)).sum(axis=(-1, -2)) * np.exp(lc[..., -1])
        dl -= cc
        dla = np.flip(np.cumsum(np.flip(dl, axis=-1), axis=-1), axis=-1)
        galpha = (dla / ad.astype(np.float64)).astype(dt)
        return gq, gk, gv, galpha, gbeta, gs0

    T.record("fast_weight_scan", (q, k, v, alpha, beta, s0), (o, s_final), bwd)
    return o, s_final


def delta_fast_weight_scan(q, k, v, alpha, beta, s0):
    """Delta-rule variant: decay, then overwrite the slot addressed by k.

    S_t = S_{t-1}(alpha_t I - alpha_t beta_t k_t k_t^T) + beta_t v_t k_t^T,
    equivalently S_t = alpha_t S_{t-1} + beta_t u_t k_t^T with
    u_t = v_t - alpha_t S_{t-1} k_t.  Expects unit-norm keys.
    """
    qd, kd, vd, ad, bd = q.data, k.data, v.data, alpha.data, beta.data
    bsz, h, tc, dh = qd.shape
    s = s0.data
    outs = np.empty_like(qd)
    for t in range(tc):
        at = ad[:, :, t, None, None]
        read = (s @ kd[:, :, t, :, None])[..., 0]
        u = vd[:, :, t] - ad[:, :, t, None] * read
        s = at * s + bd[:, :, t, None, None] * (u[..., :, None] * kd[:, :, t, None, :])
        outs[:, :, t] = (s @ qd[:, :, t, :, None])[..., 0]
    o = Tensor(outs)
    s_final = Tensor(s)

    def bwd(gouts):
        go, gs = gouts
        hist = np.empty((tc, bsz, h, dh, dh), dtype=qd.dtype)
        us = np.empty_like(vd)
        s_t = s0.data
        for t in range(tc):
            read = (s_t @ kd[:, :, t, :, None])[..., 0]
            us[:, :, t] = vd[:, :, t] - ad[:, :, t, None] * read
            s_t = (ad[:, :, t, None, None] * s_t
                   + bd[:, :, t, None, None] * (us[:, :, t, :, None] * kd[:, :, t, None, :]))
            hist[t] = s_t
        g = gs.copy()
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.empty_like(vd)
        ga = np.empty_like(ad)
        gb = np.empty_like(bd)
        for t in range(tc - 1, -1, -1):
            s_prev = hist[t - 1] if t > 0 else s0.data
            at = ad[:, :, t, None]
            kt = kd[:, :, t]
            ut = us[:, :, t]
            got = go[:, :, t]
            g = g + got[..., :, None] * qd[:, :, t, None, :]
            gq[:, :, t] = (hist[t] * got[..., :, None]).sum(axis=-2)
            gb[:, :, t] = (g * (ut[..., :, None] * kt[..., None, :])).sum(axis=(-1, -2))
            gu = bd[:, :, t, None] * (g * kt[..., None, :]).sum(axis=-1)
            gv[:, :, t] = gu
            read = (s_prev @ kt[..., :, None])[..., 0]
            ga[:, :, t] = (g * s_prev).sum(axis=(-1, -2)) - (gu * read).sum(axis=-1)
            gk[:, :, t] = (bd[:, :, t, None] * (g * ut[..., :, None]).sum(axis=-2)
                           - at * (np.swapaxes(s_prev, -1, -2) @ gu[..., :, None])[..., 0])
            g = at[..., None] * g - at[..., None] * (gu[..., :, None] * kt[..., None, :])
        return gq, gk, gv, ga, gb, g

    T.record("delta_fast_weight_scan", (q, k, v, alpha, beta, s0), (o, s_final), bwd)
    return o, s_final


def ssm_forward(p, x, s, cfg):
    """Fast-weight mixer over a chunk: project, gate, scan, project back.

    ``s`` is the [B, H, d_head, d_head] state carried across chunks and
    sleep passes; its shape never depends on sequence length.  Keys are
    L2-normalized before the update to bound state growth.
    """
    if not isinstance(s, Tensor) or s.data.ndim != 4:
        raise StateKindError(f"fast-weight block needs a state tensor, got {type(s).__name__}")
    b, tc, d = x.shape
    heads = cfg.heads
    qkv = T.matmul(x, p.w_qkv)
    q = _split_heads(T.slice_axis(qkv, 2, 0, d), heads)
    k = _split_heads(T.slice_axis(qkv, 2, d, 2 * d), heads)
    v = _split_heads(T.slice_axis(qkv, 2, 2 * d, 3 * d), heads)
    norm2 = T.sum_(T.mul(k, k), axis=-1, keepdims=True)
    k = T.mul(k, T.rsqrt(T.add(norm2, T.constant(np.asarray(1e-12, dtype=x.dtype)))))

    alpha = T.transpose(T.sigmoid(T.add(T.matmul(x, p.w_alpha), p.b_alpha)), (0, 2, 1))
    beta = T.transpose(T.sigmoid(T.add(T.matmul(x, p.w_beta), p.b_beta)), (0, 2, 1))

    scan = delta_fast_weight_scan if cfg.ssm_rule == "delta" else fast_weight_scan
    o, s_next = scan(q, k, v, alpha, beta, s)
    return T.matmul(_merge_heads(o), p.w_o), s_next
