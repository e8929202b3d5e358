"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

The tape is a flat, append-only list of nodes recorded in execution order,
which is already a topological order; the backward pass walks it once in
reverse.  One tape spans one full training step, including the recurrence
across context chunks and sleep passes, so gradients flow through the whole
unrolled computation.

Numerics are float32 by default; float64 is used for gradient checking.
Broadcasting is deliberately restricted to numpy-style leading/trailing
singleton expansion, and the inverse (summing the broadcast axes back out)
is applied in every backward rule.  Tensors that participate in a tape are
never mutated in place.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_ACTIVE_TAPE = None


class Node:
    """One recorded operation: inputs, outputs and a backward closure.

    ``backward_fn`` receives one gradient array per output (zeros if an
    output was never used downstream) and returns one gradient array (or
    None) per input.
    """

    __slots__ = ("op", "inputs", "outputs", "backward_fn")

    def __init__(self, op, inputs, outputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Recording context for one training step.

    Entering the context makes it the active tape; ops involving tensors
    with ``requires_grad`` then append nodes.  The tape must be explicitly
    reset (or a fresh one created) between steps.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def reset(self):
        for node in self.nodes:
            node.inputs = node.outputs = node.backward_fn = None
        self.nodes.clear()

    def backward(self, loss):
        """Accumulate gradients of ``loss`` into every requires_grad tensor.

        ``loss`` must be a scalar living on this tape.  Each node is visited
        exactly once, in reverse recording order, and is consumed as it is
        visited: saved activations and interior gradients are released
        immediately (the Tensor<->Node links would otherwise form reference
        cycles that keep whole training steps alive until a collector run).
        Tensors marked ``retain_grad`` keep their gradient.
        """
        if loss.shape != ():
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            grads_out = []
            any_grad = False
            for out in node.outputs:
                if out.grad is None:
                    grads_out.append(None)
                else:
                    grads_out.append(out.grad)
                    any_grad = True
            if any_grad:
                for i, out in enumerate(node.outputs):
                    if grads_out[i] is None:
                        grads_out[i] = np.zeros(out.shape, dtype=out.data.dtype)
                grads_in = node.backward_fn(grads_out)
                for inp, g in zip(node.inputs, grads_in):
                    if g is None or not inp.requires_grad:
                        continue
                    if inp.grad is None:
                        inp.grad = g
                    else:
                        inp.grad = inp.grad + g
                for out in node.outputs:
                    if not out.retain_grad:
                        out.grad = None
            node.inputs = node.outputs = node.backward_fn = None
        self.nodes.clear()


def active_tape():
    return _ACTIVE_TAPE


def backward(loss):
    """Backward through the currently active tape (see :meth:`Tape.backward`)."""
    if _ACTIVE_TAPE is None:
        raise RuntimeError("no active tape")
    _ACTIVE_TAPE.backward(loss)


def record(op, inputs, outputs, backward_fn):
    """Register a custom differentiable op on the active tape.

    This is the extension hook used by the layer and mixer modules for fused
    operations (rmsnorm, rope, the fast-weight scan).  Recording happens only
    if a tape is active and some input requires a gradient; in that case all
    outputs are marked ``requires_grad``.
    """
    if _ACTIVE_TAPE is None:
        return
    if not any(t.requires_grad for t in inputs):
        return
    for out in outputs:
        out.requires_grad = True
    node = Node(op, tuple(inputs), tuple(outputs), backward_fn)
    for out in outputs:
        out.node = node
    _ACTIVE_TAPE.nodes.append(node)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-d array with an optional gradient slot and tape-node link."""

    __slots__ = ("data", "requires_grad", "grad", "node", "retain_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.retain_grad = False

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None):
    """A tensor that never receives gradients (masks, positional tables...)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy-style batching over leading axes.

    Backward: dA = dC @ B^T, dB = A^T @ dC (batch axes summed back out).
    The common stacked-input x 2-D-weight case folds the batch axes into a
    single GEMM instead of looping slice by slice.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    if b.data.ndim == 2 and a.data.ndim > 2:
        k, n = b.shape

        def bwd(gouts):
            g2 = np.ascontiguousarray(gouts[0]).reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = np.ascontiguousarray(a.data).reshape(-1, k).T @ g2
            return ga, gb
    else:

        def bwd(gouts):
            (g,) = gouts
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    record("matmul", (a, b), (out,), bwd)
    return out


def add(a, b):
    out = Tensor(a.data + b.data)

    def bwd(gouts):
        (g,) = gouts
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    record("add", (a, b), (out,), bwd)
    return out


def sub(a, b):
    out = Tensor(a.data - b.data)

    def bwd(gouts):
        (g,) = gouts
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    record("sub", (a, b), (out,), bwd)
    return out


def mul(a, b):
    out = Tensor(a.data * b.data)

    def bwd(gouts):
        (g,) = gouts
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    record("mul", (a, b), (out,), bwd)
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.dtype))

    def bwd(gouts):
        return (gouts[0] * c,)

    record("scale", (a,), (out,), bwd)
    return out


def sigmoid(a):
    # tanh form is overflow-free on both tails
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(y)

    def bwd(gouts):
        return (gouts[0] * y * (1.0 - y),)

    record("sigmoid", (a,), (out,), bwd)
    return out


def silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = Tensor(a.data * s)

    def bwd(gouts):
        return (gouts[0] * (s * (1.0 + a.data * (1.0 - s))),)

    record("silu", (a,), (out,), bwd)
    return out


def exp(a):
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(gouts):
        return (gouts[0] * y,)

    record("exp", (a,), (out,), bwd)
    return out


def log(a):
    out = Tensor(np.log(a.data))

    def bwd(gouts):
        return (gouts[0] / a.data,)

    record("log", (a,), (out,), bwd)
    return out


def rsqrt(a):
    y = 1.0 / np.sqrt(a.data)
    out = Tensor(y)

    def bwd(gouts):
        return (gouts[0] * (-0.5) * y / a.data,)

    record("rsqrt", (a,), (out,), bwd)
    return out


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(gouts):
        g = gouts[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    record("sum", (a,), (out,), bwd)
    return out


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape):
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bwd(gouts):
        return (_unbroadcast(gouts[0], a.shape),)

    record("broadcast", (a,), (out,), bwd)
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))

    def bwd(gouts):
        return (gouts[0].reshape(a.shape),)

    record("reshape", (a,), (out,), bwd)
    return out


def transpose(a, axes=None):
    if axes is None:
        axes = list(range(a.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))

    def bwd(gouts):
        return (gouts[0].transpose(inv),)

    record("transpose", (a,), (out,), bwd)
    return out


def concat(tensors, axis):
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(gouts):
        g = gouts[0]
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    record("concat", tuple(tensors), (out,), bwd)
    return out


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def bwd(gouts):
        g = np.zeros(a.shape, dtype=a.dtype)
        g[idx] = gouts[0]
        return (g,)

    record("slice", (a,), (out,), bwd)
    return out


def softmax(a, axis=-1):
    """Row-stable softmax (max subtraction); NaN inputs propagate NaN."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(gouts):
        g = gouts[0]
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    record("softmax", (a,), (out,), bwd)
    return out


def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood over positions where mask == 1.

    ``logits`` has shape [..., T, V]; ``targets`` and ``mask`` are integer
    arrays of shape [..., T].  No position shifting happens here: row i is
    scored against targets[i].  An all-zero mask is a caller error.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if mask.sum() == 0:
        raise ValueError("cross_entropy_masked: mask selects no positions")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(x, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    w = mask.astype(x.dtype)
    denom = w.sum()
    out = Tensor(np.asarray((nll * w).sum() / denom, dtype=x.dtype))

    def bwd(gouts):
        g = gouts[0]
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        p *= (w / denom)[..., None]
        return (p * g,)

    record("cross_entropy_masked", (logits,), (out,), bwd)
    return out
