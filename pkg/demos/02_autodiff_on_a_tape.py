#!/usr/bin/env python3
"""A tour of the tape: record a small computation, walk it backward, and
compare every gradient against central finite differences.
"""

import numpy as np

from sleepnet import tensor as T

rng = np.random.default_rng(0)
x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)


def forward():
    h = T.silu(T.matmul(x, w))          # [3, 2]
    p = T.softmax(h, axis=-1)
    return T.mean(T.mul(p, p))


with T.Tape() as tape:
    loss = forward()
    print(f"recorded {len(tape.nodes)} nodes; loss = {loss.item():.6f}")
    for node in tape.nodes:
        outs = ", ".join(str(o.shape) for o in node.outputs)
        print(f"  {node.op:10s} -> {outs}")
    tape.backward(loss)

for name, t in (("x", x), ("w", w)):
    fd = np.zeros_like(t.data)
    flat, gflat = t.data.ravel(), fd.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + 1e-6
        up = forward().item()
        flat[i] = orig - 1e-6
        dn = forward().item()
        flat[i] = orig
        gflat[i] = (up - dn) / 2e-6
    err = np.abs(t.grad - fd).max()
    print(f"grad d loss/d {name}: max |analytic - finite difference| = {err:.2e}")
    assert err < 1e-8

print("backward matches finite differences")
