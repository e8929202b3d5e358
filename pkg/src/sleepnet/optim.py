"""Parameter updates: AdamW and orthogonalized-momentum (Muon) steps.

Two-dimensional mixer/MLP projections take Muon updates (momentum buffer
orthogonalized by a Newton-Schulz iteration, scaled by sqrt(max(1,
rows/cols))); embeddings, the output projection, norm scales and gate
parameters take AdamW.  Group assignment is total and disjoint, asserted at
build time.

Newton-Schulz coefficients and step count are configuration, not
constants.  ``MUON_COEFFS`` with 5 steps is the fast published quintic: it
inflates small singular values in few steps but by design only lands them
in a band around 1 (it is not convergent).  ``POLAR_COEFFS`` is the
classical convergent quintic; with ~10 steps it reproduces the polar factor
of well-conditioned matrices to machine precision and is what the
orthogonalization accuracy checks use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MUON_COEFFS = (3.4445, -4.7750, 2.0315)
POLAR_COEFFS = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0)


class NumericalError(RuntimeError):
    """A non-finite gradient or loss aborted an optimizer step."""


def newton_schulz(m, steps=5, coeffs=MUON_COEFFS):
    """Iterate X <- aX + (bA + c A^2) X with A = X X^T on the normalized input.

    Operates on the transposed matrix when rows exceed columns so the Gram
    matrix stays small.  The result approximates U V^T for m = U S V^T;
    accuracy is governed by (steps, coeffs), see module docstring.
    """
    if m.ndim != 2:
        raise ValueError(f"newton_schulz expects a matrix, got shape {m.shape}")
    a, b, c = coeffs
    x = m.astype(np.float64, copy=True)
    transposed = x.shape[0] > x.shape[1]
    if transposed:
        x = x.T
    x /= np.linalg.norm(x) + 1e-7
    for _ in range(steps):
        g = x @ x.T
        x = a * x + (b * g + c * (g @ g)) @ x
    return (x.T if transposed else x).astype(m.dtype)


@dataclass
class ParamGroup:
    """Named parameters sharing one update rule and its constants."""

    names: list
    params: list
    rule: str                    # "adamw" | "muon"
    lr: float
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    momentum: float = 0.95
    ns_steps: int = 5
    ns_coeffs: tuple = MUON_COEFFS

    def __post_init__(self):
        if self.rule not in ("adamw", "muon"):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.rule == "muon":
            bad = [n for n, p in zip(self.names, self.params) if p.data.ndim != 2]
            if bad:
                raise ValueError(f"muon group requires 2-D parameters, got {bad}")


ADAMW_NAMES = ("embed", "out_proj", "norm1", "norm2", "final_norm",
               "b_alpha", "b_beta", "w_alpha", "w_beta")


def _takes_adamw(name):
    return any(name == n or name.endswith("." + n) for n in ADAMW_NAMES)


def build_param_groups(model, muon_lr=2e-3, adamw_lr=5e-5, weight_decay=0.01,
                       ns_steps=5, ns_coeffs=MUON_COEFFS):
    """Two groups: matrix projections to muon, everything else to adamw.

    Gate projections are vectors-per-head and stay on adamw along with
    embeddings, output projection and norm scales.  Every trainable tensor
    lands in exactly one group.
    """
    params = model.named_parameters()
    muon_names = [n for n in params if not _takes_adamw(n)]
    adamw_names = [n for n in params if _takes_adamw(n)]
    assert set(muon_names) | set(adamw_names) == set(params)
    assert not set(muon_names) & set(adamw_names)
    groups = [
        ParamGroup(names=adamw_names, params=[params[n] for n in adamw_names],
                   rule="adamw", lr=adamw_lr, weight_decay=weight_decay),
        ParamGroup(names=muon_names, params=[params[n] for n in muon_names],
                   rule="muon", lr=muon_lr, weight_decay=0.0,
                   ns_steps=ns_steps, ns_coeffs=ns_coeffs),
    ]
    return groups


def adamw_step(group, state, step_count):
    """Decoupled-weight-decay Adam with bias correction.

    From zeroed moments the first update is -lr * g / (|g| + eps).  A
    non-finite gradient aborts the step before any parameter is touched.
    """
    b1, b2 = group.betas
    for name, p in zip(group.names, group.params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
    for name, p in zip(group.names, group.params):
        g = p.grad
        if g is None:
            continue
        st = state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * (g * g)
        mhat = st["m"] / (1 - b1 ** step_count)
        vhat = st["v"] / (1 - b2 ** step_count)
        if group.weight_decay:
            p.data = p.data - group.lr * group.weight_decay * p.data
        p.data = p.data - group.lr * (mhat / (np.sqrt(vhat) + group.eps))


def muon_step(group, state):
    """Heavy-ball momentum orthogonalized by Newton-Schulz, then applied.

    The update is scaled by sqrt(max(1, rows/cols)) following the
    optimizer's published convention for non-square matrices.
    """
    for name, p in zip(group.names, group.params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name!r}; step aborted")
    for name, p in zip(group.names, group.params):
        g = p.grad
        if g is None:
            continue
        st = state.setdefault(name, {"momentum": np.zeros_like(p.data)})
        st["momentum"] = group.momentum * st["momentum"] + g
        update = newton_schulz(st["momentum"], group.ns_steps, group.ns_coeffs)
        rows, cols = p.data.shape
        scale = max(1.0, rows / cols) ** 0.5
        p.data = p.data - (group.lr * scale) * update.astype(p.data.dtype)


class Optimizer:
    """Grouped stepper with checkpointable state."""

    def __init__(self, groups):
        self.groups = groups
        self.state = {}
        self.step_count = 0

    def step(self):
        self.step_count += 1
        for group in self.groups:
            gstate = self.state.setdefault(group.rule, {})
            if group.rule == "adamw":
                adamw_step(group, gstate, self.step_count)
            else:
                muon_step(group, gstate)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def state_arrays(self):
        """Flat name -> array view of optimizer state (for checkpoints)."""
        out = {"step_count": np.asarray([self.step_count], dtype=np.int64)}
        for rule, gstate in self.state.items():
            for name, bufs in gstate.items():
                for key, arr in bufs.items():
                    out[f"{rule}/{name}/{key}"] = arr
        return out

    def load_state_arrays(self, arrays):
        self.state = {}
        for full, arr in arrays.items():
            if full == "step_count":
                self.step_count = int(arr[0])
                continue
            rule, name, key = full.split("/", 2)
            self.state.setdefault(rule, {}).setdefault(name, {})[key] = arr
