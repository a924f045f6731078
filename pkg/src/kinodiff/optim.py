"""Adam optimizer over named parameter dicts.

The training substrate keeps parameters as leaf tensors in a flat
name -> Tensor dict; the optimizer state mirrors that layout with first and
second moment arrays per parameter.
"""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class OptimError(RuntimeError):
    """Raised when an update cannot proceed (non-finite gradients)."""


class AdamState:
    """Bias-corrected Adam moments for one parameter set.

    `m` and `v` shape-match their parameters; `step` counts completed
    updates.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, grads, state):
    """Apply one bias-corrected Adam update in place.

    `params` maps name -> leaf Tensor, `grads` maps name -> ndarray (missing
    names are treated as zero gradient). Raises OptimError on non-finite
    gradients so training can abort with diagnostics instead of poisoning
    the weights.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise OptimError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = p.data - update
    return params, state


def zeros_like_params(params):
    return {k: np.zeros_like(p.data) for k, p in params.items()}


def clone_params(params):
    return {k: Tensor(p.data.copy()) for k, p in params.items()}
