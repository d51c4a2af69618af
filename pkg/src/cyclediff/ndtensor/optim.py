"""Adam with bias correction, written as a pure step function."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(0, {k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict[str, Tensor], AdamState]:
    """Return updated parameters and optimizer state; inputs are not modified.

    A step whose gradients contain non-finite entries is skipped (logged and
    counted in ``state.skipped``) and the inputs are returned unchanged.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise KeyError("params, grads and optimizer state must share keys")
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {k!r}")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        logger.warning("non-finite gradient in %s; skipping Adam step %d", bad[:3], state.step + 1)
        return params, AdamState(state.step, state.m, state.v, state.skipped + 1)

    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.data.dtype, copy=False)
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params[k] = Tensor(p.data - upd.astype(p.data.dtype), requires_grad=p.requires_grad)
        new_m[k] = m.astype(p.data.dtype)
        new_v[k] = v.astype(p.data.dtype)
    return new_params, AdamState(t, new_m, new_v, state.skipped)
