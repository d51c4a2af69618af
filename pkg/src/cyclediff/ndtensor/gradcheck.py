"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradientTape, Tensor, no_grad


def numeric_grad(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """d f(*inputs) / d input_i by central differences; f returns a scalar Tensor."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out = []
    with no_grad():
        for i, x in enumerate(inputs):
            g = np.zeros_like(x)
            flat = x.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = f(*[Tensor(v) for v in inputs]).item()
                flat[j] = orig - h
                fm = f(*[Tensor(v) for v in inputs]).item()
                flat[j] = orig
                g.reshape(-1)[j] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_grad(f: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.asarray(x), requires_grad=True) for x in inputs]
    with GradientTape() as tape:
        loss = f(*leaves)
    grads = tape.backward(loss)
    return [grads[t] for t in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Largest relative error between analytic and numeric gradients over all inputs.

    Run under ``precision(np.float64)`` so the finite differences are not
    swamped by float32 rounding.
    """
    num = numeric_grad(f, inputs, h)
    ana = analytic_grad(f, inputs)
    return max(relative_error(a, n) for a, n in zip(ana, num))
