"""Finite-difference gradient cases shared by the unit tests and the acceptance suite.

Each case maps a seed to ``(f, inputs)`` where ``f`` returns a scalar Tensor.
Inputs are pushed away from kinks (relu, abs, clip) so central differences
with h = 1e-3 are well defined.
"""
from __future__ import annotations

import numpy as np

from cyclediff import ndtensor as nt


def _away(x, points=(0.0,), margin=0.05):
    x = np.array(x, dtype=np.float64)
    for p in points:
        d = x - p
        close = np.abs(d) < margin
        x[close] = p + np.where(d[close] >= 0, margin, -margin)
    return x


def case(name: str, seed: int):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal

    cache: dict = {}

    # a fixed random projection keeps every output element in play
    def proj(out):
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(seed + 10_000).standard_normal(out.shape)
        return nt.sum(out * nt.Tensor(cache[out.shape]))

    if name == "add":
        return (lambda a, b: proj(a + b)), [n((3, 4)), n((1, 4))]
    if name == "sub":
        return (lambda a, b: proj(a - b)), [n((3, 4)), n((3, 1))]
    if name == "mul":
        return (lambda a, b: proj(a * b)), [n((2, 3, 4)), n((2, 1, 4))]
    if name == "div":
        return (lambda a, b: proj(a / b)), [n((3, 4)), _away(n((3, 4)), margin=0.5)]
    if name == "matmul":
        return (lambda a, b: proj(a @ b)), [n((3, 4)), n((4, 2))]
    if name == "linear":
        return (lambda x, w, b: proj(nt.linear(x, w, b))), [n((3, 4)), n((4, 5)), n((1, 5))]
    if name == "conv2d":
        return (lambda x, w: proj(nt.conv2d(x, w, stride=1, pad=1))), [n((1, 1, 5, 5)), n((2, 1, 3, 3))]
    if name == "conv2d_wide":
        return (lambda x, w: proj(nt.conv2d(x, w, stride=1, pad=1))), [n((1, 4, 4, 4)), n((4, 4, 3, 3))]
    if name == "conv2d_stride2":
        return (lambda x, w: proj(nt.conv2d(x, w, stride=2, pad=1))), [n((1, 2, 6, 6)), n((3, 2, 3, 3))]
    if name == "conv2d_stride2_wide":
        return (lambda x, w: proj(nt.conv2d(x, w, stride=2, pad=1))), [n((2, 4, 5, 6)), n((3, 4, 3, 3))]
    if name == "reshape":
        return (lambda x: proj(nt.reshape(x, (6, 2)))), [n((3, 4))]
    if name == "concat":
        return (lambda a, b: proj(nt.concat([a, b], axis=1))), [n((2, 2, 3)), n((2, 1, 3))]
    if name == "upsample":
        return (lambda x: proj(nt.upsample_nearest(x, 2))), [n((1, 2, 2, 3))]
    if name == "relu":
        return (lambda x: proj(nt.relu(x))), [_away(n((3, 4)))]
    if name == "sigmoid":
        return (lambda x: proj(nt.sigmoid(x))), [2 * n((3, 4))]
    if name == "silu":
        return (lambda x: proj(nt.silu(x))), [2 * n((3, 4))]
    if name == "exp":
        return (lambda x: proj(nt.exp(x))), [n((3, 4))]
    if name == "log":
        return (lambda x: proj(nt.log(x))), [0.5 + np.abs(n((3, 4)))]
    if name == "abs":
        return (lambda x: proj(nt.abs(x))), [_away(n((3, 4)))]
    if name == "pow":
        return (lambda x: proj(nt.pow(x, 3.0))), [n((3, 4))]
    if name == "sqrt":
        return (lambda x: proj(nt.sqrt(x))), [0.5 + np.abs(n((3, 4)))]
    if name == "clip":
        return (lambda x: proj(nt.clip(x, -0.5, 0.5))), [_away(n((3, 4)), (-0.5, 0.5))]
    if name == "sum":
        return (lambda x: proj(nt.sum(x, axis=1, keepdims=True))), [n((3, 4))]
    if name == "mean":
        return (lambda x: proj(nt.mean(x, axis=0))), [n((3, 4))]
    if name == "avg_pool":
        return (lambda x: proj(nt.avg_pool(x, 2))), [n((1, 2, 4, 4))]
    if name == "group_norm":
        return (lambda x: proj(nt.group_norm(x, 2))), [n((2, 4, 3, 3))]
    if name == "bce_with_logits":
        t = (rng.random((4, 1)) < 0.5).astype(np.float64)
        return (lambda z: nt.bce_with_logits(z, t)), [2 * n((4, 1))]
    if name == "two_layer_net":
        x = n((5, 3))
        y = n((5, 1))

        def net(w1, b1, w2, b2):
            h = nt.silu(nt.linear(nt.Tensor(x), w1, b1))
            out = nt.linear(h, w2, b2)
            return nt.mean((out - nt.Tensor(y)) ** 2)

        return net, [n((3, 6)), n((1, 6)), n((6, 1)), n((1, 1))]
    raise KeyError(name)


OPS = ["add", "sub", "mul", "div", "matmul", "linear", "conv2d", "conv2d_wide", "conv2d_stride2", "conv2d_stride2_wide",
       "reshape", "concat", "upsample", "relu", "sigmoid", "silu", "exp", "log", "abs", "pow", "sqrt",
       "clip", "sum", "mean", "avg_pool", "group_norm", "bce_with_logits", "two_layer_net"]


def max_error(name: str, seeds=range(100), h: float = 1e-3) -> float:
    worst = 0.0
    with nt.precision(np.float64):
        for s in seeds:
            f, inputs = case(name, s)
            worst = max(worst, nt.check_gradients(f, inputs, h))
    return worst
