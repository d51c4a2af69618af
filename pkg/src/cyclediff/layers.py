"""Parameter initialisers and small layer helpers shared by the networks.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names;
forward functions look them up by prefix.
"""
from __future__ import annotations

import numpy as np

from . import ndtensor as nt
from .ndtensor import Rng, Tensor

Params = dict[str, Tensor]


def init_conv(params: Params, rng: Rng, name: str, cin: int, cout: int, k: int = 3,
              zero: bool = False) -> None:
    fan_in = cin * k * k
    w = np.zeros((cout, cin, k, k)) if zero else rng.normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)


def init_linear(params: Params, rng: Rng, name: str, din: int, dout: int, zero: bool = False) -> None:
    w = np.zeros((din, dout)) if zero else rng.normal((din, dout)) * np.sqrt(1.0 / din)
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros((1, dout)), requires_grad=True)


def init_norm(params: Params, name: str, ch: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones((1, ch, 1, 1)), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros((1, ch, 1, 1)), requires_grad=True)


def conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return nt.conv2d(x, w, stride=stride, pad=w.shape[-1] // 2) + params[f"{name}.b"]


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return nt.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def norm(params: Params, name: str, x: Tensor, groups: int) -> Tensor:
    return nt.group_norm(x, groups) * params[f"{name}.g"] + params[f"{name}.b"]


def count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def trainable(params: Params) -> Params:
    """Fresh leaf tensors sharing values, so a new tape can track them."""
    return {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
