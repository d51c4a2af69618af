"""Conditional noise-prediction network eps(z_t, t, c).

A small convolutional U-Net: input conv, two stride-2 down blocks, a two-conv
bottleneck, two up blocks that concatenate the matching down-path activation,
and a zero-initialised output conv.  Timestep and condition embeddings are
summed and injected into every block as a per-channel additive bias.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from . import ndtensor as nt
from .conditions import ConditionBatch, as_batch
from .ndtensor import Rng, ShapeError, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 1
    channels: tuple[int, int] = (32, 64)
    time_basis: int = 32
    embed_dim: int = 64
    groups: int = 8
    num_timesteps: int = 256

    def fingerprint_items(self) -> dict:
        d = asdict(self)
        d["channels"] = ",".join(str(c) for c in self.channels)
        return d


def timestep_embedding(t: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Sinusoidal basis [sin(t*f_i), cos(t*f_i)] with f_i = base^(-i/half)."""
    half = dim // 2
    freqs = np.exp(-math.log(base) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def condition_features(cond: ConditionBatch) -> np.ndarray:
    """(age/100, one-hot sex) rows fed to the condition MLP."""
    onehot = np.eye(2)[cond.sexes]
    return np.concatenate([cond.ages[:, None] / 100.0, onehot], axis=1)


@dataclass
class Denoiser:
    config: DenoiserConfig
    params: dict[str, Tensor] = field(repr=False)

    @classmethod
    def init(cls, config: DenoiserConfig, rng: Rng) -> "Denoiser":
        c1, c2 = config.channels
        e = config.embed_dim
        p: dict[str, Tensor] = {}
        L.init_linear(p, rng.child(0), "temb.0", config.time_basis, e)
        L.init_linear(p, rng.child(1), "temb.1", e, e)
        L.init_linear(p, rng.child(2), "cemb.0", 3, e)
        L.init_linear(p, rng.child(3), "cemb.1", e, e)
        L.init_conv(p, rng.child(4), "in", config.in_channels, c1)
        blocks = [("down1", c1, c1), ("down2", c1, c2), ("mid1", c2, c2), ("mid2", c2, c2),
                  ("up2", 2 * c2, c1), ("up1", 2 * c1, c1)]
        for i, (name, cin, cout) in enumerate(blocks):
            L.init_conv(p, rng.child(10 + i), f"{name}.conv", cin, cout)
            L.init_norm(p, f"{name}.norm", cout)
            L.init_linear(p, rng.child(20 + i), f"{name}.film", e, cout)
        L.init_norm(p, "out.norm", c1)
        L.init_conv(p, rng.child(30), "out", c1, config.in_channels, zero=True)
        return cls(config, p)

    def with_params(self, params: dict[str, Tensor]) -> "Denoiser":
        return Denoiser(self.config, params)

    @property
    def num_params(self) -> int:
        return L.count(self.params)

    def embed(self, t: np.ndarray, cond: ConditionBatch) -> Tensor:
        p = self.params
        te = Tensor._wrap(timestep_embedding(t, self.config.time_basis))
        te = L.linear(p, "temb.1", nt.silu(L.linear(p, "temb.0", te)))
        ce = Tensor._wrap(condition_features(cond))
        ce = L.linear(p, "cemb.1", nt.silu(L.linear(p, "cemb.0", ce)))
        return nt.silu(te + ce)

    def _block(self, name: str, x: Tensor, emb: Tensor, stride: int = 1) -> Tensor:
        p = self.params
        h = L.conv(p, f"{name}.conv", x, stride=stride)
        h = L.norm(p, f"{name}.norm", h, self.config.groups)
        bias = L.linear(p, f"{name}.film", emb)
        h = h + bias.reshape(bias.shape[0], bias.shape[1], 1, 1)
        return nt.silu(h)

    def up_block(self, name: str, x: Tensor, skip: Tensor, emb: Tensor) -> Tensor:
        """Concatenate the skip activation, convolve, upsample by 2."""
        if skip is None:
            raise ShapeError(f"{name}: skip connection is required")
        return nt.upsample_nearest(self._block(name, nt.concat([x, skip], axis=1), emb), 2)

    def predict_noise(self, z_t: Tensor, t, cond) -> Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [b,{self.config.in_channels},h,w], got {list(z_t.shape)}")
        b, _, h, w = z_t.shape
        if h % 4 or w % 4:
            raise ShapeError("spatial extents must be divisible by 4")
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        if np.any(t < 1) or np.any(t > self.config.num_timesteps):
            raise ValueError(f"timestep outside [1, {self.config.num_timesteps}]")
        cond = as_batch(cond, b)
        p = self.params
        emb = self.embed(t, cond)

        h0 = L.conv(p, "in", z_t)
        h1 = self._block("down1", h0, emb, stride=2)
        h2 = self._block("down2", h1, emb, stride=2)
        m = self._block("mid2", self._block("mid1", h2, emb), emb)
        u = self.up_block("up2", m, h2, emb)
        u = self.up_block("up1", u, h1, emb)
        u = nt.silu(L.norm(p, "out.norm", u + h0, self.config.groups))
        return L.conv(p, "out", u)

    __call__ = predict_noise


def predict_noise(model: Denoiser, z_t: Tensor, t, cond) -> Tensor:
    return model.predict_noise(z_t, t, cond)
