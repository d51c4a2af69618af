"""KL-regularised convolutional autoencoder mapping phantoms to latents.

The encoder halves the resolution twice (64 -> 16) and emits a latent mean
and log-variance with ``latent_channels`` channels; the decoder mirrors it and
ends in a sigmoid.  :class:`IdentityAutoencoder` is the pixel-space stand-in:
the latent is the image rescaled to [-1, 1].
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L
from . import ndtensor as nt
from .ndtensor import AdamState, GradientTape, Rng, ShapeError, Tensor, adam_step

logger = logging.getLogger(__name__)

KL_WEIGHT = 1e-7


@dataclass(frozen=True)
class AutoencoderConfig:
    image_size: int = 64
    channels: tuple[int, int] = (16, 32)
    latent_channels: int = 4
    groups: int = 4
    kl_weight: float = KL_WEIGHT

    def fingerprint_items(self) -> dict:
        d = asdict(self)
        d["channels"] = ",".join(str(c) for c in self.channels)
        # latents are fed to diffusion unscaled
        d["latent_scale"] = 1.0
        return d


@dataclass
class Autoencoder:
    config: AutoencoderConfig
    params: dict[str, Tensor] = field(repr=False)

    @classmethod
    def init(cls, config: AutoencoderConfig, rng: Rng) -> "Autoencoder":
        c1, c2 = config.channels
        z = config.latent_channels
        p: dict[str, Tensor] = {}
        L.init_conv(p, rng.child(0), "enc.in", 1, c1)
        L.init_norm(p, "enc.in.norm", c1)
        L.init_conv(p, rng.child(1), "enc.down1", c1, c1)
        L.init_norm(p, "enc.down1.norm", c1)
        L.init_conv(p, rng.child(2), "enc.mid1", c1, c2)
        L.init_norm(p, "enc.mid1.norm", c2)
        L.init_conv(p, rng.child(3), "enc.down2", c2, c2)
        L.init_norm(p, "enc.down2.norm", c2)
        L.init_conv(p, rng.child(4), "enc.mean", c2, z)
        L.init_conv(p, rng.child(5), "enc.logvar", c2, z)
        L.init_conv(p, rng.child(6), "dec.in", z, c2)
        L.init_norm(p, "dec.in.norm", c2)
        L.init_conv(p, rng.child(7), "dec.up2", c2, c1)
        L.init_norm(p, "dec.up2.norm", c1)
        L.init_conv(p, rng.child(8), "dec.up1", c1, c1)
        L.init_norm(p, "dec.up1.norm", c1)
        L.init_conv(p, rng.child(9), "dec.out", c1, 1)
        return cls(config, p)

    def with_params(self, params) -> "Autoencoder":
        return Autoencoder(self.config, params)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.config.image_size // 4
        return (self.config.latent_channels, s, s)

    def _cna(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        h = L.conv(self.params, name, x, stride=stride)
        return nt.silu(L.norm(self.params, f"{name}.norm", h, self.config.groups))

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1:] != (1, s, s):
            raise ShapeError(f"encoder expects [b,1,{s},{s}], got {list(x.shape)}")
        h = self._cna("enc.in", x)
        h = self._cna("enc.down1", h, stride=2)
        h = self._cna("enc.mid1", h)
        h = self._cna("enc.down2", h, stride=2)
        mean = L.conv(self.params, "enc.mean", h)
        logvar = nt.clip(L.conv(self.params, "enc.logvar", h), -10.0, 10.0)
        return mean, logvar

    def decode(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1:] != self.latent_shape:
            raise ShapeError(f"decoder expects [b,{','.join(map(str, self.latent_shape))}], got {list(z.shape)}")
        h = self._cna("dec.in", z)
        h = self._cna("dec.up2", nt.upsample_nearest(h, 2))
        h = self._cna("dec.up1", nt.upsample_nearest(h, 2))
        return nt.sigmoid(L.conv(self.params, "dec.out", h))

    def sample_latent(self, mean: Tensor, logvar: Tensor, rng: Rng) -> Tensor:
        return reparameterize(mean, logvar, rng.normal_tensor(mean.shape))


class IdentityAutoencoder:
    """Pixel-space mode: latent = 2*x - 1, decode inverts and clips."""

    def __init__(self, image_size: int = 64):
        self.image_size = image_size

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (1, self.image_size, self.image_size)

    def encode(self, x: Tensor) -> tuple[Tensor, None]:
        return x * 2.0 - 1.0, None

    def decode(self, z: Tensor) -> Tensor:
        return nt.clip((z + 1.0) * 0.5, 0.0, 1.0)

    def sample_latent(self, mean: Tensor, logvar, rng: Rng) -> Tensor:
        return mean


def reparameterize(mean: Tensor, logvar: Tensor, eps: Tensor) -> Tensor:
    return mean + nt.exp(logvar * 0.5) * eps


def kl_divergence(mean: Tensor, logvar: Tensor) -> Tensor:
    """Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1))."""
    return nt.mean((mean ** 2 + nt.exp(logvar) - 1.0 - logvar) * 0.5)


def ae_loss(x: Tensor, recon: Tensor, mean: Tensor, logvar: Tensor,
            kl_weight: float = KL_WEIGHT) -> tuple[Tensor, dict[str, float]]:
    if x.shape != recon.shape or mean.shape != logvar.shape:
        raise ShapeError("ae_loss: shape mismatch")
    for name, t in (("x", x), ("recon", recon), ("mean", mean), ("logvar", logvar)):
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"ae_loss: non-finite {name}")
    l1 = nt.mean(nt.abs(x - recon))
    kl = kl_divergence(mean, logvar)
    total = l1 + kl * kl_weight
    return total, {"l1": l1.item(), "kl": kl.item()}


def train_autoencoder(images: np.ndarray, config: AutoencoderConfig, steps: int, rng: Rng,
                      batch_size: int = 16, lr: float = 1e-3,
                      model: Autoencoder | None = None) -> tuple[Autoencoder, list[float]]:
    """Minimise L1 + kl_weight * KL on random mini-batches; returns the model and per-step losses."""
    model = model or Autoencoder.init(config, rng.child(0))
    opt = AdamState.init(model.params)
    draw = rng.child(1)
    losses = []
    for step in range(steps):
        idx = draw.integers(0, len(images), size=batch_size)
        x = Tensor(images[idx])
        params = L.trainable(model.params)
        m = model.with_params(params)
        with GradientTape() as tape:
            mean, logvar = m.encode(x)
            z = m.sample_latent(mean, logvar, draw)
            loss, _ = ae_loss(x, m.decode(z), mean, logvar, config.kl_weight)
        grads = tape.backward(loss)
        new_params, opt = adam_step(params, grads.for_params(params), opt, lr=lr)
        model = model.with_params(new_params)
        losses.append(loss.item())
        if (step + 1) % 250 == 0:
            logger.info("autoencoder step %d loss %.4f", step + 1, np.mean(losses[-250:]))
    return model, losses


def reconstruction_error(model, images: np.ndarray, batch_size: int = 32) -> float:
    """Mean per-pixel L1 of decode(encode-mean(x)) over ``images``."""
    errs = []
    with nt.no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(images[i:i + batch_size])
            mean, _ = model.encode(x)
            errs.append(np.abs(model.decode(mean).data - x.data).mean(axis=(1, 2, 3)))
    return float(np.concatenate(errs).mean())
