"""Noise schedules, forward noising, the noise-prediction loss, and DDIM
sampling / inversion.

Timesteps are 1-based: ``t in {1, ..., T}`` indexes ``alpha_bar[t-1]`` and
``alpha_bar(0)`` is defined as 1 so that the last sampling step returns the
clean estimate exactly.  ``eps_model`` is any callable
``(z_t, t, cond) -> Tensor`` (normally a :class:`~cyclediff.denoiser.Denoiser`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndtensor as nt
from .ndtensor import ShapeError, Tensor

EpsModel = Callable[[Tensor, object, object], Tensor]


class NumericalError(ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    alpha_bar: np.ndarray  # float64, length T, strictly decreasing

    def __post_init__(self):
        ab = self.alpha_bar
        if len(ab) != self.T:
            raise ValueError("alpha_bar length must equal T")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing inside (0, 1]")

    @property
    def sqrt_alpha_bar(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sqrt_one_minus_alpha_bar(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def ab(self, t) -> np.ndarray:
        """alpha_bar at (array of) 1-based timesteps, with ab(0) = 1."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def make_schedule(kind: str = "linear-beta", T: int = 256) -> NoiseSchedule:
    """``linear-beta``: beta linear from 1e-4 to 2e-2, alpha_bar = cumprod(1-beta).
    ``cosine``: squared-cosine alpha_bar with offset s=0.008 and beta capped at 0.999.
    """
    if T < 2:
        raise ValueError("need T >= 2")
    if kind == "linear-beta":
        betas = np.linspace(1e-4, 2e-2, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, T, np.cumprod(1.0 - betas))


def _check_t(t, schedule: NoiseSchedule, low: int = 1) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < low) or np.any(t > schedule.T):
        raise ValueError(f"timestep outside [{low}, {schedule.T}]")
    return t


def _coef(values: np.ndarray, batch: int, ndim: int) -> Tensor:
    """Per-sample scalar coefficients shaped for unit-axis broadcasting."""
    v = np.broadcast_to(np.asarray(values, dtype=np.float64), (batch,))
    return Tensor._wrap(v.reshape((batch,) + (1,) * (ndim - 1)))


def forward_noise(z0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {list(z0.shape)} and eps {list(eps.shape)} differ")
    t = _check_t(t, schedule)
    ab = schedule.ab(t)
    b = z0.shape[0]
    return _coef(np.sqrt(ab), b, z0.ndim) * z0 + _coef(np.sqrt(1 - ab), b, z0.ndim) * eps


def ldm_loss(eps_model: EpsModel, z0: Tensor, t, cond, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between the injected noise and its prediction."""
    z_t = forward_noise(z0, t, eps, schedule)
    return noise_mse(eps, eps_model(z_t, t, cond))


def noise_mse(eps: Tensor, pred: Tensor) -> Tensor:
    return nt.mean((eps - pred) ** 2)


def z0_from_eps(z_t: Tensor, eps_pred: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    t = _check_t(t, schedule)
    ab = schedule.ab(t)
    b = z_t.shape[0]
    return (z_t - _coef(np.sqrt(1 - ab), b, z_t.ndim) * eps_pred) * _coef(1.0 / np.sqrt(ab), b, z_t.ndim)


def estimate_z0(eps_model: EpsModel, z_t: Tensor, t, cond, schedule: NoiseSchedule) -> Tensor:
    """Single-step clean estimate (z_t - sqrt(1-ab_t) eps(z_t,t,c)) / sqrt(ab_t)."""
    _check_t(t, schedule)
    return z0_from_eps(z_t, eps_model(z_t, t, cond), t, schedule)


def ddim_step(eps_model: EpsModel, z_t: Tensor, t: int, cond, schedule: NoiseSchedule) -> Tensor:
    """Deterministic DDIM update z_t -> z_{t-1}; at t=1 it returns the clean estimate."""
    z_prev, _ = _ddim_step(eps_model, z_t, t, cond, schedule)
    return z_prev


def _ddim_step(eps_model, z_t, t, cond, schedule):
    _check_t(t, schedule)
    eps = eps_model(z_t, t, cond)
    z0 = z0_from_eps(z_t, eps, t, schedule)
    ab_prev = float(schedule.ab(int(t) - 1))
    if ab_prev == 1.0:
        return z0, z0
    return math.sqrt(ab_prev) * z0 + math.sqrt(1 - ab_prev) * eps, z0


@dataclass
class SamplerTrace:
    steps: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)  # (t, z_t, z0_hat)

    def __len__(self) -> int:
        return len(self.steps)


def _require_finite(x: Tensor, what: str, step: int) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite {what}", step)


def ddim_sample(eps_model: EpsModel, z_T: Tensor, cond, schedule: NoiseSchedule,
                trace: bool = False) -> tuple[Tensor, SamplerTrace | None]:
    """Run every DDIM step from t=T down to 1."""
    _require_finite(z_T, "initial latent", schedule.T)
    rec = SamplerTrace() if trace else None
    z = z_T
    with nt.no_grad():
        for t in range(schedule.T, 0, -1):
            z_next, z0 = _ddim_step(eps_model, z, t, cond, schedule)
            _require_finite(z_next, "sampler iterate", t)
            if rec is not None:
                rec.steps.append((t, z.data, z0.data))
            z = z_next
    return z, rec


def _inverse_coefs(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    ab_t, ab_prev = float(schedule.ab(t)), float(schedule.ab(t - 1))
    a = math.sqrt(ab_t) / math.sqrt(ab_prev)
    b = math.sqrt(1 - ab_t) - math.sqrt(ab_t) * math.sqrt(1 - ab_prev) / math.sqrt(ab_prev)
    return a, b


def inversion_rhs(eps_model: EpsModel, z_prev: Tensor, z_t: Tensor, t: int, cond,
                  schedule: NoiseSchedule) -> Tensor:
    """Right-hand side of the implicit inversion equation, eps evaluated at ``z_t``."""
    a, b = _inverse_coefs(t, schedule)
    return a * z_prev + b * eps_model(z_t, t, cond)


def invert_step(eps_model: EpsModel, z_prev: Tensor, t: int, cond, schedule: NoiseSchedule,
                mode: str = "fixed-point", k: int = 3, damping: float = 1.0) -> Tensor:
    """z_{t-1} -> z_t.  ``approx`` evaluates eps at (z_{t-1}, t); ``fixed-point``
    then applies k damped iterations of z <- (1-d) z + d * rhs(z)."""
    _check_t(t, schedule)
    z = inversion_rhs(eps_model, z_prev, z_prev, t, cond, schedule)
    if mode == "approx":
        return z
    if mode != "fixed-point":
        raise ValueError(f"unknown inversion mode {mode!r}")
    if k < 1:
        raise ValueError("fixed-point inversion needs k >= 1")
    for _ in range(k):
        rhs = inversion_rhs(eps_model, z_prev, z, t, cond, schedule)
        z = rhs if damping == 1.0 else (1 - damping) * z + damping * rhs
    return z


def ddim_invert(eps_model: EpsModel, z0: Tensor, cond, schedule: NoiseSchedule,
                mode: str = "fixed-point", k: int = 3, damping: float = 1.0) -> Tensor:
    """Map a clean latent to the z_T that DDIM sampling sends back to it."""
    _require_finite(z0, "clean latent", 0)
    z = z0
    with nt.no_grad():
        for t in range(1, schedule.T + 1):
            z = invert_step(eps_model, z, t, cond, schedule, mode, k, damping)
            _require_finite(z, "inversion iterate", t)
    return z


def counterfactual(eps_model: EpsModel, z0: Tensor, cond, target_cond, schedule: NoiseSchedule,
                   mode: str = "fixed-point", k: int = 3, autoencoder=None,
                   z_T: Tensor | None = None) -> Tensor:
    """Invert under ``cond`` then sample under ``target_cond``.

    Returns a latent, or an image when an autoencoder is given.  A precomputed
    ``z_T`` skips the inversion (several targets per source share it).
    """
    if z_T is None:
        z_T = ddim_invert(eps_model, z0, cond, schedule, mode, k)
    out, _ = ddim_sample(eps_model, z_T, target_cond, schedule)
    if autoencoder is not None:
        with nt.no_grad():
            return autoencoder.decode(out)
    return out


def relative_l2(a, b) -> np.ndarray:
    """Per-sample ||a - b|| / ||b||."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    n = a.shape[0]
    return np.linalg.norm((a - b).reshape(n, -1), axis=1) / np.linalg.norm(b.reshape(n, -1), axis=1)
