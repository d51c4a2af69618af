"""Cycle-consistent fine-tuning of the conditional denoiser.

Training runs in two phases.  ``pretrain`` minimises the ordinary
noise-prediction loss under the true condition.  ``finetune`` minimises

    ldm(eps, z_t, t, c') + ldm(eps, z~_t, t, c) + lambda * cycle

where c' is a drawn counterfactual condition, z~_0 is the single-step clean
estimate of z_t under c', z~_t re-noises z~_0 with the same eps, and the cycle
term compares z_0 with the clean estimate of z~_0 under the original c.
One t and one eps per sample are shared by all three terms.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import layers as L
from . import ndtensor as nt
from .conditions import AGE_MAX, AGE_MIN, Condition, ConditionBatch, Sex
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, forward_noise, noise_mse, z0_from_eps
from .ndtensor import AdamState, GradientTape, Rng, Tensor, adam_step
from .phantom import decade_bin

logger = logging.getLogger(__name__)

AGE_DELTAS = (-60, -30, -10, 10, 30, 60)
PHASES = ("pretrain", "finetune")
LOG_FIELDS = ("step", "phase", "loss_total", "ldm_cf", "ldm_fact", "cycle", "lr", "seed")


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, components: dict):
        super().__init__(f"non-finite loss at step {step}: {components}")
        self.step = step
        self.components = components


class PreconditionError(RuntimeError):
    pass


@dataclass(frozen=True)
class CdmConfig:
    cycle_lambda: float = 1.0
    cycle_norm: str = "L1"
    counterfactual_sampler: str = "age-delta"
    pretrain_steps: int = 5000
    finetune_steps: int = 500
    t_sampling: str = "uniform"
    renoise_for_cycle: bool = False
    batch_size: int = 8
    lr_pretrain: float = 5e-4
    lr_finetune: float = 1e-4
    log_every: int = 50

    def __post_init__(self):
        if self.cycle_lambda < 0:
            raise ValueError("cycle_lambda must be >= 0")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.cycle_norm not in ("L1", "L2"):
            raise ValueError("cycle_norm must be L1 or L2")
        if self.counterfactual_sampler not in ("age-delta", "identity"):
            raise ValueError("counterfactual_sampler must be age-delta or identity")
        if self.t_sampling != "uniform":
            raise ValueError("only uniform timestep sampling is supported")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


# -- condition and batch sampling ---------------------------------------------

def sample_counterfactual_condition(c: Condition, rng: Rng) -> Condition:
    """Shift age by a delta drawn from {±10, ±30, ±60} (redrawing deltas that
    leave [0, 100]) and flip sex with probability 1/2."""
    while True:
        delta = AGE_DELTAS[int(rng.integers(0, len(AGE_DELTAS)))]
        if AGE_MIN <= c.age + delta <= AGE_MAX:
            break
    sex = Sex(1 - int(c.sex)) if rng.random() < 0.5 else c.sex
    return Condition(c.age + delta, sex)


def counterfactual_batch(cond: ConditionBatch, rng: Rng, sampler: str = "age-delta") -> ConditionBatch:
    if sampler == "identity":
        return cond
    return ConditionBatch.of(sample_counterfactual_condition(cond[i], rng) for i in range(len(cond)))


def balanced_batch(ages: Sequence[float], batch_size: int, rng: Rng) -> np.ndarray:
    """Indices drawn decade-balanced: bin uniform over non-empty decades, then
    a member uniform within the bin, with replacement."""
    ages = np.asarray(ages)
    if len(ages) == 0:
        raise ValueError("empty dataset")
    bins = np.array([decade_bin(a) for a in ages])
    members = [np.flatnonzero(bins == b) for b in range(10)]
    members = [m for m in members if len(m)]
    out = np.empty(batch_size, dtype=np.int64)
    for i in range(batch_size):
        m = members[int(rng.integers(0, len(members)))]
        out[i] = m[int(rng.integers(0, len(m)))]
    return out


def sample_timesteps(rng: Rng, n: int, schedule: NoiseSchedule, kind: str = "uniform") -> np.ndarray:
    if kind != "uniform":
        raise ValueError(f"unknown timestep distribution {kind!r}")
    return rng.integers(1, schedule.T + 1, size=n)


# -- losses -------------------------------------------------------------------

def _norm(diff: Tensor, kind: str) -> Tensor:
    if kind == "L1":
        return nt.mean(nt.abs(diff))
    return nt.mean(diff ** 2)


def cycle_loss(eps_model, z0: Tensor, t, c, c_prime, eps: Tensor, schedule: NoiseSchedule,
               cfg: CdmConfig, eps_prime: Tensor | None = None) -> Tensor:
    """Distance between z0 and its counterfactual-then-factual reconstruction."""
    z_t = forward_noise(z0, t, eps, schedule)
    z0_cf = z0_from_eps(z_t, eps_model(z_t, t, c_prime), t, schedule)
    return _cycle_from(eps_model, z0, z0_cf, t, c, schedule, cfg, eps_prime)


def _cycle_from(eps_model, z0, z0_cf, t, c, schedule, cfg, eps_prime):
    if cfg.renoise_for_cycle:
        if eps_prime is None:
            raise ValueError("renoise_for_cycle needs a fresh eps_prime")
        inner = forward_noise(z0_cf, t, eps_prime, schedule)
    else:
        inner = z0_cf
    outer = z0_from_eps(inner, eps_model(inner, t, c), t, schedule)
    return _norm(z0 - outer, cfg.cycle_norm)


def cdm_loss(eps_model, z0: Tensor, t, c, c_prime, eps: Tensor, schedule: NoiseSchedule,
             cfg: CdmConfig, eps_prime: Tensor | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Composite objective; returns the total and the three component tensors."""
    z_t = forward_noise(z0, t, eps, schedule)
    eps_cf = eps_model(z_t, t, c_prime)
    ldm_cf = noise_mse(eps, eps_cf)
    z0_cf = z0_from_eps(z_t, eps_cf, t, schedule)
    z_t_cf = forward_noise(z0_cf, t, eps, schedule)
    ldm_fact = noise_mse(eps, eps_model(z_t_cf, t, c))
    cyc = _cycle_from(eps_model, z0, z0_cf, t, c, schedule, cfg, eps_prime)
    total = ldm_cf + ldm_fact + cyc * cfg.cycle_lambda if cfg.cycle_lambda else ldm_cf + ldm_fact
    return total, {"ldm_cf": ldm_cf, "ldm_fact": ldm_fact, "cycle": cyc}


# -- training -----------------------------------------------------------------

@dataclass
class TrainingData:
    """Latent training set: per-sample means (and log-variances in autoencoder mode)."""

    latents: np.ndarray
    conditions: ConditionBatch
    logvars: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.latents)

    def draw(self, ids: np.ndarray, rng: Rng) -> Tensor:
        z = self.latents[ids]
        if self.logvars is not None:
            z = z + np.exp(0.5 * self.logvars[ids]) * rng.normal(z.shape)
        return Tensor(z)


@dataclass
class TrainState:
    model: Denoiser
    opt: AdamState
    rng: Rng
    phase: str = "init"
    step: int = 0
    phase_steps: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    window: list = field(default_factory=list)  # component rows since the last log line
    records: list = field(default_factory=list)  # per-step rows of this process (not persisted)

    @classmethod
    def fresh(cls, model: Denoiser, seed: int) -> "TrainState":
        return cls(model, AdamState.init(model.params), Rng(seed))

    def copy(self) -> "TrainState":
        return replace(self, rng=Rng.from_state(self.rng.get_state()),
                       phase_steps=dict(self.phase_steps), window=list(self.window),
                       records=list(self.records))


class TrainLog:
    """Append-only CSV with one row per ``log_every`` steps."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_FIELDS)

    def write(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row.get(k, "") for k in LOG_FIELDS])


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def train_step(state: TrainState, phase: str, cfg: CdmConfig, data: TrainingData,
               schedule: NoiseSchedule) -> dict:
    """One optimizer step in place on ``state``; returns the loss components."""
    rng = state.rng
    ids = balanced_batch(data.conditions.ages, cfg.batch_size, rng)
    z0 = data.draw(ids, rng)
    t = sample_timesteps(rng, cfg.batch_size, schedule, cfg.t_sampling)
    eps = rng.normal_tensor(z0.shape)
    cond = data.conditions.take(ids)
    c_prime = counterfactual_batch(cond, rng, cfg.counterfactual_sampler) if phase == "finetune" else None
    eps_prime = rng.normal_tensor(z0.shape) if phase == "finetune" and cfg.renoise_for_cycle else None

    params = L.trainable(state.model.params)
    model = state.model.with_params(params)
    with GradientTape() as tape:
        if phase == "pretrain":
            z_t = forward_noise(z0, t, eps, schedule)
            loss = noise_mse(eps, model(z_t, t, cond))
            comps = {"ldm_cf": None, "ldm_fact": loss.item(), "cycle": None}
        else:
            loss, parts = cdm_loss(model, z0, t, cond, c_prime, eps, schedule, cfg, eps_prime)
            comps = {k: v.item() for k, v in parts.items()}
    total = loss.item()
    comps["loss_total"] = total
    step_no = state.phase_steps[phase] + 1
    if not np.isfinite(total):
        raise NumericalAbort(step_no, comps)
    grads = tape.backward(loss)
    lr = cfg.lr_pretrain if phase == "pretrain" else cfg.lr_finetune
    new_params, state.opt = adam_step(params, grads.for_params(params), state.opt, lr=lr)
    state.model = state.model.with_params({k: Tensor(v.data) for k, v in new_params.items()})
    state.step += 1
    state.phase_steps[phase] = step_no
    return comps


def train(phase: str, state: TrainState, cfg: CdmConfig, data: TrainingData, schedule: NoiseSchedule,
          steps: int | None = None, log: TrainLog | None = None, seed: int = 0,
          force: bool = False) -> TrainState:
    """Run ``steps`` (default: the phase's configured count) optimizer steps.

    Returns a new state; the input state is left untouched.  Fine-tuning
    refuses to start from a state that never pretrained unless ``force``.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    if phase == "finetune" and state.phase_steps.get("pretrain", 0) == 0 and not force:
        raise PreconditionError("finetune needs a pretrained state (pass force=True to override)")
    steps = (cfg.pretrain_steps if phase == "pretrain" else cfg.finetune_steps) if steps is None else steps
    state = state.copy()
    if state.phase != phase:
        state.window = []
    state.phase = phase
    lr = cfg.lr_pretrain if phase == "pretrain" else cfg.lr_finetune
    for _ in range(steps):
        comps = train_step(state, phase, cfg, data, schedule)
        step_no = state.phase_steps[phase]
        state.records.append({"step": step_no, "phase": phase, **comps})
        state.window.append([comps["loss_total"], comps["ldm_cf"], comps["ldm_fact"], comps["cycle"]])
        if step_no % cfg.log_every == 0:
            means = [None if w[0] is None else float(np.mean(w)) for w in
                     ([r[i] for r in state.window] for i in range(4))]
            row = {"step": step_no, "phase": phase, "loss_total": _fmt(means[0]), "ldm_cf": _fmt(means[1]),
                   "ldm_fact": _fmt(means[2]), "cycle": _fmt(means[3]), "lr": repr(lr), "seed": seed}
            if log is not None:
                log.write(row)
            logger.info("%s step %d loss %.5f", phase, step_no, means[0])
            state.window = []
    return state


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean; entry i averages values[i-window+1 .. i] (fewer at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
