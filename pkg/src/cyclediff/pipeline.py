"""Experiment plumbing shared by the CLI, the demos and the acceptance suite:
datasets, model construction, checkpoint conversion, resumable training."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .autoencoder import Autoencoder, IdentityAutoencoder, train_autoencoder
from .cdm import TrainingData, TrainLog, TrainState, train
from .checkpoint import Checkpoint, CheckpointError
from .conditions import ConditionBatch
from .config import RunConfig, config_from_text
from .denoiser import Denoiser
from .metrics import GenerativeModel, Predictor, PredictorPair, train_predictors
from .ndtensor import AdamState, Rng, Tensor
from .phantom import render_batch, sample_dataset

logger = logging.getLogger(__name__)

# child-stream indices of the run seed
_DENOISER_INIT, _TRAIN_STREAM, _AE_STREAM, _PREDICTOR_STREAM, _FINETUNE_STREAM = 0, 1, 2, 3, 4
# dataset seeds are fixed so runs with different seeds share data
DATA_SEED, VAL_SEED, PREDICTOR_TRAIN_SEED, PREDICTOR_VAL_SEED = 11, 12, 13, 14


def output_path(cfg: RunConfig, command: str, suffix: str) -> str:
    """out_dir/<command>-<fingerprint[:12]>-s<seed><suffix>."""
    return os.path.join(cfg.out_dir, f"{command}-{cfg.fingerprint()[:12]}-s{cfg.seed}{suffix}")


def phantom_set(n: int, seed: int, cfg: RunConfig, distribution: str | None = None):
    specs = sample_dataset(n, seed, distribution or cfg.age_distribution, cfg.image_size)
    return specs, render_batch(specs), ConditionBatch.of(s.condition for s in specs)


# -- autoencoder --------------------------------------------------------------

def make_autoencoder(cfg: RunConfig):
    """Identity stand-in, or a freshly trained learned autoencoder."""
    if cfg.ae_mode == "identity":
        return IdentityAutoencoder(cfg.image_size)
    _, images, _ = phantom_set(cfg.n_train, DATA_SEED, cfg, "uniform")
    rng = Rng(cfg.seed).child(_AE_STREAM)
    model, _ = train_autoencoder(images, cfg.autoencoder(), cfg.ae_steps, rng,
                                 batch_size=cfg.ae_batch_size, lr=cfg.ae_lr)
    return model


def encode_dataset(autoencoder, images: np.ndarray, cond: ConditionBatch, batch_size: int = 64) -> TrainingData:
    if isinstance(autoencoder, IdentityAutoencoder):
        return TrainingData((images * 2.0 - 1.0).astype(np.float32), cond)
    means, logvars = [], []
    from .ndtensor import no_grad
    with no_grad():
        for i in range(0, len(images), batch_size):
            m, lv = autoencoder.encode(Tensor(images[i:i + batch_size]))
            means.append(m.data)
            logvars.append(lv.data)
    return TrainingData(np.concatenate(means), cond, np.concatenate(logvars))


def training_data(cfg: RunConfig, autoencoder) -> TrainingData:
    _, images, cond = phantom_set(cfg.n_train, DATA_SEED, cfg)
    return encode_dataset(autoencoder, images, cond)


# -- state <-> checkpoint -----------------------------------------------------

def new_state(cfg: RunConfig) -> TrainState:
    root = Rng(cfg.seed)
    model = Denoiser.init(cfg.denoiser(), root.child(_DENOISER_INIT))
    return TrainState.fresh(model, root.child(_TRAIN_STREAM).seed)


def start_finetune(state: TrainState, cfg: RunConfig) -> TrainState:
    """Fine-tuning started from a pretrained checkpoint draws from a stream of
    the current run seed, so seeds differ even when they share the checkpoint."""
    state = state.copy()
    state.rng = Rng(cfg.seed).child(_FINETUNE_STREAM)
    return state


def state_to_checkpoint(state: TrainState, cfg: RunConfig, autoencoder=None) -> Checkpoint:
    ck = Checkpoint(cfg.fingerprint(), cfg.canonical_text(), state.phase, cfg.schedule, cfg.timesteps,
                    state.rng.get_state())
    ck.meta = {"kind": "denoiser", "seed": cfg.seed, "step": state.step, "phase_steps": state.phase_steps,
               "adam_step": state.opt.step, "adam_skipped": state.opt.skipped, "window": state.window,
               "ae_mode": cfg.ae_mode}
    ck.add_group("denoiser", state.model.params)
    ck.add_group("adam.m", state.opt.m)
    ck.add_group("adam.v", state.opt.v)
    if isinstance(autoencoder, Autoencoder):
        ck.add_group("ae", autoencoder.params)
    return ck


def checkpoint_config(ck: Checkpoint) -> RunConfig:
    return config_from_text(ck.config_text)


def state_from_checkpoint(ck: Checkpoint) -> tuple[TrainState, object, RunConfig]:
    """(TrainState, autoencoder, config) stored in a denoiser checkpoint."""
    if ck.meta.get("kind") != "denoiser":
        raise CheckpointError(f"expected a denoiser checkpoint, found {ck.meta.get('kind')!r}")
    cfg = checkpoint_config(ck)
    params = {k: Tensor(v) for k, v in ck.group("denoiser").items()}
    model = Denoiser(cfg.denoiser(), params)
    opt = AdamState(ck.meta["adam_step"], ck.group("adam.m"), ck.group("adam.v"), ck.meta["adam_skipped"])
    state = TrainState(model, opt, Rng.from_state(ck.rng_state), ck.phase, ck.meta["step"],
                       dict(ck.meta["phase_steps"]), [list(w) for w in ck.meta["window"]])
    ae_params = ck.group("ae")
    if cfg.ae_mode == "learned":
        if not ae_params:
            raise CheckpointError("checkpoint lacks the learned autoencoder")
        ae = Autoencoder(cfg.autoencoder(), {k: Tensor(v) for k, v in ae_params.items()})
    else:
        ae = IdentityAutoencoder(cfg.image_size)
    return state, ae, cfg


def generative_model(ck: Checkpoint) -> GenerativeModel:
    state, ae, cfg = state_from_checkpoint(ck)
    return GenerativeModel(state.model, cfg.noise_schedule(), ae)


def predictors_to_checkpoint(pair: PredictorPair, cfg: RunConfig) -> Checkpoint:
    ck = Checkpoint(cfg.fingerprint(), cfg.canonical_text(), "predictors", cfg.schedule, cfg.timesteps)
    ck.meta = {"kind": "predictors", "seed": cfg.seed, "diagnostics": pair.diagnostics}
    ck.add_group("age", pair.age.params)
    ck.add_group("sex", pair.sex.params)
    return ck


def predictors_from_checkpoint(ck: Checkpoint) -> PredictorPair:
    if ck.meta.get("kind") != "predictors":
        raise CheckpointError(f"expected a predictor checkpoint, found {ck.meta.get('kind')!r}")
    age = Predictor("age", {k: Tensor(v) for k, v in ck.group("age").items()})
    sex = Predictor("sex", {k: Tensor(v) for k, v in ck.group("sex").items()})
    return PredictorPair(age, sex, dict(ck.meta["diagnostics"]))


def fit_predictors(cfg: RunConfig) -> PredictorPair:
    _, tr_img, tr_cond = phantom_set(cfg.predictor_n_train, PREDICTOR_TRAIN_SEED, cfg, "uniform")
    _, va_img, va_cond = phantom_set(cfg.predictor_n_val, PREDICTOR_VAL_SEED, cfg, "uniform")
    rng = Rng(cfg.seed).child(_PREDICTOR_STREAM)
    return train_predictors(tr_img, tr_cond, va_img, va_cond, rng, steps=cfg.predictor_steps,
                            max_rounds=cfg.predictor_rounds)


# -- resumable training -------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    checkpoint_path: str
    log_path: str


def run_phase(cfg: RunConfig, phase: str, state: TrainState, data: TrainingData, autoencoder,
              steps: int | None = None, force: bool = False, ckpt_path: str | None = None,
              log_path: str | None = None) -> TrainResult:
    """Train ``phase`` up to its configured step count (or ``steps`` more),
    writing a checkpoint every ``checkpoint_every`` steps and at the end."""
    total = cfg.pretrain_steps if phase == "pretrain" else cfg.finetune_steps
    done = state.phase_steps.get(phase, 0)
    remaining = max(total - done, 0) if steps is None else steps
    ckpt_path = ckpt_path or output_path(cfg, f"train-{phase}", ".ckpt")
    log_path = log_path or output_path(cfg, f"train-{phase}", ".csv")
    os.makedirs(os.path.dirname(os.path.abspath(ckpt_path)), exist_ok=True)
    log = TrainLog(log_path)
    schedule = cfg.noise_schedule()
    tdcfg = cfg.cdm()
    if remaining == 0:
        state = train(phase, state, tdcfg, data, schedule, steps=0, log=log, seed=cfg.seed, force=force)
    while remaining > 0:
        chunk = min(remaining, cfg.checkpoint_every - state.phase_steps.get(phase, 0) % cfg.checkpoint_every)
        state = train(phase, state, tdcfg, data, schedule, steps=chunk, log=log, seed=cfg.seed, force=force)
        remaining -= chunk
        state_to_checkpoint(state, cfg, autoencoder).save(ckpt_path)
    state_to_checkpoint(state, cfg, autoencoder).save(ckpt_path)
    return TrainResult(state, ckpt_path, log_path)
