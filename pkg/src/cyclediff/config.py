"""Run configuration: one flat ``key = value`` text file covering every module.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected.  The canonical form (sorted ``key=value`` lines with
normalised values) is embedded in checkpoints and reports, and its SHA-256 is
the config fingerprint.  ``out_dir`` and ``seed`` are left out of the
fingerprint: they choose where outputs go and which run it is, and both
already appear in every output path.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace

from .autoencoder import AutoencoderConfig
from .cdm import CdmConfig
from .denoiser import DenoiserConfig
from .diffusion import NoiseSchedule, make_schedule


class ConfigError(ValueError):
    pass


def default_seed() -> int:
    raw = os.environ.get("CDM_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"CDM_SEED must be an integer, got {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    # phantom data
    image_size: int = 64
    n_train: int = 2000
    n_val: int = 200
    age_distribution: str = "uniform"
    # autoencoder ("identity" = pixel space)
    ae_mode: str = "identity"
    ae_channels: tuple = (16, 32)
    ae_latent_channels: int = 4
    ae_kl_weight: float = 1e-7
    ae_steps: int = 1000
    ae_batch_size: int = 16
    ae_lr: float = 2e-3
    # denoiser
    unet_channels: tuple = (32, 64)
    time_basis: int = 32
    embed_dim: int = 64
    groups: int = 8
    # noise schedule
    schedule: str = "linear-beta"  # cosine makes the last inversion step ill-conditioned
    timesteps: int = 256
    # cdm training (names mirror CdmConfig)
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
    checkpoint_every: int = 1000
    # evaluation
    inversion_mode: str = "fixed-point"
    inversion_k: int = 3
    eval_counterfactual_n: int = 50
    eval_direct_n: int = 128
    predictor_steps: int = 1500
    predictor_rounds: int = 3
    predictor_n_train: int = 2000
    predictor_n_val: int = 200
    # run
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        try:
            self.cdm()
            self.denoiser()
            self.autoencoder()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        if self.ae_mode not in ("identity", "learned"):
            raise ConfigError("ae_mode must be identity or learned")
        if self.schedule not in ("cosine", "linear-beta"):
            raise ConfigError("schedule must be cosine or linear-beta")
        if self.inversion_mode not in ("fixed-point", "approx"):
            raise ConfigError("inversion_mode must be fixed-point or approx")
        if self.age_distribution not in ("uniform", "skewed"):
            raise ConfigError("age_distribution must be uniform or skewed")
        if self.image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        for k in ("n_train", "n_val", "timesteps", "inversion_k", "log_every", "checkpoint_every"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")

    # -- sub-configs ----------------------------------------------------------

    def cdm(self) -> CdmConfig:
        return CdmConfig(**{f.name: getattr(self, f.name) for f in fields(CdmConfig)})

    def denoiser(self) -> DenoiserConfig:
        in_ch = 1 if self.ae_mode == "identity" else self.ae_latent_channels
        return DenoiserConfig(in_channels=in_ch, channels=tuple(self.unet_channels), time_basis=self.time_basis,
                              embed_dim=self.embed_dim, groups=self.groups, num_timesteps=self.timesteps)

    def autoencoder(self) -> AutoencoderConfig:
        return AutoencoderConfig(image_size=self.image_size, channels=tuple(self.ae_channels),
                                 latent_channels=self.ae_latent_channels, kl_weight=self.ae_kl_weight)

    def noise_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule, self.timesteps)

    # -- text form ------------------------------------------------------------

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def canonical_text(self, exclude: tuple[str, ...] = ()) -> str:
        return "".join(f"{k}={format_value(getattr(self, k))}\n" for k in sorted(self.keys()) if k not in exclude)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_text(("out_dir", "seed")).encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: parse_value(k, v) for k, v in overrides.items()})

    def describe(self) -> str:
        return "\n".join(f"  {k} = {format_value(getattr(self, k))}" for k in self.keys())


def _field_types() -> dict[str, type]:
    defaults = RunConfig.__dataclass_fields__
    return {k: type(f.default) for k, f in defaults.items()}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(key: str, raw: str):
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = types[key]
    s = str(raw).strip()
    try:
        if kind is bool:
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s)
        if kind is float:
            return float(s)
        if kind is tuple:
            return tuple(int(x) for x in s.split(",") if x.strip())
        return s
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (p.strip() for p in line.split("=", 1))
        if k not in RunConfig.keys():
            raise ConfigError(f"line {n}: unknown config key {k!r}")
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``overrides``; ``seed`` defaults to $CDM_SEED."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            with open(path) as f:
                values.update(parse_config_text(f.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    values.update(overrides or {})
    if "seed" not in values:
        values["seed"] = str(default_seed())
    return RunConfig().with_overrides(values)


def config_from_text(text: str) -> RunConfig:
    return RunConfig().with_overrides(parse_config_text(text))
