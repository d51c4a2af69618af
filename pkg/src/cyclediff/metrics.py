"""Evaluation: learned age/sex predictors, age MAE, sex accuracy, MS-SSIM
diversity, Fréchet feature distance, and the per-delta counterfactual table.

Images are ``[n,1,H,W]`` arrays in [0,1].  Age is measured twice everywhere,
once by the learned regressor and once by :func:`~cyclediff.phantom.oracle_age`.
"""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import ndtensor as nt
from .cdm import AGE_DELTAS
from .conditions import AGE_MAX, AGE_MIN, ConditionBatch
from .diffusion import NoiseSchedule, ddim_invert, ddim_sample
from .ndtensor import AdamState, GradientTape, Rng, Tensor, adam_step
from .phantom import PhantomSpec, oracle_age, render_batch

logger = logging.getLogger(__name__)

PREDICTOR_CHANNELS = (8, 16, 32, 64)
MAE_GATE = 5.0
ACCURACY_GATE = 0.9
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class PredictorGateError(RuntimeError):
    """Predictors too weak to be trusted as evaluators."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


class FrechetError(ValueError):
    def __init__(self, message: str, condition_number: float | None = None):
        super().__init__(message if condition_number is None else f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


# -- predictors ---------------------------------------------------------------

@dataclass
class Predictor:
    """CNN: 4 levels of 2x(conv, group norm, ReLU) + 2x2 average pool, global
    average pool to a 64-d feature, linear head to one scalar.

    ``kind="age"`` outputs age/100 (trained with MSE); ``kind="sex"`` outputs a
    logit for male (trained with binary cross-entropy).
    """

    kind: str
    params: dict[str, Tensor] = field(repr=False)
    channels: tuple[int, ...] = PREDICTOR_CHANNELS
    groups: int = 4

    @classmethod
    def init(cls, kind: str, rng: Rng, channels=PREDICTOR_CHANNELS, groups: int = 4) -> "Predictor":
        if kind not in ("age", "sex"):
            raise ValueError(f"unknown predictor kind {kind!r}")
        p: dict[str, Tensor] = {}
        cin = 1
        for i, c in enumerate(channels):
            L.init_conv(p, rng.child(2 * i), f"l{i}.a", cin, c)
            L.init_norm(p, f"l{i}.a.norm", c)
            L.init_conv(p, rng.child(2 * i + 1), f"l{i}.b", c, c)
            L.init_norm(p, f"l{i}.b.norm", c)
            cin = c
        L.init_linear(p, rng.child(99), "head", cin, 1)
        return cls(kind, p, tuple(channels), groups)

    def with_params(self, params) -> "Predictor":
        return Predictor(self.kind, params, self.channels, self.groups)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def features_tensor(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.channels)):
            for part in ("a", "b"):
                name = f"l{i}.{part}"
                h = nt.relu(L.norm(self.params, f"{name}.norm", L.conv(self.params, name, h), self.groups))
            h = nt.avg_pool(h, 2)
        return nt.mean(nt.mean(h, axis=3), axis=2)

    def forward(self, x: Tensor) -> Tensor:
        """[b,1] raw output (scaled age or sex logit)."""
        return L.linear(self.params, "head", self.features_tensor(x))

    def _batched(self, images, fn, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        out = []
        with nt.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(np.asarray(fn(Tensor(images[i:i + batch_size])).data, dtype=np.float64))
        return np.concatenate(out)

    def features(self, images, batch_size: int = 64) -> np.ndarray:
        return self._batched(images, self.features_tensor, batch_size)

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        """Ages in years (age head) or male probabilities (sex head)."""
        raw = self._batched(images, self.forward, batch_size)[:, 0]
        if self.kind == "age":
            return raw * 100.0
        return 1.0 / (1.0 + np.exp(-raw))


def _predictor_loss(model: Predictor, x: Tensor, ages: np.ndarray, sexes: np.ndarray) -> Tensor:
    out = model.forward(x)
    if model.kind == "age":
        return nt.mean((out - Tensor((ages / 100.0)[:, None])) ** 2)
    return nt.bce_with_logits(out, sexes[:, None].astype(np.float64))


def fit_predictor(model: Predictor, images: np.ndarray, cond: ConditionBatch, steps: int, rng: Rng,
                  batch_size: int = 32, lr: float = 2e-3) -> tuple[Predictor, list[float]]:
    opt = AdamState.init(model.params)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        params = L.trainable(model.params)
        m = model.with_params(params)
        with GradientTape() as tape:
            loss = _predictor_loss(m, Tensor(images[idx]), cond.ages[idx], cond.sexes[idx])
        grads = tape.backward(loss)
        new_params, opt = adam_step(params, grads.for_params(params), opt, lr=lr)
        model = model.with_params(new_params)
        losses.append(loss.item())
    return model, losses


@dataclass
class PredictorPair:
    age: Predictor
    sex: Predictor
    diagnostics: dict = field(default_factory=dict)


def train_predictors(train_images: np.ndarray, train_cond: ConditionBatch, val_images: np.ndarray,
                     val_cond: ConditionBatch, rng: Rng, steps: int = 1500, max_rounds: int = 3,
                     batch_size: int = 32, lr: float = 2e-3) -> PredictorPair:
    """Train both heads in rounds of ``steps`` until they pass the gate
    (held-out MAE < 5 years, accuracy > 0.9) or ``max_rounds`` is exhausted."""
    age = Predictor.init("age", rng.child(0))
    sex = Predictor.init("sex", rng.child(1))
    diag: dict = {}
    for rnd in range(1, max_rounds + 1):
        age_ok = diag.get("val_mae", np.inf) < MAE_GATE
        sex_ok = diag.get("val_accuracy", 0.0) > ACCURACY_GATE
        if not age_ok:
            age, _ = fit_predictor(age, train_images, train_cond, steps, rng.child(10 + rnd), batch_size, lr)
        if not sex_ok:
            sex, _ = fit_predictor(sex, train_images, train_cond, steps, rng.child(20 + rnd), batch_size, lr)
        diag = {"rounds": rnd, "steps_per_round": steps,
                "val_mae": age_mae(age, val_images, val_cond.ages),
                "val_accuracy": sex_accuracy(sex, val_images, val_cond.sexes),
                "train_mae": age_mae(age, train_images, train_cond.ages),
                "n_train": len(train_images), "n_val": len(val_images)}
        logger.info("predictors round %d: %s", rnd, diag)
        if diag["val_mae"] < MAE_GATE and diag["val_accuracy"] > ACCURACY_GATE:
            return PredictorPair(age, sex, diag)
    raise PredictorGateError("predictor gate not met", diag)


def check_gate(pair: PredictorPair) -> None:
    d = pair.diagnostics
    if not (d.get("val_mae", np.inf) < MAE_GATE and d.get("val_accuracy", 0.0) > ACCURACY_GATE):
        raise PredictorGateError("predictors below the evaluation gate", d)


def _predict(predictor, images) -> np.ndarray:
    if hasattr(predictor, "predict"):
        return np.asarray(predictor.predict(images), dtype=np.float64)
    return np.asarray(predictor(images), dtype=np.float64)


def age_mae(predictor, images, target_ages) -> float:
    """Mean |predicted age - target| in years."""
    target = np.asarray(target_ages, dtype=np.float64)
    if len(target) == 0:
        raise ValueError("age_mae of an empty set")
    return float(np.mean(np.abs(_predict(predictor, images) - target)))


def sex_accuracy(classifier, images, target_sexes) -> float:
    """Fraction of 0.5-thresholded male probabilities that match the targets."""
    target = np.asarray(target_sexes).astype(np.int64)
    if len(target) == 0:
        raise ValueError("sex_accuracy of an empty set")
    return float(np.mean((_predict(classifier, images) >= 0.5).astype(np.int64) == target))


# -- MS-SSIM ------------------------------------------------------------------

def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _filter(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, valid region only."""
    sw = np.lib.stride_tricks.sliding_window_view
    h = sw(x, SSIM_WINDOW, axis=1) @ _WINDOW
    return sw(h, SSIM_WINDOW, axis=0) @ _WINDOW


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim_weights(scales: int) -> np.ndarray:
    w = np.array(MS_SSIM_WEIGHTS[:scales], dtype=np.float64)
    return w / w.sum()


def _pyramid(img, scales: int) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per scale: (image, local mean, local second moment)."""
    x = np.asarray(img, dtype=np.float64)
    x = x.reshape(x.shape[-2:])
    need = 2 ** (scales - 1) * SSIM_WINDOW
    if min(x.shape) < need:
        raise ValueError(f"ms_ssim with {scales} scales needs images of at least {need}x{need}")
    out = []
    for s in range(scales):
        if s:
            x = _downsample(x)
        out.append((x, _filter(x), _filter(x * x)))
    return out


def _ms_ssim_from(pa, pb, weights: np.ndarray, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    val = 1.0
    last = len(weights) - 1
    for s, ((xa, mua, qa), (xb, mub, qb)) in enumerate(zip(pa, pb)):
        var_a = qa - mua * mua
        var_b = qb - mub * mub
        cov = _filter(xa * xb) - mua * mub
        term = (2 * cov + c2) / (var_a + var_b + c2)
        if s == last:
            term = term * (2 * mua * mub + c1) / (mua * mua + mub * mub + c1)
        val *= max(float(np.mean(term)), 0.0) ** weights[s]
    return float(val)


def ms_ssim(a, b, scales: int = 3, data_range: float = 1.0) -> float:
    """Multi-scale SSIM: contrast-structure terms at every scale, luminance at
    the coarsest, combined as a weighted geometric mean.  Negative terms are
    clamped to 0 so the value lies in [0, 1]."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a)
    b = np.asarray(b.data if isinstance(b, Tensor) else b)
    if a.shape != b.shape:
        raise ValueError(f"ms_ssim shapes differ: {a.shape} vs {b.shape}")
    w = ms_ssim_weights(scales)
    return _ms_ssim_from(_pyramid(a, scales), _pyramid(b, scales), w, data_range)


def mean_pairwise_ms_ssim(images, scales: int = 3, data_range: float = 1.0) -> float:
    """Mean over all unordered pairs i < j, summed in row-major pair order."""
    images = np.asarray(images)
    n = len(images)
    if n < 2:
        raise ValueError("need at least two images")
    w = ms_ssim_weights(scales)
    pyr = [_pyramid(im, scales) for im in images]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += _ms_ssim_from(pyr[i], pyr[j], w, data_range)
    return total / (n * (n - 1) // 2)


# -- Fréchet distance ---------------------------------------------------------

NEG_EIG_TOL = 1e-6


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -NEG_EIG_TOL * max(1.0, abs(vals.max())):
        cond = abs(vals.max()) / max(abs(vals).min(), np.finfo(float).tiny)
        raise FrechetError(f"{what} has a negative eigenvalue {vals.min():.3g}", cond)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def frechet_distance(features_a, features_b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as tr(sqrt(R S_b R)) with
    R = sqrt(S_a), which is symmetric and shares the eigenvalues of S_a S_b.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    fa = fa[:, None] if fa.ndim == 1 else fa
    fb = fb[:, None] if fb.ndim == 1 else fb
    if fa.shape[1] != fb.shape[1]:
        raise ValueError("feature dimensions differ")
    d = fa.shape[1]
    if len(fa) <= d or len(fb) <= d:
        raise ValueError(f"each set needs more than {d} samples, got {len(fa)} and {len(fb)}")
    mu_a, s_a = gaussian_stats(fa)
    mu_b, s_b = gaussian_stats(fb)
    r = _psd_sqrt(s_a, "covariance A")
    cross = _psd_sqrt(r @ s_b @ r, "covariance product")
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2.0 * np.trace(cross))


# -- evaluation pipelines -----------------------------------------------------

def age_sweep(n: int, lo: float = 5.0, hi: float = 100.0) -> ConditionBatch:
    """Ages linear in [lo, hi], sexes alternating female/male."""
    ages = np.linspace(lo, hi, n) if n > 1 else np.array([lo])
    return ConditionBatch(ages.astype(np.float64), (np.arange(n) % 2).astype(np.int64))


def sweep_specs(n: int, seed: int, size: int = 64) -> list[PhantomSpec]:
    cond = age_sweep(n)
    rng = Rng(seed)
    return [PhantomSpec(cond[i], int(rng.integers(0, 2 ** 63 - 1)), size) for i in range(n)]


def oracle_ages(images) -> list[float | None]:
    return [oracle_age(im) for im in np.asarray(images)]


def _mae_with_unmeasurable(measured: list[float | None], target: np.ndarray) -> tuple[float, int]:
    keep = [i for i, m in enumerate(measured) if m is not None]
    if not keep:
        return float("nan"), len(measured)
    err = np.abs(np.array([measured[i] for i in keep]) - target[keep])
    return float(err.mean()), len(measured) - len(keep)


@dataclass
class GenerativeModel:
    """A denoiser bound to its schedule and (identity or learned) autoencoder."""

    eps_model: object
    schedule: NoiseSchedule
    autoencoder: object

    def encode(self, images: np.ndarray) -> Tensor:
        with nt.no_grad():
            mean, _ = self.autoencoder.encode(Tensor(images))
        return mean

    def decode(self, z: Tensor) -> np.ndarray:
        with nt.no_grad():
            return np.asarray(self.autoencoder.decode(z).data)

    def sample(self, z_T: Tensor, cond: ConditionBatch, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(cond), batch_size):
            sl = slice(i, i + batch_size)
            z, _ = ddim_sample(self.eps_model, Tensor(z_T.data[sl]), cond.take(sl), self.schedule)
            out.append(self.decode(z))
        return np.concatenate(out)

    def invert(self, z0: Tensor, cond: ConditionBatch, mode: str = "fixed-point", k: int = 3,
               batch_size: int = 64) -> Tensor:
        out = []
        for i in range(0, len(cond), batch_size):
            sl = slice(i, i + batch_size)
            out.append(ddim_invert(self.eps_model, Tensor(z0.data[sl]), cond.take(sl), self.schedule, mode, k).data)
        return Tensor(np.concatenate(out))


@dataclass
class MetricsReport:
    model: str
    fingerprint: str
    seeds: dict
    cycle_lambda: float | None = None
    age_mae: float | None = None           # regressor
    age_mae_oracle: float | None = None
    sex_accuracy: float | None = None
    fid: float | None = None
    fid_floor: float | None = None         # real-vs-real reference
    ms_ssim: float | None = None
    per_delta: dict = field(default_factory=dict)  # delta -> {mae_regressor, mae_oracle, n, ...}
    counts: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)       # per-sample records

    def __post_init__(self):
        if self.sex_accuracy is not None and not 0.0 <= self.sex_accuracy <= 1.0:
            raise ValueError("sex_accuracy outside [0,1]")
        if self.ms_ssim is not None and not 0.0 <= self.ms_ssim <= 1.0:
            raise ValueError("ms_ssim outside [0,1]")
        if self.fid is not None and self.fid < -1e-4:
            raise ValueError("negative Fréchet distance")

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        out = MetricsReport(self.model, self.fingerprint, {**self.seeds, **other.seeds}, self.cycle_lambda)
        for k in ("age_mae", "age_mae_oracle", "sex_accuracy", "fid", "fid_floor", "ms_ssim"):
            setattr(out, k, getattr(self, k) if getattr(self, k) is not None else getattr(other, k))
        out.per_delta = {**self.per_delta, **other.per_delta}
        out.counts = {**self.counts, **other.counts}
        out.rows = self.rows + other.rows
        return out

    def summary(self) -> str:
        def f(v, fmt="{:.4f}"):
            return "n/a" if v is None else fmt.format(v)
        lines = [f"model: {self.model}", f"fingerprint: {self.fingerprint}",
                 "seeds: " + ", ".join(f"{k}={v}" for k, v in sorted(self.seeds.items())),
                 f"cycle_lambda: {f(self.cycle_lambda, '{:g}')}",
                 f"age_mae_regressor: {f(self.age_mae)}", f"age_mae_oracle: {f(self.age_mae_oracle)}",
                 f"sex_accuracy: {f(self.sex_accuracy)}", f"fid: {f(self.fid)}",
                 f"fid_real_floor: {f(self.fid_floor)}", f"ms_ssim: {f(self.ms_ssim)}"]
        for k, v in sorted(self.counts.items()):
            lines.append(f"count_{k}: {v}")
        return "\n".join(lines) + "\n"

    def table3_rows(self) -> list[list]:
        return [[self.model, d, v["mae_regressor"], v["mae_oracle"], v["n"]]
                for d, v in sorted(self.per_delta.items())]

    def table3_csv(self) -> str:
        return table3_csv([self])

    def samples_csv(self) -> str:
        keys = ["kind", "index", "source_age", "sex", "target_age", "delta", "pred_age", "oracle_age", "pred_male"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow(["" if r.get(k) is None else r.get(k) for k in keys])
        return buf.getvalue()


def table3_csv(reports: list[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "delta", "mae_regressor", "mae_oracle", "n"])
    for rep in reports:
        for row in rep.table3_rows():
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4]])
    return buf.getvalue()


def comparison_summary(base: MetricsReport, other: MetricsReport) -> str:
    """Side-by-side per-delta oracle/regressor MAE with the difference other - base."""
    lines = [f"delta,{base.model}_oracle,{other.model}_oracle,diff_oracle,"
             f"{base.model}_regressor,{other.model}_regressor,diff_regressor"]
    for d in sorted(set(base.per_delta) & set(other.per_delta)):
        a, b = base.per_delta[d], other.per_delta[d]
        lines.append(f"{d},{a['mae_oracle']:.4f},{b['mae_oracle']:.4f},{b['mae_oracle'] - a['mae_oracle']:+.4f},"
                     f"{a['mae_regressor']:.4f},{b['mae_regressor']:.4f},"
                     f"{b['mae_regressor'] - a['mae_regressor']:+.4f}")
    wins = sum(other.per_delta[d]["mae_oracle"] < base.per_delta[d]["mae_oracle"]
               for d in set(base.per_delta) & set(other.per_delta))
    lines.append(f"# {other.model} lower oracle MAE on {wins} of {len(set(base.per_delta) & set(other.per_delta))} deltas")
    return "\n".join(lines) + "\n"


def counterfactual_table(model: GenerativeModel, specs: list[PhantomSpec], predictors: PredictorPair,
                         deltas=AGE_DELTAS, mode: str = "fixed-point", k: int = 3, name: str = "model",
                         fingerprint: str = "", seed: int = 0, batch_size: int = 64) -> MetricsReport:
    """Invert each source under its own condition once, then resample it at
    every in-range ``age + delta`` (sex unchanged)."""
    check_gate(predictors)
    src_images = render_batch(specs)
    src_cond = ConditionBatch.of(s.condition for s in specs)
    jobs = [(i, d) for i, s in enumerate(specs) for d in deltas
            if AGE_MIN <= s.condition.age + d <= AGE_MAX]
    used = sorted({i for i, _ in jobs})
    excluded = len(specs) - len(used)
    report = MetricsReport(name, fingerprint, {"eval": seed})
    report.counts = {"sources": len(specs), "excluded_sources": excluded, "pairs": len(jobs)}
    if not jobs:
        return report
    z_T = model.invert(model.encode(src_images[used]), src_cond.take(used), mode, k, batch_size)
    row_of = {i: r for r, i in enumerate(used)}
    tgt = ConditionBatch(np.array([specs[i].condition.age + d for i, d in jobs], dtype=np.float64),
                         np.array([int(specs[i].condition.sex) for i, _ in jobs], dtype=np.int64))
    zs = Tensor(z_T.data[[row_of[i] for i, _ in jobs]])
    out = model.sample(zs, tgt, batch_size)
    pred = predictors.age.predict(out)
    orc = oracle_ages(out)
    for j, (i, d) in enumerate(jobs):
        report.rows.append({"kind": "counterfactual", "index": i, "source_age": specs[i].condition.age,
                            "sex": int(specs[i].condition.sex), "target_age": float(tgt.ages[j]), "delta": d,
                            "pred_age": float(pred[j]), "oracle_age": orc[j]})
    for d in deltas:
        sel = [j for j, (_, dd) in enumerate(jobs) if dd == d]
        if not sel:
            continue
        target = tgt.ages[sel]
        mae_o, unmeasurable = _mae_with_unmeasurable([orc[j] for j in sel], target)
        report.per_delta[d] = {"mae_regressor": float(np.mean(np.abs(pred[sel] - target))),
                               "mae_oracle": mae_o, "n": len(sel), "unmeasurable": unmeasurable}
    return report


def direct_generation_eval(model: GenerativeModel, predictors: PredictorPair, n: int = 128, seed: int = 0,
                           name: str = "model", fingerprint: str = "", batch_size: int = 64) -> MetricsReport:
    """Sample ``n`` images from noise along the age sweep and score them."""
    check_gate(predictors)
    cond = age_sweep(n)
    rng = Rng(seed)
    z_T = rng.normal_tensor((n,) + tuple(model.autoencoder.latent_shape))
    images = model.sample(z_T, cond, batch_size)
    real = render_batch(sweep_specs(n, seed + 1, images.shape[-1]))
    real2 = render_batch(sweep_specs(n, seed + 2, images.shape[-1]))
    pred = predictors.age.predict(images)
    male = predictors.sex.predict(images)
    orc = oracle_ages(images)
    mae_o, unmeasurable = _mae_with_unmeasurable(orc, cond.ages)
    f_gen = predictors.age.features(images)
    report = MetricsReport(name, fingerprint, {"direct": seed})
    report.age_mae = float(np.mean(np.abs(pred - cond.ages)))
    report.age_mae_oracle = mae_o
    report.sex_accuracy = float(np.mean((male >= 0.5).astype(np.int64) == cond.sexes))
    report.ms_ssim = mean_pairwise_ms_ssim(images)
    report.fid = frechet_distance(f_gen, predictors.age.features(real))
    report.fid_floor = frechet_distance(predictors.age.features(real2), predictors.age.features(real))
    report.counts = {"direct_samples": n, "direct_unmeasurable": unmeasurable}
    for i in range(n):
        report.rows.append({"kind": "direct", "index": i, "target_age": float(cond.ages[i]),
                            "sex": int(cond.sexes[i]), "pred_age": float(pred[i]), "oracle_age": orc[i],
                            "pred_male": float(male[i])})
    return report


def write_report(report: MetricsReport, out_dir: str | os.PathLike, stem: str) -> dict[str, str]:
    from .io import atomic_write_text
    os.makedirs(out_dir, exist_ok=True)
    paths = {"summary": os.path.join(out_dir, f"{stem}-summary.txt"),
             "samples": os.path.join(out_dir, f"{stem}-samples.csv")}
    atomic_write_text(paths["summary"], report.summary())
    atomic_write_text(paths["samples"], report.samples_csv())
    if report.per_delta:
        paths["table3"] = os.path.join(out_dir, f"{stem}-table3.csv")
        atomic_write_text(paths["table3"], report.table3_csv())
    return paths
