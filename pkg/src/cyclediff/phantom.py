"""Procedural 2-D "phantom brain" images with analytic ground truth.

Anatomy, from the outside in: a head ellipse (skull layer), a cortical ribbon
whose thickness falls linearly with age and whose inner edge carries
sinusoidal folds, white matter, and a dark central ventricle whose area grows
linearly with age.  Males get a 5% wider head and a brighter midline band.

Only the ventricle and the cortical ribbon depend on age, and both stay inside
a fixed per-subject annulus (see :func:`age_invariant_mask`), so every other
pixel is a function of the subject identity and sex alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .conditions import Condition, Sex
from .ndtensor import Rng, Tensor

# geometry at the reference 64x64 size (pixels); scaled linearly otherwise
HEAD_SEMI_X = 26.0
HEAD_SEMI_Y = 29.0
MALE_WIDEN = 1.05
VENTRICLE_MIN = 0.02   # fraction of head area at age 0
VENTRICLE_MAX = 0.12   # ... at age 100
VENTRICLE_ASPECT = 1.3  # vertical / horizontal semi-axis
CORTEX_MAX = 8.0       # ribbon thickness at age 0
CORTEX_MIN = 3.0       # ... at age 100
FOLD_AMPLITUDE = 1.5
FOLD_COUNT = 9
BAND_HALF_WIDTH = 1.5
BAND_BOOST = 0.15

INTENSITY = {"skull": 0.95, "cortex": 0.5, "white": 0.8, "ventricle": 0.1}
DARK_THRESHOLD = 0.3
HEAD_THRESHOLD = 0.05


@dataclass(frozen=True)
class Jitter:
    eccentricity: float   # relative change of the vertical head semi-axis
    fold_phase: float     # radians
    ventricle_shift: float  # horizontal ventricle offset, px at 64x64
    skull_thickness: float  # px at 64x64

    @classmethod
    def from_seed(cls, identity_seed: int) -> "Jitter":
        r = Rng(identity_seed).uniform(0.0, 1.0, size=4)
        return cls(eccentricity=-0.04 + 0.08 * r[0],
                   fold_phase=2 * math.pi * r[1],
                   ventricle_shift=-1.0 + 2.0 * r[2],
                   skull_thickness=2.0 + 1.0 * r[3])


@dataclass(frozen=True)
class PhantomSpec:
    condition: Condition
    identity_seed: int
    size: int = 64

    @property
    def jitter(self) -> Jitter:
        return Jitter.from_seed(self.identity_seed)

    def with_condition(self, condition: Condition) -> "PhantomSpec":
        return PhantomSpec(condition, self.identity_seed, self.size)


@dataclass(frozen=True)
class PhantomImage:
    pixels: Tensor  # [1,1,H,W]
    spec: PhantomSpec

    @property
    def array(self) -> np.ndarray:
        return self.pixels.data[0, 0]


def ventricle_fraction(age: float) -> float:
    return VENTRICLE_MIN + (VENTRICLE_MAX - VENTRICLE_MIN) * age / 100.0


def cortex_thickness(age: float) -> float:
    return CORTEX_MAX - (CORTEX_MAX - CORTEX_MIN) * age / 100.0


def _geometry(spec: PhantomSpec):
    s = spec.size / 64.0
    j = spec.jitter
    c = (spec.size - 1) / 2.0
    yy, xx = np.mgrid[0:spec.size, 0:spec.size].astype(np.float64)
    dx, dy = xx - c, yy - c
    ax = HEAD_SEMI_X * s * (MALE_WIDEN if spec.condition.sex == Sex.MALE else 1.0)
    ay = HEAD_SEMI_Y * s * (1.0 + j.eccentricity)
    head = (dx / ax) ** 2 + (dy / ay) ** 2 <= 1.0
    sk = j.skull_thickness * s
    bx, by = ax - sk, ay - sk
    r = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    # distance from the brain boundary measured along the ray from the centre
    rho = 1.0 / np.sqrt((np.cos(theta) / bx) ** 2 + (np.sin(theta) / by) ** 2)
    depth = rho - r
    brain = depth >= 0
    fold = FOLD_AMPLITUDE * s * np.sin(FOLD_COUNT * theta + j.fold_phase)
    return dict(s=s, c=c, dx=dx, dy=dy, head=head, brain=brain & head, depth=depth, fold=fold,
                head_area=math.pi * ax * ay, shift=j.ventricle_shift * s)


def _ventricle_mask(g: dict, age: float) -> np.ndarray:
    area = ventricle_fraction(age) * g["head_area"]
    rx = math.sqrt(area / (math.pi * VENTRICLE_ASPECT))
    ry = VENTRICLE_ASPECT * rx
    return ((g["dx"] - g["shift"]) / rx) ** 2 + (g["dy"] / ry) ** 2 <= 1.0


def _cortex_mask(g: dict, age: float) -> np.ndarray:
    return g["brain"] & (g["depth"] < cortex_thickness(age) * g["s"] + g["fold"])


def render_array(spec: PhantomSpec) -> np.ndarray:
    g = _geometry(spec)
    age = spec.condition.age
    img = np.zeros((spec.size, spec.size), dtype=np.float64)
    img[g["head"]] = INTENSITY["skull"]
    img[g["brain"]] = INTENSITY["white"]
    cortex = _cortex_mask(g, age)
    img[cortex] = INTENSITY["cortex"]
    vent = _ventricle_mask(g, age)
    if spec.condition.sex == Sex.MALE:
        band = g["brain"] & (np.abs(g["dx"]) <= BAND_HALF_WIDTH * g["s"]) & ~vent
        img[band] += BAND_BOOST
    img[vent] = INTENSITY["ventricle"]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render(spec: PhantomSpec) -> PhantomImage:
    arr = render_array(spec)
    return PhantomImage(Tensor(arr[None, None]), spec)


def render_batch(specs) -> np.ndarray:
    """[n,1,H,W] float32 array of rendered phantoms."""
    return np.stack([render_array(s) for s in specs])[:, None]


def masks(spec: PhantomSpec) -> dict[str, np.ndarray]:
    """Boolean region masks (head, brain, cortex, ventricle) of a spec."""
    g = _geometry(spec)
    age = spec.condition.age
    return {"head": g["head"], "brain": g["brain"], "cortex": _cortex_mask(g, age),
            "ventricle": _ventricle_mask(g, age)}


def age_invariant_mask(spec: PhantomSpec) -> np.ndarray:
    """Pixels whose value cannot change with age for this identity and sex."""
    g = _geometry(spec)
    variable = _ventricle_mask(g, 100.0) | _cortex_mask(g, 0.0)
    return ~variable


def ventricle_region(pixels) -> np.ndarray | None:
    """Segment the dark central blob; None if there is none."""
    arr = np.asarray(pixels.data if isinstance(pixels, Tensor) else pixels, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    head = ndimage.binary_fill_holes(arr > HEAD_THRESHOLD)
    if head.sum() == 0:
        return None
    dark = (arr < DARK_THRESHOLD) & head
    labels, n = ndimage.label(dark)
    if n == 0:
        return None
    c = (np.array(arr.shape) - 1) / 2.0
    best, best_d = None, np.inf
    for lab in range(1, n + 1):
        ys, xs = np.nonzero(labels == lab)
        d = math.hypot(ys.mean() - c[0], xs.mean() - c[1])
        if d < best_d:
            best, best_d = lab, d
    if best_d > 10.0 * arr.shape[0] / 64.0:
        return None
    return labels == best


def oracle_age(pixels) -> float | None:
    """Age read off the ventricle area fraction, or None when unmeasurable."""
    arr = np.asarray(pixels.data if isinstance(pixels, Tensor) else pixels, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:])
    vent = ventricle_region(arr)
    if vent is None:
        return None
    head = ndimage.binary_fill_holes(arr > HEAD_THRESHOLD)
    frac = vent.sum() / head.sum()
    age = 100.0 * (frac - VENTRICLE_MIN) / (VENTRICLE_MAX - VENTRICLE_MIN)
    return float(np.clip(age, 0.0, 100.0))


# -- datasets -----------------------------------------------------------------

# bimodal age mixture: many young subjects, a smaller elderly cluster,
# almost nobody in mid-life
SKEW_COMPONENTS = ((0.55, 15.0, 6.0), (0.45, 72.0, 8.0))


def _draw_age(rng: Rng, distribution: str) -> float:
    if distribution == "uniform":
        return float(rng.uniform(0.0, 100.0))
    if distribution == "skewed":
        u = rng.random()
        acc = 0.0
        for w, mu, sd in SKEW_COMPONENTS:
            acc += w
            if u < acc:
                break
        return float(np.clip(mu + sd * rng.normal((1,))[0], 0.0, 100.0))
    raise ValueError(f"unknown age distribution {distribution!r}")


def sample_dataset(n: int, seed: int, age_distribution: str = "uniform", size: int = 64) -> list[PhantomSpec]:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = Rng(seed)
    out = []
    for _ in range(n):
        ident = int(rng.integers(0, 2 ** 63 - 1))
        sex = Sex(int(rng.integers(0, 2)))
        age = _draw_age(rng, age_distribution)
        out.append(PhantomSpec(Condition(age, sex), ident, size))
    return out


def decade_bin(age: float) -> int:
    return min(int(age // 10), 9)
