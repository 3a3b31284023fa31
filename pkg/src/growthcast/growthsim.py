"""Logistic reaction-diffusion tumor growth.

The engine serves two roles: it synthesizes longitudinal phantom cohorts
(three time points, SUV/ICVF/mask channels, clinical record) and it is the
model-based baseline predictor, personalized by a small grid search over
diffusivity and proliferation.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .volume import (
    ClinicalRecord,
    LongitudinalCase,
    ScalarVolume,
    Study,
    TumorMask,
    signed_distance_map,
    write_case,
)

log = logging.getLogger(__name__)

BASELINE_DIFFUSIVITIES = (0.0, 0.02, 0.05, 0.1, 0.2)  # mm^2/day
BASELINE_PROLIFERATIONS = (0.0, 0.002, 0.005, 0.01, 0.02)  # 1/day
MAX_STEP_DAYS = 5.0


class StabilityError(ValueError):
    """Explicit Euler time step exceeds the diffusion stability bound."""


@dataclass(frozen=True)
class RdParams:
    diffusivity: float  # mm^2/day
    proliferation: float  # 1/day
    step_days: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        if self.diffusivity < 0 or self.proliferation < 0:
            raise ValueError("diffusivity and proliferation must be non-negative")
        if not self.step_days > 0:
            raise ValueError("step_days must be positive")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def max_stable_step(self, spacing: Sequence[float]) -> float:
        if self.diffusivity == 0:
            return math.inf
        return min(spacing) ** 2 / (6.0 * self.diffusivity)

    def check_stability(self, spacing: Sequence[float]) -> None:
        limit = self.max_stable_step(spacing)
        if self.step_days > limit:
            raise StabilityError(
                f"step_days={self.step_days} exceeds stability limit {limit:.4g} "
                f"for D={self.diffusivity} and spacing {tuple(spacing)}"
            )

    @classmethod
    def stable(cls, diffusivity: float, proliferation: float, spacing=(1.0, 1.0, 1.0),
               threshold: float = 0.5, max_step: float = MAX_STEP_DAYS) -> "RdParams":
        """Parameters with the largest step <= ``max_step`` honouring 90% of the stability bound."""
        step = max_step
        if diffusivity > 0:
            step = min(step, 0.9 * min(spacing) ** 2 / (6.0 * diffusivity))
        return cls(diffusivity, proliferation, step, threshold)


def laplacian(u: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """7-point Laplacian with mirrored ghost cells (zero-flux faces)."""
    out = np.zeros_like(u)
    for axis, h in enumerate(spacing):
        if u.shape[axis] < 2:
            continue
        d = np.diff(u, axis=axis) / (h * h)  # flux between neighbours
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        out[tuple(lo)] += d
        out[tuple(hi)] -= d
    return out


def rd_step(u: np.ndarray, params: RdParams, spacing: Sequence[float] = (1.0, 1.0, 1.0),
            dt: Optional[float] = None) -> np.ndarray:
    """One explicit Euler step of ``u += dt * (D lap(u) + rho u (1 - u))``, clamped to [0, 1]."""
    dt = params.step_days if dt is None else dt
    if params.diffusivity > 0 and dt > params.max_stable_step(spacing):
        raise StabilityError(f"dt={dt} violates the stability bound")
    u = np.asarray(u, dtype=np.float64)
    du = params.proliferation * u * (1.0 - u)
    if params.diffusivity > 0:
        du = du + params.diffusivity * laplacian(u, spacing)
    return np.clip(u + dt * du, 0.0, 1.0)


def n_steps(duration: float, params: RdParams) -> int:
    return int(math.ceil(duration / params.step_days - 1e-12)) if duration > 0 else 0


def simulate(u0: np.ndarray, params: RdParams, duration: float,
             spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Advance ``u0`` by ``duration`` days.

    Uses ``ceil(duration / step_days)`` equal steps of ``duration / n``
    (never larger than ``step_days``).
    """
    if duration < 0:
        raise ValueError("duration must be non-negative")
    params.check_stability(spacing)
    u = np.asarray(u0, dtype=np.float64)
    n = n_steps(duration, params)
    if n == 0:
        return u.copy()
    dt = duration / n
    for _ in range(n):
        u = rd_step(u, params, spacing, dt)
    return u


def threshold_mask(u: np.ndarray, threshold: float, spacing) -> TumorMask:
    return TumorMask(u >= threshold, spacing)


def mask_density(mask: TumorMask, width: float = 1.0) -> np.ndarray:
    """Smooth cell density in [0, 1] whose 0.5 level set reproduces ``mask`` exactly.

    Logistic of the signed surface distance shifted by half a voxel, so
    surface voxels sit above 0.5 and their outside neighbours below.
    """
    sd = signed_distance_map(mask)
    return 1.0 / (1.0 + np.exp(-(sd + 0.5) / width))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom


# --------------------------------------------------------------------------
# model-based baseline


def baseline_grid(spacing=(1.0, 1.0, 1.0)):
    """Grid in tie-break order: smaller rho first, then smaller D."""
    return [RdParams.stable(d, r, spacing)
            for r in BASELINE_PROLIFERATIONS for d in BASELINE_DIFFUSIVITIES]


def fit_baseline(t1: Study, t2: Study, interval: float) -> RdParams:
    """Grid-search (D, rho) maximizing Dice between the simulated t1 and the observed t2 mask."""
    if t1.mask.count == 0 or t2.mask.count == 0:
        raise ValueError("baseline fitting needs non-empty masks")
    spacing = t1.spacing
    u0 = mask_density(t1.mask)
    target = t2.mask.data
    best, best_score = None, -1.0
    for params in baseline_grid(spacing):
        u = simulate(u0, params, interval, spacing)
        score = dice(u >= params.threshold, target)
        if score > best_score:  # strict: keeps the earliest grid point on ties
            best, best_score = params, score
    log.debug("baseline fit D=%g rho=%g dice=%.4f", best.diffusivity, best.proliferation, best_score)
    return best


def baseline_predict(t2: Study, params: RdParams, interval: float) -> TumorMask:
    if t2.mask.count == 0:
        raise ValueError("baseline prediction needs a non-empty mask")
    u = simulate(mask_density(t2.mask), params, interval, t2.spacing)
    return threshold_mask(u, params.threshold, t2.spacing)


# --------------------------------------------------------------------------
# phantom synthesis


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = (48, 48, 48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed_radius: float = 4.5  # voxels
    seed_lobes: int = 3
    diffusivity_range: Tuple[float, float] = (0.002, 0.005)
    proliferation_range: Tuple[float, float] = (0.0015, 0.0025)
    burn_in_days: float = 200.0
    interval_mean: float = 418.0
    interval_std: float = 142.0
    min_interval: int = 90
    min_growth: float = 0.15  # required fractional mask growth per interval
    margin: int = 15  # sampling half-width the t3 tumor must fit inside
    suv_background: float = 2.0
    suv_gain: float = 8.0
    suv_noise: float = 0.3
    icvf_background: float = 0.2
    icvf_gain: float = 0.5
    icvf_noise: float = 0.02
    threshold: float = 0.5
    age: Tuple[float, float] = (48.6, 13.9)
    height: Tuple[float, float] = (1.70, 0.13)
    weight: Tuple[float, float] = (88.1, 16.7)
    male_fraction: float = 5 / 7
    max_retries: int = 8
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 2 * self.margin + 1:
            raise ValueError("dims too small for the sampling margin")
        if min(self.suv_noise, self.icvf_noise) < 0:
            raise ValueError("noise std must be non-negative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        for key in ("dims", "spacing", "diffusivity_range", "proliferation_range",
                    "age", "height", "weight"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PhantomFields:
    """Underlying densities and draws behind one synthesized case."""

    densities: Tuple[np.ndarray, np.ndarray, np.ndarray]
    params: RdParams
    intervals: Tuple[int, int]
    clinical: ClinicalRecord
    retries: int = 0
    extra: dict = field(default_factory=dict)


def seed_density(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Irregular multi-lobed blob near the grid centre, density in [0, 1]."""
    grid = np.indices(config.dims, dtype=float)
    center = (np.asarray(config.dims) - 1) / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    u = np.zeros(config.dims)
    for k in range(config.seed_lobes):
        offset = rng.normal(0.0, config.seed_radius / 3.0, size=3) if k else np.zeros(3)
        radius = config.seed_radius * (rng.uniform(0.55, 0.8) if k else 1.0)
        r2 = sum((grid[a] - center[a] - offset[a]) ** 2 for a in range(3))
        u = np.maximum(u, 1.0 / (1.0 + np.exp((np.sqrt(r2) - radius) / 0.8)))
    return u


def _draw_interval(config: PhantomConfig, rng) -> int:
    return max(config.min_interval, int(round(rng.normal(config.interval_mean, config.interval_std))))


def _draw_clinical(config: PhantomConfig, rng) -> ClinicalRecord:
    age = float(np.clip(rng.normal(*config.age), 18.0, 95.0))
    height = float(np.clip(rng.normal(*config.height), 1.40, 2.10))
    weight = float(np.clip(rng.normal(*config.weight), 40.0, 180.0))
    gender = int(rng.random() < config.male_fraction)
    return ClinicalRecord(round(age, 1), gender, round(height, 2), round(weight, 1))


def _fits_margin(mask: np.ndarray, margin_box: Tuple[np.ndarray, np.ndarray]) -> bool:
    idx = np.argwhere(mask)
    lo, hi = margin_box
    return bool(idx.size) and bool(np.all(idx.min(0) >= lo) and np.all(idx.max(0) <= hi))


def synthesize_fields(config: PhantomConfig, rng: np.random.Generator) -> PhantomFields:
    """Draw one phantom's parameters and evolve its density over three time points.

    Rejects draws whose tumor grows by less than ``min_growth`` per interval;
    when the t3 tumor escapes the margin box the proliferation rate is halved
    for the next attempt.
    """
    spacing = config.spacing
    clinical = _draw_clinical(config, rng)
    rho_scale = 1.0
    for attempt in range(config.max_retries + 1):
        d = rng.uniform(*config.diffusivity_range)
        rho = rng.uniform(*config.proliferation_range) * rho_scale
        params = RdParams.stable(d, rho, spacing, config.threshold)
        intervals = (_draw_interval(config, rng), _draw_interval(config, rng))
        u0 = seed_density(config, rng)
        u1 = simulate(u0, params, config.burn_in_days, spacing)
        u2 = simulate(u1, params, intervals[0], spacing)
        u3 = simulate(u2, params, intervals[1], spacing)
        masks = [u >= config.threshold for u in (u1, u2, u3)]
        counts = [int(m.sum()) for m in masks]
        # t3 tumor plus the growth-zone slack must stay inside the box around t1's centre
        c1 = np.argwhere(masks[0]).mean(0) if counts[0] else np.zeros(3)
        slack = config.margin - 3
        box = (np.floor(c1 - slack), np.ceil(c1 + slack))
        if counts[0] == 0 or not _fits_margin(masks[2], box):
            rho_scale *= 0.5
            continue
        if counts[1] < (1 + config.min_growth) * counts[0] or counts[2] < (1 + config.min_growth) * counts[1]:
            continue
        return PhantomFields((u1, u2, u3), params, intervals, clinical, retries=attempt)
    raise RuntimeError(f"phantom synthesis failed after {config.max_retries + 1} attempts")


def _noisy(base: np.ndarray, noise: float, rng, lo: float, hi: float) -> np.ndarray:
    out = base + (rng.normal(0.0, noise, size=base.shape) if noise > 0 else 0.0)
    return np.clip(out, lo, hi).astype(np.float32)


def case_from_fields(fields: PhantomFields, config: PhantomConfig, rng: np.random.Generator,
                     patient_id: str) -> LongitudinalCase:
    sp = config.spacing
    days = (0, fields.intervals[0], fields.intervals[0] + fields.intervals[1])
    studies = []
    for k, (u, day) in enumerate(zip(fields.densities, days), start=1):
        suv = _noisy(config.suv_background + config.suv_gain * u, config.suv_noise, rng, 0.0, np.inf)
        icvf = _noisy(config.icvf_background + config.icvf_gain * u, config.icvf_noise, rng, 0.0, 1.0)
        studies.append(Study(patient_id, k, day, ScalarVolume(suv, sp), ScalarVolume(icvf, sp),
                             threshold_mask(u, config.threshold, sp)))
    return LongitudinalCase(tuple(studies), fields.clinical)


def synthesize_case(config: PhantomConfig, rng: np.random.Generator,
                    patient_id: str = "case000") -> LongitudinalCase:
    fields = synthesize_fields(config, rng)
    return case_from_fields(fields, config, rng, patient_id)


def generate_cohort(config: PhantomConfig, n: int, seed: int, out_dir) -> dict:
    """Write ``n`` phantom case directories plus a ``cohort.json`` manifest."""
    if n < 1:
        raise ValueError("cohort size must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    cases = []
    for k, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        name = f"case{k:03d}"
        fields = synthesize_fields(config, rng)
        case = case_from_fields(fields, config, rng, name)
        write_case(case, out_dir / name)
        cases.append({
            "name": name,
            "diffusivity": fields.params.diffusivity,
            "proliferation": fields.params.proliferation,
            "intervals": list(fields.intervals),
            "mask_voxels": [s.mask.count for s in case.studies],
            "checksums": {f"t{s.timepoint}_{ch}": getattr(s, ch).checksum()
                          for s in case.studies for ch in ("suv", "icvf", "mask")},
        })
    manifest = {"seed": seed, "n": n, "config": config.to_dict(), "cases": cases}
    (out_dir / "cohort.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_cohort(cohort_dir):
    """Read every case listed in ``cohort.json`` (or every ``case*`` directory)."""
    from .volume import read_case

    cohort_dir = Path(cohort_dir)
    manifest = cohort_dir / "cohort.json"
    if manifest.exists():
        names = [c["name"] for c in json.loads(manifest.read_text())["cases"]]
    else:
        names = sorted(p.name for p in cohort_dir.glob("case*") if p.is_dir())
    if not names:
        raise FileNotFoundError(f"no cases found in {cohort_dir}")
    return [read_case(cohort_dir / name) for name in names]


__all__ = [
    "BASELINE_DIFFUSIVITIES", "BASELINE_PROLIFERATIONS", "PhantomConfig", "PhantomFields",
    "RdParams", "StabilityError", "baseline_grid", "baseline_predict", "case_from_fields",
    "dice", "fit_baseline", "generate_cohort", "laplacian", "load_cohort", "mask_density",
    "rd_step", "seed_density", "simulate", "synthesize_case", "synthesize_fields",
]
