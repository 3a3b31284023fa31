"""Run configuration and per-stage seed derivation.

One master seed reproduces a whole experiment.  Every stage draws from
``numpy.random.default_rng(SeedSequence([master, fold, stage_index]))``
where ``stage_index`` is the position of the stage name in :data:`STAGES`
and ``fold`` is the held-out case index (``-1`` outside cross-validation).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .convnet import TrainHyper
from .growthsim import PhantomConfig
from .learner import SvmConfig
from .preprocess import PatchConfig

STAGES = ("generate", "balance", "subsample", "convnet")


@dataclass(frozen=True)
class GrowthZoneConfig:
    nx: int = 3
    ny: int = 3
    nz: int = 3

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("growth-zone margins must be >= 1")

    @property
    def margins(self):
        return (self.nx, self.ny, self.nz)


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    svm: SvmConfig = field(default_factory=SvmConfig)
    zone: GrowthZoneConfig = field(default_factory=GrowthZoneConfig)
    seed: int = 0
    max_train_patches: Optional[int] = 8000  # ConvNet patches per fold, class-balanced
    skip_baseline: bool = False
    dump_patches: bool = False
    dump_features: bool = False
    postprocess: bool = False  # largest component + hole filling on predictions
    align: bool = False  # translate each next study onto the current tumor centre
    jobs: int = 1

    def __post_init__(self):
        if self.max_train_patches is not None and self.max_train_patches < 2 * self.train.batch:
            raise ValueError("max_train_patches must allow at least two mini-batches")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        sub = {"patch": PatchConfig, "train": TrainHyper, "svm": SvmConfig, "zone": GrowthZoneConfig}
        for key, typ in sub.items():
            if key in d:
                d[key] = typ(**d[key])
        if "phantom" in d:
            d["phantom"] = PhantomConfig.from_dict(d["phantom"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def stage_seed(master: int, stage: str, fold: int = -1) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master), int(fold) + 1, STAGES.index(stage)])


def stage_rng(master: int, stage: str, fold: int = -1) -> np.random.Generator:
    return np.random.default_rng(stage_seed(master, stage, fold))
