"""Multi-source feature vectors and group-fitted z-score scaling."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .convnet import NetWeights, deep_features, predict_proba
from .preprocess import PatchSample, PatchSet
from .volume import ClinicalRecord

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "deep_0",
    "deep_1",
    "time_interval",
    "signed_distance",
    "tumor_volume",
    "age",
    "gender",
    "height",
    "weight",
)
N_FEATURES = len(FEATURE_NAMES)
DEEP = (0, 1)
TIME_INTERVAL = 2


def _context(interval: float, distance: float, volume: float, clinical: ClinicalRecord) -> list:
    if not interval > 0:
        raise ValueError("time interval must be positive")
    return [float(interval), float(distance), float(volume), float(clinical.age),
            float(clinical.gender), float(clinical.height), float(clinical.weight)]


def assemble(sample: PatchSample, net: NetWeights, interval: float, clinical: ClinicalRecord) -> np.ndarray:
    """Canonical 9-vector for one patch sample."""
    deep = deep_features(net, sample.channels).astype(np.float64)
    v = np.concatenate([deep, _context(interval, sample.distance, sample.tumor_volume, clinical)])
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite feature")
    return v


def assemble_set(samples: PatchSet, net: NetWeights, interval: float, clinical: ClinicalRecord,
                 batch: int = 1024) -> np.ndarray:
    """Feature matrix ``(n, 9)`` for every sample of a patch set."""
    n = len(samples)
    X = np.empty((n, N_FEATURES))
    for start, patches in zip(range(0, n, batch), samples.batches(batch)):
        X[start:start + len(patches), :2] = predict_proba(net, patches, batch)
    X[:, 2:] = _context(interval, 0.0, samples.tumor_volume, clinical)
    X[:, 3] = samples.distances
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature")
    return X


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    @classmethod
    def identity(cls, n: int = N_FEATURES) -> "Scaler":
        return cls(np.zeros(n), np.ones(n))


def fit_scaler(X) -> Scaler:
    """Per-feature mean and population std; constant features keep std 1."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("fit_scaler needs at least two vectors")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    const = ~(std > 1e-12 * np.maximum(1.0, np.abs(mean)))
    if const.any():
        names = [FEATURE_NAMES[i] if X.shape[1] == N_FEATURES else str(i) for i in np.flatnonzero(const)]
        log.warning("constant feature(s) %s: std set to 1", ", ".join(names))
        std = np.where(const, 1.0, std)
    return Scaler(mean, std)


def apply_scaler(scaler: Scaler, v) -> np.ndarray:
    return scaler.apply(v)


def write_feature_csv(path, X, y) -> None:
    X = np.asarray(X)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(FEATURE_NAMES) + ["label"])
        for row, label in zip(X, y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_feature_csv(path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0][:-1]) != FEATURE_NAMES or rows[0][-1] != "label":
        raise ValueError(f"{path}: feature header does not match the canonical order")
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), N_FEATURES)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return X, y


def check_feature_names(names) -> None:
    if tuple(names) != FEATURE_NAMES:
        raise ValueError(f"feature order {tuple(names)} differs from canonical {FEATURE_NAMES}")
