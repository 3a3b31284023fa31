"""Linear SVM, SVM-RFE ranking, ACC-based model selection and RVD threshold personalization.

The SVM solves, with labels mapped to y in {-1, +1} and the bias folded in
as a constant feature (so it is regularized alongside w)::

    min 0.5 * (||w||^2 + b^2) + C * sum_i max(0, 1 - y_i (w . x_i + b))

by dual coordinate descent.  The per-sweep visiting order comes from a fixed
seed, so results depend only on the data; sweeps stop once the relative
duality gap falls below ``tol``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numba
import numpy as np

from .features import N_FEATURES, TIME_INTERVAL

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    tol: float = 1e-6
    max_iter: int = 100000  # sweeps over the data; ill-conditioned RFE subsets can need ~20k
    seed: int = 0  # visiting-order generator

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if not self.tol > 0 or self.max_iter < 1:
            raise ValueError("tol and max_iter must be positive")


@dataclass(frozen=True)
class SvmModel:
    w: np.ndarray
    b: float
    features: Tuple[int, ...]
    alpha: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    sweeps: int = 0

    def __post_init__(self):
        if len(self.w) != len(self.features):
            raise ValueError("weight vector and feature list differ in length")

    def decision(self, X) -> np.ndarray:
        """Scores for full (canonical-width) scaled vectors."""
        X = np.asarray(X, dtype=np.float64)
        return X[..., list(self.features)] @ self.w + self.b

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b, "features": list(self.features)}

    @classmethod
    def from_dict(cls, d: dict) -> "SvmModel":
        return cls(np.asarray(d["w"], dtype=np.float64), float(d["b"]), tuple(int(i) for i in d["features"]))


@numba.njit(cache=True)
def _gap(X, y, C, alpha, w):
    n, d = X.shape
    ww = 0.0
    for j in range(d):
        ww += w[j] * w[j]
    hinge = 0.0
    asum = 0.0
    for i in range(n):
        m = 0.0
        for j in range(d):
            m += w[j] * X[i, j]
        m = 1.0 - y[i] * m
        if m > 0.0:
            hinge += m
        asum += alpha[i]
    primal = 0.5 * ww + C * hinge
    dual = asum - 0.5 * ww
    return (primal - dual) / max(abs(primal), 1e-12), 0.5 * ww - asum


@numba.njit(cache=True)
def _dual_cd(X, y, C, tol, max_iter, alpha, w, seed, check_every):
    """Dual coordinate descent with shrinking; X already has the bias column.

    Each sweep visits the active samples in a permutation drawn from a
    generator seeded with ``seed``, so the visiting order is fixed for given
    data.  Bounded variables whose projected gradient points outward are
    shrunk away and restored once the active set's projected-gradient range
    drops below an inner tolerance, which tightens each time the full set
    meets it without closing the gap.  Stops when
    the relative duality gap (always over all samples) is <= tol.

    Returns (sweeps, relative gap, dual objective after each sweep).
    """
    n, d = X.shape
    qii = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        qii[i] = s
    active = np.arange(n)
    n_active = n
    pg_max_old = np.inf
    pg_min_old = -np.inf
    trace = np.empty(max_iter)
    gap = np.inf
    sweep = 0
    inner_eps = 1e-2
    np.random.seed(seed)
    while sweep < max_iter:
        perm = np.random.permutation(n_active)
        order = active[:n_active][perm].copy()
        active[:n_active] = order
        pg_max = -np.inf
        pg_min = np.inf
        s = 0
        while s < n_active:
            i = active[s]
            if qii[i] == 0.0:
                s += 1
                continue
            g = 0.0
            for j in range(d):
                g += w[j] * X[i, j]
            g = y[i] * g - 1.0
            a = alpha[i]
            pg = 0.0
            if a == 0.0:
                if g > pg_max_old:
                    n_active -= 1
                    active[s] = active[n_active]
                    active[n_active] = i
                    continue
                if g < 0.0:
                    pg = g
            elif a == C:
                if g < pg_min_old:
                    n_active -= 1
                    active[s] = active[n_active]
                    active[n_active] = i
                    continue
                if g > 0.0:
                    pg = g
            else:
                pg = g
            if pg > pg_max:
                pg_max = pg
            if pg < pg_min:
                pg_min = pg
            if pg != 0.0:
                na = min(max(a - g / qii[i], 0.0), C)
                delta = (na - a) * y[i]
                alpha[i] = na
                for j in range(d):
                    w[j] += delta * X[i, j]
            s += 1
        asum = 0.0
        for i in range(n):
            asum += alpha[i]
        ww = 0.0
        for j in range(d):
            ww += w[j] * w[j]
        trace[sweep] = 0.5 * ww - asum
        sweep += 1
        converged_active = n_active == 0 or pg_max - pg_min <= inner_eps
        if converged_active or sweep % check_every == 0:
            gap, _ = _gap(X, y, C, alpha, w)
            if gap <= tol:
                break
        if converged_active:
            if n_active == n:
                inner_eps = max(inner_eps * 0.1, 1e-14)
            n_active = n
            pg_max_old = np.inf
            pg_min_old = -np.inf
            continue
        pg_max_old = pg_max if pg_max > 0.0 else np.inf
        pg_min_old = pg_min if pg_min < 0.0 else -np.inf
    return sweep, gap, trace[:sweep]


def _signed(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise ValueError("SVM training needs both classes")
    return np.where(y == 1, 1.0, -1.0)


def svm_objective(w, b, X, y, C: float) -> float:
    """Primal objective with the bias regularized like a weight."""
    X = np.asarray(X, dtype=np.float64)
    ys = _signed(y)
    margins = 1.0 - ys * (X @ w + b)
    return 0.5 * (float(w @ w) + b * b) + C * float(np.maximum(margins, 0.0).sum())


def train_svm(X, y, cfg: SvmConfig = SvmConfig(), features: Optional[Sequence[int]] = None,
              return_trace: bool = False, warm_start: Optional[np.ndarray] = None):
    """Fit a linear SVM on the columns ``features`` of ``X`` (default: all columns).

    ``warm_start`` seeds the dual variables (e.g. from a fit on a feature
    subset or superset of the same samples); any feasible start reaches the
    same optimum.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be 2D")
    features = tuple(range(X.shape[1])) if features is None else tuple(int(f) for f in features)
    ys = _signed(y)
    Xa = np.ascontiguousarray(np.hstack([X[:, list(features)], np.ones((len(X), 1))]))
    if warm_start is None:
        alpha = np.zeros(len(X))
    else:
        alpha = np.clip(np.asarray(warm_start, dtype=np.float64), 0.0, cfg.C)
        if alpha.shape != (len(X),):
            raise ValueError("warm start must hold one dual variable per sample")
    wa = Xa.T @ (alpha * ys)
    sweeps, gap, trace = _dual_cd(Xa, ys, float(cfg.C), float(cfg.tol), int(cfg.max_iter), alpha, wa,
                                   int(cfg.seed), 5)
    if gap > cfg.tol:
        raise ConvergenceError(f"duality gap {gap:.3g} > tol {cfg.tol:g} after {sweeps} sweeps")
    model = SvmModel(wa[:-1].copy(), float(wa[-1]), features, alpha, int(sweeps))
    return (model, trace) if return_trace else model


def decision_value(model: SvmModel, x) -> np.ndarray:
    """``w . x + b`` for vectors restricted to the model's selected features."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(model.w):
        raise ValueError(f"expected {len(model.w)} features, got {x.shape[-1]}")
    return x @ model.w + model.b


def rfe_rank(X, y, cfg: SvmConfig = SvmConfig(), prior: Sequence[int] = (TIME_INTERVAL,)) -> Tuple[int, ...]:
    """SVM recursive feature elimination with always-kept prior features.

    Non-prior features are removed one at a time (smallest squared weight
    first, lower index on ties); the ranking lists the priors in canonical
    order followed by the reverse elimination order.
    """
    X = np.asarray(X, dtype=np.float64)
    n_feat = X.shape[1]
    if n_feat < 2:
        raise ValueError("RFE needs at least two features")
    prior = tuple(sorted(set(int(p) for p in prior)))
    surviving = [f for f in range(n_feat) if f not in prior]
    eliminated = []
    alpha = None
    while surviving:
        if len(surviving) == 1:
            eliminated.append(surviving.pop())
            break
        active = sorted(prior + tuple(surviving))
        model = train_svm(X, y, cfg, active, warm_start=alpha)
        alpha = model.alpha
        weight = dict(zip(active, model.w ** 2))
        worst = min(surviving, key=lambda f: (weight[f], f))
        surviving.remove(worst)
        eliminated.append(worst)
    return prior + tuple(reversed(eliminated))


def confusion(y_true, y_pred) -> Tuple[int, int, int, int]:
    """(TP, FP, FN, TN)."""
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return (int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


def accuracy(tp: int, fp: int, fn: int, tn: int) -> float:
    return (tp + tn) / (tp + fp + fn + tn)


@dataclass
class SelectionResult:
    ranking: Tuple[int, ...]
    m: int
    accuracies: Dict[int, float]
    model: SvmModel
    models: Dict[int, SvmModel] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if sorted(self.ranking) != list(range(len(self.ranking))):
            raise ValueError("ranking must be a permutation")

    @property
    def selected(self) -> Tuple[int, ...]:
        return tuple(self.ranking[:self.m])

    def to_dict(self) -> dict:
        return {
            "ranking": list(self.ranking),
            "m": self.m,
            "accuracies": {str(k): v for k, v in self.accuracies.items()},
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(tuple(d["ranking"]), int(d["m"]), {int(k): float(v) for k, v in d["accuracies"].items()},
                   SvmModel.from_dict(d["model"]))


def select_model(Xg, yg, Xp, yp, ranking: Sequence[int], cfg: SvmConfig = SvmConfig(),
                 m_values: Optional[Sequence[int]] = None) -> SelectionResult:
    """Train one SVM per top-m feature prefix on group data, keep the best personalization ACC."""
    ranking = tuple(int(r) for r in ranking)
    Xp = np.asarray(Xp, dtype=np.float64)
    yp = np.asarray(yp)
    if len(yp) == 0 or yp.min() == yp.max():
        raise ValueError("personalization set must contain both classes")
    m_values = range(2, len(ranking) + 1) if m_values is None else m_values
    accs, models = {}, {}
    alpha = None
    for m in m_values:
        model = train_svm(Xg, yg, cfg, sorted(ranking[:m]), warm_start=alpha)
        alpha = model.alpha
        accs[m] = accuracy(*confusion(yp, model.decision(Xp) >= 0.0))
        models[m] = model
    best = min(accs, key=lambda m: (-accs[m], m))
    return SelectionResult(ranking, best, accs, models[best], models)


# --------------------------------------------------------------------------
# threshold personalization


@dataclass(frozen=True)
class PersonalizedThreshold:
    threshold: float
    rvd: float

    def __post_init__(self):
        if not np.isfinite(self.threshold):
            raise ValueError("threshold must be finite")


def threshold_candidates(decisions) -> np.ndarray:
    d = np.asarray(decisions, dtype=np.float64)
    return np.unique(np.concatenate([[0.0], np.quantile(d, np.linspace(0.0, 1.0, 101))]))


def predicted_volume(decisions, threshold: float, voxel_volume: float) -> float:
    return int(np.count_nonzero(np.asarray(decisions) >= threshold)) * voxel_volume


def relative_volume_difference(v_pred: float, v_gt: float) -> float:
    if not v_gt > 0:
        raise ValueError("ground-truth volume must be positive")
    return abs(v_pred - v_gt) / v_gt


def personalize_threshold(decisions, gt_volume: float, voxel_volume: float) -> PersonalizedThreshold:
    """Decision threshold over the growth zone minimizing the relative volume difference.

    Ties prefer the threshold closest to 0, then the smaller one.
    """
    d = np.asarray(decisions, dtype=np.float64)
    if d.size == 0:
        raise ValueError("empty growth zone")
    if not gt_volume > 0:
        raise ValueError("ground-truth volume must be positive")
    best = None
    for t in threshold_candidates(d):
        rvd = relative_volume_difference(predicted_volume(d, t, voxel_volume), gt_volume)
        key = (rvd, abs(t), t)
        if best is None or key < best[0]:
            best = (key, t, rvd)
    return PersonalizedThreshold(float(best[1]), float(best[2]))


__all__ = [
    "ConvergenceError", "N_FEATURES", "PersonalizedThreshold", "SelectionResult", "SvmConfig",
    "SvmModel", "accuracy", "confusion", "decision_value", "personalize_threshold", "predicted_volume",
    "relative_volume_difference", "rfe_rank", "select_model", "svm_objective", "threshold_candidates",
    "train_svm",
]
