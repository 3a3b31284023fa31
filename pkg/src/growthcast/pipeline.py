"""Growth-zone prediction, evaluation metrics and the leave-one-out protocol.

A fold holds one case out.  The remaining cases supply group training pairs
(t1/t2 and t2/t3), the held-out case's t1/t2 pair personalizes the model
(feature-count selection by accuracy, decision threshold by relative volume
difference), and its t3 is predicted from t2 and scored.  The held-out t3
study is sealed for the whole fold and only opened for scoring.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import convnet
from .config import GrowthZoneConfig, RunConfig, stage_rng
from .features import (DEEP, FEATURE_NAMES, TIME_INTERVAL, Scaler, assemble_set, check_feature_names,
                       fit_scaler, write_feature_csv)
from .growthsim import RdParams, baseline_predict, fit_baseline
from .learner import (PersonalizedThreshold, SelectionResult, personalize_threshold, relative_volume_difference,
                      rfe_rank, select_model)
from .preprocess import PatchConfig, balance_indices, dump_patches, extract_patches, patches_at
from .volume import (ClinicalRecord, LongitudinalCase, Study, TumorMask, align_at_tumor_center, save_mask,
                     tumor_volume)

log = logging.getLogger(__name__)

PIPELINE_VERSION = 1
METRIC_NAMES = ("recall", "precision", "dice", "rvd")


# --------------------------------------------------------------------------
# growth zone and metrics


def growth_zone(mask: TumorMask, cfg: GrowthZoneConfig = GrowthZoneConfig()) -> np.ndarray:
    """Tumor bounding box grown by (nx, ny, nz) voxels per side, clipped to the volume."""
    idx = np.argwhere(mask.data)
    if idx.size == 0:
        raise ValueError("growth zone of an empty mask")
    lo = np.maximum(idx.min(0) - cfg.margins, 0)
    hi = np.minimum(idx.max(0) + cfg.margins, np.asarray(mask.dims) - 1)
    zone = np.zeros(mask.dims, dtype=bool)
    zone[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
    return zone


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class Metrics:
    recall: float
    precision: float
    dice: float
    rvd: float

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.recall, self.precision, self.dice, self.rvd)


def compute_metrics(pred: TumorMask, gt: TumorMask, region: np.ndarray) -> Tuple[ConfusionCounts, Metrics]:
    """Confusion counts over ``region | gt | pred`` and the four percentages."""
    p = np.asarray(pred.data if isinstance(pred, TumorMask) else pred, dtype=bool)
    g = np.asarray(gt.data if isinstance(gt, TumorMask) else gt, dtype=bool)
    region = np.asarray(region, dtype=bool)
    if p.shape != g.shape or region.shape != g.shape:
        raise ValueError("prediction, ground truth and region must share geometry")
    if not region.any():
        raise ValueError("empty evaluation region")
    if not g.any():
        raise ValueError("empty ground truth: relative volume difference undefined")
    r = region | g | p
    counts = ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(r & ~p & ~g)),
    )
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    dice = 2 * tp / (2 * tp + fp + fn)
    rvd = abs(int(p.sum()) - int(g.sum())) / int(g.sum())
    return counts, Metrics(100 * recall, 100 * precision, 100 * dice, 100 * rvd)


# --------------------------------------------------------------------------
# trained pipeline


@dataclass
class TrainedPipeline:
    net: convnet.NetWeights
    scaler: Scaler
    selection: SelectionResult
    threshold: PersonalizedThreshold
    zone: GrowthZoneConfig = field(default_factory=GrowthZoneConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    postprocess: bool = False

    @property
    def model(self):
        return self.selection.model


def zone_decisions(net, scaler, model, zone_cfg: GrowthZoneConfig, patch_cfg: PatchConfig, study: Study,
                   clinical: ClinicalRecord, interval: float):
    """SVM decision values at every growth-zone voxel of ``study``, centres ordered (z, y, x)."""
    zone = growth_zone(study.mask, zone_cfg)
    centers = np.argwhere(zone)
    centers = centers[np.lexsort((centers[:, 0], centers[:, 1], centers[:, 2]))]
    samples = patches_at(study, centers, patch_cfg)
    X = scaler.apply(assemble_set(samples, net, interval, clinical))
    return zone, centers, model.decision(X)


def _postprocess(pred: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(pred)
    if n > 1:
        sizes = ndimage.sum(pred, labels, index=np.arange(1, n + 1))
        pred = labels == (1 + int(np.argmax(sizes)))
    return ndimage.binary_fill_holes(pred)


def predict_mask(pipeline: TrainedPipeline, current: Study, clinical: ClinicalRecord,
                 interval: float) -> TumorMask:
    """Label every growth-zone voxel of ``current`` at ``interval`` days ahead."""
    for part in ("net", "scaler", "selection", "threshold"):
        if getattr(pipeline, part, None) is None:
            raise ValueError(f"incomplete pipeline: missing {part}")
    _, centers, d = zone_decisions(pipeline.net, pipeline.scaler, pipeline.model, pipeline.zone,
                                   pipeline.patch, current, clinical, interval)
    pred = np.zeros(current.dims, dtype=bool)
    hit = centers[d >= pipeline.threshold.threshold]
    pred[tuple(hit.T)] = True
    if pipeline.postprocess:
        pred = _postprocess(pred) & growth_zone(current.mask, pipeline.zone)
    return TumorMask(pred, current.spacing)


def save_pipeline(pipeline: TrainedPipeline, directory) -> Path:
    """``pipeline.json`` plus the referenced ``net.bin``; returns the json path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    net_hash = convnet.save_weights(pipeline.net, directory / "net.bin")
    doc = {
        "version": PIPELINE_VERSION,
        "feature_names": list(FEATURE_NAMES),
        "net": {"path": "net.bin", "sha256": net_hash},
        "scaler": pipeline.scaler.to_dict(),
        "selection": pipeline.selection.to_dict(),
        "threshold": asdict(pipeline.threshold),
        "zone": asdict(pipeline.zone),
        "patch": asdict(pipeline.patch),
        "postprocess": pipeline.postprocess,
    }
    path = directory / "pipeline.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_pipeline(path) -> TrainedPipeline:
    path = Path(path)
    if path.is_dir():
        path = path / "pipeline.json"
    if not path.exists():
        raise FileNotFoundError(f"pipeline artifact {path} not found")
    doc = json.loads(path.read_text())
    if doc.get("version") != PIPELINE_VERSION:
        raise ValueError(f"unsupported pipeline version {doc.get('version')}")
    check_feature_names(doc["feature_names"])
    for key in ("net", "scaler", "selection", "threshold", "zone", "patch"):
        if key not in doc:
            raise ValueError(f"incomplete pipeline artifact: missing {key}")
    net_path = path.parent / doc["net"]["path"]
    digest = hashlib.sha256(net_path.read_bytes()).hexdigest()
    if digest != doc["net"]["sha256"]:
        raise ValueError(f"{net_path}: hash mismatch with pipeline artifact")
    return TrainedPipeline(
        net=convnet.load_weights(net_path),
        scaler=Scaler.from_dict(doc["scaler"]),
        selection=SelectionResult.from_dict(doc["selection"]),
        threshold=PersonalizedThreshold(**doc["threshold"]),
        zone=GrowthZoneConfig(**doc["zone"]),
        patch=PatchConfig(**doc["patch"]),
        postprocess=bool(doc.get("postprocess", False)),
    )


# --------------------------------------------------------------------------
# leakage guard


class LeakageError(AssertionError):
    pass


def study_digest(study: Study) -> str:
    h = hashlib.sha256()
    for ch in (study.suv, study.icvf, study.mask):
        h.update(ch.checksum().encode())
    return h.hexdigest()


class SealedStudy:
    """Holds the test study of a fold; opening it outside scoring is an error."""

    def __init__(self, study: Study):
        self._study = study
        self.digest = study_digest(study)
        self.accesses: List[str] = []

    def open(self, stage: str) -> Study:
        self.accesses.append(stage)
        if stage != "evaluate":
            raise LeakageError(f"test study opened during stage '{stage}'")
        if study_digest(self._study) != self.digest:
            raise LeakageError("test study changed during the fold")
        return self._study

    @property
    def untouched_until_evaluation(self) -> bool:
        return self.accesses == ["evaluate"]


# --------------------------------------------------------------------------
# one fold


@dataclass
class FoldResult:
    fold: int
    patient_id: str
    learned: Metrics
    counts: ConfusionCounts
    identity: Metrics
    baseline: Optional[Metrics]
    baseline_params: Optional[Dict[str, float]]
    ranking: Tuple[int, ...]
    selected_m: int
    accuracies: Dict[int, float]
    threshold: float
    personalization_rvd: float
    net_epoch: int
    n_group_pairs: int
    n_group_samples: int
    n_net_samples: int
    test_digest: str
    leakage_ok: bool
    timings: Dict[str, float] = field(default_factory=dict)
    pipeline: Optional[TrainedPipeline] = field(default=None, repr=False)
    prediction: Optional[TumorMask] = field(default=None, repr=False)
    baseline_prediction: Optional[TumorMask] = field(default=None, repr=False)

    @property
    def selected_features(self) -> Tuple[int, ...]:
        return tuple(self.ranking[:self.selected_m])

    @property
    def deep_selected(self) -> bool:
        return any(f in DEEP for f in self.selected_features)


def group_pairs(cases: Sequence[LongitudinalCase], align: bool = False):
    """(current study, next study, interval, clinical) for t1/t2 and t2/t3 of every case."""
    pairs = []
    for case in cases:
        for k in (0, 1):
            cur, nxt = case.studies[k], case.studies[k + 1]
            if align:
                nxt = align_at_tumor_center(nxt, cur)
            pairs.append((cur, nxt, case.intervals[k], case.clinical))
    return pairs


def _cap_balanced(labels: np.ndarray, cap: Optional[int], rng) -> np.ndarray:
    idx = np.arange(len(labels))
    if cap is None or len(labels) <= cap:
        return idx
    keep = []
    for cls in (0, 1):
        members = idx[labels == cls]
        keep.append(rng.choice(members, size=min(len(members), cap // 2), replace=False))
    return np.sort(np.concatenate(keep))


def group_patch_sets(pairs, config: RunConfig, fold: int = -1):
    """Labelled patch sets per training pair, class-balanced when configured."""
    bal_rng = stage_rng(config.seed, "balance", fold)
    sets = []
    for cur, nxt, interval, clin in pairs:
        samples = extract_patches(cur, nxt.mask, config.patch)
        if config.patch.balance:
            samples = samples.subset(balance_indices(samples.labels, bal_rng))
        sets.append((samples, interval, clin))
    return sets


def train_group_net(group_sets, config: RunConfig, fold: int = -1):
    """Train the ConvNet on a capped, class-balanced draw from the group patches.

    Returns (weights, history, number of training patches).
    """
    y_all = np.concatenate([s.labels for s, _, _ in group_sets])
    keep = _cap_balanced(y_all, config.max_train_patches, stage_rng(config.seed, "subsample", fold))
    x_net = np.empty((len(keep), 3, config.patch.size, config.patch.size), dtype=np.float32)
    offset, filled = 0, 0
    for samples, _, _ in group_sets:
        local = keep[(keep >= offset) & (keep < offset + len(samples))] - offset
        x_net[filled:filled + len(local)] = samples.patches(local)
        filled += len(local)
        offset += len(samples)
    net, history = convnet.train(x_net, y_all[keep], config.train, rng=stage_rng(config.seed, "convnet", fold))
    return net, history, len(keep)


def run_fold(cohort: Sequence[LongitudinalCase], target: int, config: RunConfig = RunConfig(),
             out_dir=None) -> FoldResult:
    if len(cohort) < 2:
        raise ValueError("a fold needs at least two cases")
    timings = {}
    tick = time.perf_counter()
    case = cohort[target]
    sealed = SealedStudy(case.studies[2])
    t1, t2 = case.studies[0], case.studies[1]
    if config.align:
        t2 = align_at_tumor_center(t2, t1)
    clinical = case.clinical
    interval_pers, interval_test = case.intervals
    group = [c for i, c in enumerate(cohort) if i != target]
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    # (1) group patches, balanced per pair; ConvNet on a capped balanced subset
    pairs = group_pairs(group, config.align)
    group_sets = group_patch_sets(pairs, config, target)
    if out_dir is not None and config.dump_patches:
        dump_patches(group_sets[0][0], out_dir / "patches")
    y_all = np.concatenate([s.labels for s, _, _ in group_sets])
    timings["patches"] = time.perf_counter() - tick

    tick = time.perf_counter()
    net, history, n_net = train_group_net(group_sets, config, target)
    timings["convnet"] = time.perf_counter() - tick

    # (2) features: group (balanced) and personalization (whole box, raw)
    tick = time.perf_counter()
    Xg = np.vstack([assemble_set(s, net, iv, cl) for s, iv, cl in group_sets])
    scaler = fit_scaler(Xg)
    Xg = scaler.apply(Xg)
    pers = extract_patches(t1, t2.mask, config.patch)
    Xp = scaler.apply(assemble_set(pers, net, interval_pers, clinical))
    yp = pers.labels
    if out_dir is not None and config.dump_features:
        write_feature_csv(out_dir / "group_features.csv", scaler.mean + Xg * scaler.std, y_all)
        write_feature_csv(out_dir / "personalization_features.csv", scaler.mean + Xp * scaler.std, yp)
    timings["features"] = time.perf_counter() - tick

    # (3) ranking, (4) feature-count selection, (5) threshold personalization
    tick = time.perf_counter()
    ranking = rfe_rank(Xg, y_all, config.svm, prior=(TIME_INTERVAL,))
    selection = select_model(Xg, y_all, Xp, yp, ranking, config.svm)
    _, _, d_pers = zone_decisions(net, scaler, selection.model, config.zone, config.patch, t1, clinical,
                                  interval_pers)
    threshold = personalize_threshold(d_pers, tumor_volume(t2.mask), t2.mask.voxel_volume)
    pipeline = TrainedPipeline(net, scaler, selection, threshold, config.zone, config.patch, config.postprocess)
    timings["learner"] = time.perf_counter() - tick

    # (6) predict t3 from t2
    tick = time.perf_counter()
    pred = predict_mask(pipeline, t2, clinical, interval_test)
    timings["predict"] = time.perf_counter() - tick

    baseline_params = None
    if not config.skip_baseline:
        tick = time.perf_counter()
        baseline_params = fit_baseline(t1, t2, interval_pers)
        baseline_pred = baseline_predict(t2, baseline_params, interval_test)
        timings["baseline"] = time.perf_counter() - tick

    # (7) score against the sealed t3
    t3 = sealed.open("evaluate")
    if config.align:
        t3 = align_at_tumor_center(t3, t2)
    region = growth_zone(t2.mask, config.zone)
    counts, learned = compute_metrics(pred, t3.mask, region)
    _, identity = compute_metrics(t2.mask, t3.mask, region)
    baseline = None
    if baseline_params is not None:
        _, baseline = compute_metrics(baseline_pred, t3.mask, region)

    result = FoldResult(
        fold=target,
        patient_id=case.patient_id,
        learned=learned,
        counts=counts,
        identity=identity,
        baseline=baseline,
        baseline_params=None if baseline_params is None else asdict(baseline_params),
        ranking=tuple(int(r) for r in ranking),
        selected_m=selection.m,
        accuracies=dict(selection.accuracies),
        threshold=threshold.threshold,
        personalization_rvd=threshold.rvd,
        net_epoch=net.epoch,
        n_group_pairs=len(pairs),
        n_group_samples=len(y_all),
        n_net_samples=n_net,
        test_digest=sealed.digest,
        leakage_ok=sealed.untouched_until_evaluation,
        timings=timings,
        pipeline=pipeline,
        prediction=pred,
        baseline_prediction=None if baseline_params is None else baseline_pred,
    )
    if out_dir is not None:
        save_pipeline(pipeline, out_dir)
        save_mask(pred, out_dir / "pred_t3_mask")
        if baseline_params is not None:
            save_mask(baseline_pred, out_dir / "baseline_t3_mask")
        (out_dir / "history.json").write_text(json.dumps({
            "best_epoch": history.best_epoch,
            "initial_train_loss": history.initial_train_loss,
            "initial_val_loss": history.initial_val_loss,
            "epochs": [asdict(r) for r in history.records],
        }, indent=2) + "\n")
    log.info("fold %d (%s): dice %.2f rvd %.2f | identity dice %.2f%s", target, case.patient_id,
             learned.dice, learned.rvd, identity.dice,
             "" if baseline is None else f" | baseline dice {baseline.dice:.2f} rvd {baseline.rvd:.2f}")
    return result


# --------------------------------------------------------------------------
# leave-one-out


@dataclass
class Summary:
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def of(cls, values) -> "Summary":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()), float(v.min()), float(v.max()))

    def format(self, digits: int = 1) -> str:
        return f"{self.mean:.{digits}f}±{self.std:.{digits}f} [{self.min:.{digits}f}, {self.max:.{digits}f}]"


@dataclass
class LoocvReport:
    folds: List[FoldResult]
    with_baseline: bool = True

    def __post_init__(self):
        if not self.folds:
            raise ValueError("empty report")

    def methods(self) -> List[str]:
        names = ["learned", "identity"]
        return names + (["baseline"] if self.with_baseline else [])

    def values(self, method: str, metric: str) -> np.ndarray:
        return np.array([getattr(getattr(f, method), metric) for f in self.folds])

    def summary(self, method: str, metric: str) -> Summary:
        return Summary.of(self.values(method, metric))

    @property
    def timings(self) -> Dict[str, Dict[str, float]]:
        return {f.patient_id: f.timings for f in self.folds}

    def columns(self) -> List[str]:
        cols = ["fold", "patient_id"]
        for method in self.methods():
            cols += [f"{method}_{m}" for m in METRIC_NAMES]
        return cols + ["selected_m", "selected_features", "deep_selected", "threshold", "personalization_rvd",
                       "leakage_ok"]

    def rows(self) -> List[List[str]]:
        rows = []
        for f in self.folds:
            row = [str(f.fold), f.patient_id]
            for method in self.methods():
                row += [f"{v:.6f}" for v in getattr(f, method).as_tuple()]
            row += [str(f.selected_m), " ".join(FEATURE_NAMES[i] for i in f.selected_features),
                    str(int(f.deep_selected)), repr(f.threshold), f"{f.personalization_rvd:.6f}",
                    str(int(f.leakage_ok))]
            rows.append(row)
        n_extra = len(self.columns()) - 2 - 4 * len(self.methods())
        for label, fmt in (("mean±std", lambda s: f"{s.mean:.6f}±{s.std:.6f}"),
                           ("[min,max]", lambda s: f"[{s.min:.6f}, {s.max:.6f}]")):
            row = [label, ""]
            for method in self.methods():
                row += [fmt(self.summary(method, m)) for m in METRIC_NAMES]
            rows.append(row + [""] * n_extra)
        return rows

    def to_csv(self) -> str:
        lines = [",".join(self.columns())]
        lines += [",".join(f'"{c}"' if "," in c else c for c in row) for row in self.rows()]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        labels = {"baseline": "RD baseline", "learned": "Group learning", "identity": "Identity (t2)"}
        head = ["Method", "Recall (%)", "Precision (%)", "Dice (%)", "RVD (%)"]
        body = [[labels[m]] + [self.summary(m, k).format() for k in METRIC_NAMES]
                for m in (["baseline"] if self.with_baseline else []) + ["learned", "identity"]]
        widths = [max(len(r[i]) for r in [head] + body) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        lines = [f"Leave-one-out over {len(self.folds)} cases; mean±std [min, max]",
                 "Confusion counts over growth zone ∪ ground truth ∪ prediction.", "",
                 fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]
        deep = sum(f.deep_selected for f in self.folds)
        lines += ["", f"Deep feature in selected set: {deep}/{len(self.folds)} folds",
                  f"Leakage guard passed: {sum(f.leakage_ok for f in self.folds)}/{len(self.folds)} folds"]
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / "report.csv", "text": out_dir / "report.txt", "timing": out_dir / "timing.json"}
        paths["csv"].write_text(self.to_csv())
        paths["text"].write_text(self.to_text())
        paths["timing"].write_text(json.dumps(self.timings, indent=2) + "\n")
        return paths


def _fold_worker(args):
    cohort, target, config, out_dir = args
    return run_fold(cohort, target, config, out_dir)


def run_loocv(cohort: Sequence[LongitudinalCase], config: RunConfig = RunConfig(), out_dir=None,
              jobs: Optional[int] = None) -> LoocvReport:
    """One fold per case; fold ``k`` holds out ``cohort[k]``."""
    if len(cohort) < 3:
        raise ValueError("leave-one-out needs at least three cases")
    jobs = config.jobs if jobs is None else jobs
    out_dir = None if out_dir is None else Path(out_dir)
    tasks = [(cohort, k, config, None if out_dir is None else out_dir / f"fold{k:02d}") for k in range(len(cohort))]
    folds = []
    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        pending = [pool.submit(_fold_worker, t) for t in tasks] if pool else tasks
        for k, item in enumerate(pending):
            try:
                folds.append(item.result() if pool else _fold_worker(item))
            except Exception as exc:
                raise RuntimeError(f"fold {k} ({cohort[k].patient_id}) failed: {exc}") from exc
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    report = LoocvReport(folds, with_baseline=not config.skip_baseline)
    if out_dir is not None:
        report.write(out_dir)
    return report


__all__ = [
    "ConfusionCounts", "FoldResult", "LeakageError", "LoocvReport", "Metrics", "SealedStudy", "Summary",
    "TrainedPipeline", "compute_metrics", "group_pairs", "group_patch_sets", "growth_zone", "load_pipeline", "predict_mask",
    "relative_volume_difference", "run_fold", "run_loocv", "save_pipeline", "study_digest", "train_group_net", "zone_decisions",
]
