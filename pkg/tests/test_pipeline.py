import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_config
from growthcast.config import GrowthZoneConfig, STAGES, stage_rng
from growthcast.learner import PersonalizedThreshold, relative_volume_difference
from growthcast.pipeline import (
    LeakageError,
    SealedStudy,
    compute_metrics,
    group_pairs,
    growth_zone,
    load_pipeline,
    predict_mask,
    run_fold,
    run_loocv,
    save_pipeline,
    zone_decisions,
)
from growthcast.volume import TumorMask, load_mask, tumor_volume


# -- growth zone -------------------------------------------------------------


def test_zone_single_voxel():
    m = np.zeros((11, 11, 11), bool)
    m[5, 5, 5] = True
    assert growth_zone(TumorMask(m), GrowthZoneConfig(1, 1, 1)).sum() == 27


def test_zone_clipped_at_edge():
    m = np.zeros((8, 8, 8), bool)
    m[0, 0, 7] = True
    zone = growth_zone(TumorMask(m), GrowthZoneConfig(3, 3, 3))
    assert zone.shape == m.shape and zone.sum() == 4 * 4 * 4


def test_zone_anisotropic_margins():
    m = np.zeros((20, 20, 20), bool)
    m[8:10, 8:11, 9] = True
    zone = growth_zone(TumorMask(m), GrowthZoneConfig(1, 2, 3))
    assert zone.sum() == (2 + 2) * (3 + 4) * (1 + 6)


def test_zone_errors():
    with pytest.raises(ValueError):
        growth_zone(TumorMask(np.zeros((4, 4, 4), bool)))
    with pytest.raises(ValueError):
        GrowthZoneConfig(0, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_zone_contains_tumor(seed):
    m = np.random.default_rng(seed).random((10, 10, 10)) < 0.02
    m[3, 4, 5] = True
    zone = growth_zone(TumorMask(m))
    assert np.all(zone[m])


# -- metrics -----------------------------------------------------------------


def test_metrics_identity_and_disjoint():
    g = np.zeros((6, 6, 6), bool)
    g[1:3, 1:3, 1:3] = True
    _, m = compute_metrics(g, g, g)
    assert m.as_tuple() == (100.0, 100.0, 100.0, 0.0)
    p = np.zeros_like(g)
    p[4, 4, 4] = True
    _, m = compute_metrics(p, g, g)
    assert m.dice == 0.0 and m.recall == 0.0


def test_metrics_arithmetic():
    g = np.zeros(200, bool)
    p = np.zeros(200, bool)
    g[:60] = True
    p[10:70] = True  # TP 50, FP 10, FN 10
    counts, m = compute_metrics(p.reshape(5, 5, 8), g.reshape(5, 5, 8), np.ones((5, 5, 8), bool))
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (50, 10, 10, 130)
    assert m.dice == pytest.approx(100 * 100 / 120)
    assert m.rvd == 0.0


def test_metrics_union_region():
    g = np.zeros((5, 5, 5), bool)
    g[0, 0, 0] = True
    region = np.zeros_like(g)
    region[4, 4, 4] = True
    counts, m = compute_metrics(np.zeros_like(g), g, region)
    assert counts.fn == 1 and counts.tn == 1 and m.recall == 0.0


def test_metrics_errors():
    g = np.ones((2, 2, 2), bool)
    with pytest.raises(ValueError):
        compute_metrics(g, np.zeros_like(g), g)
    with pytest.raises(ValueError):
        compute_metrics(g, g, np.zeros_like(g))
    with pytest.raises(ValueError):
        compute_metrics(g, np.ones((2, 2, 3), bool), g)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_dice_is_f1(seed):
    rng = np.random.default_rng(seed)
    g = rng.random((6, 6, 6)) < 0.3
    p = rng.random((6, 6, 6)) < 0.3
    if not g.any():
        return
    _, m = compute_metrics(p, g, np.ones_like(g))
    if m.recall > 0 and m.precision > 0:
        assert m.dice == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall))
    assert m.rvd == pytest.approx(100 * abs(int(p.sum()) - int(g.sum())) / g.sum())


# -- protocol ----------------------------------------------------------------


def test_sealed_study(small_cohort):
    sealed = SealedStudy(small_cohort[0].studies[2])
    with pytest.raises(LeakageError):
        sealed.open("train")
    assert not sealed.untouched_until_evaluation
    fresh = SealedStudy(small_cohort[0].studies[2])
    assert fresh.open("evaluate") is small_cohort[0].studies[2]
    assert fresh.untouched_until_evaluation


def test_group_pair_count(small_cohort):
    assert len(group_pairs(small_cohort[1:])) == 2 * (len(small_cohort) - 1)


def test_stage_seeds_distinct():
    draws = {(s, f): stage_rng(7, s, f).integers(1 << 62) for s in STAGES for f in (-1, 0, 1)}
    assert len(set(draws.values())) == len(draws)
    assert stage_rng(7, "convnet", 1).integers(1 << 62) == draws[("convnet", 1)]


# -- full small cross-validation ---------------------------------------------


def test_loocv_structure(small_loocv, small_cohort):
    report, out = small_loocv
    assert len(report.folds) == len(small_cohort)
    csv = (out / "report.csv").read_text().splitlines()
    assert len(csv) == 1 + len(small_cohort) + 2
    for f in report.folds:
        assert f.leakage_ok
        assert f.n_group_pairs == 2 * (len(small_cohort) - 1)
        assert f.ranking[0] == 2 and sorted(f.ranking) == list(range(9))
        assert 2 <= f.selected_m <= 9
    dice = [f.learned.dice for f in report.folds]
    assert report.summary("learned", "dice").mean == pytest.approx(np.mean(dice), abs=1e-9)
    assert report.summary("learned", "dice").std == pytest.approx(np.std(dice), abs=1e-9)


def test_prediction_inside_zone(small_loocv, small_cohort):
    report, _ = small_loocv
    for f, case in zip(report.folds, small_cohort):
        zone = growth_zone(case.studies[1].mask)
        assert not np.any(f.prediction.data & ~zone)


def test_written_mask_replays_metrics(small_loocv, small_cohort):
    report, out = small_loocv
    f = report.folds[1]
    case = small_cohort[1]
    pred = load_mask(out / "fold01" / "pred_t3_mask")
    assert np.array_equal(pred.data, f.prediction.data)
    _, m = compute_metrics(pred, case.studies[2].mask, growth_zone(case.studies[1].mask))
    assert m == f.learned


def test_pipeline_artifact_round_trip(small_loocv, small_cohort, tmp_path):
    report, out = small_loocv
    f = report.folds[0]
    case = small_cohort[0]
    loaded = load_pipeline(out / "fold00")
    again = predict_mask(loaded, case.studies[1], case.clinical, case.intervals[1])
    assert np.array_equal(again.data, f.prediction.data)
    save_pipeline(loaded, tmp_path / "copy")
    assert (tmp_path / "copy" / "net.bin").read_bytes() == (out / "fold00" / "net.bin").read_bytes()


def test_artifact_tamper_detected(small_loocv, tmp_path):
    _, out = small_loocv
    loaded = load_pipeline(out / "fold00")
    save_pipeline(loaded, tmp_path / "p")
    blob = bytearray((tmp_path / "p" / "net.bin").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "p" / "net.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        load_pipeline(tmp_path / "p")
    with pytest.raises(FileNotFoundError):
        load_pipeline(tmp_path / "missing")


def test_personalization_replay(small_loocv, small_cohort):
    """Predicting t2 from t1 with the stored threshold reproduces the stored RVD."""
    report, _ = small_loocv
    f = report.folds[2]
    case = small_cohort[2]
    p = f.pipeline
    pred = predict_mask(p, case.studies[0], case.clinical, case.intervals[0])
    rvd = relative_volume_difference(tumor_volume(pred), tumor_volume(case.studies[1].mask))
    assert rvd == f.personalization_rvd


def test_threshold_saturation_and_monotonicity(small_loocv, small_cohort):
    report, _ = small_loocv
    p = report.folds[0].pipeline
    case = small_cohort[0]
    t2 = case.studies[1]
    zone, _, d = zone_decisions(p.net, p.scaler, p.model, p.zone, p.patch, t2, case.clinical, case.intervals[1])
    vols = []
    for t in (d.min() - 1, np.median(d), d.max() + 1):
        q = dataclasses.replace(p, threshold=PersonalizedThreshold(float(t), 0.0))
        vols.append(predict_mask(q, t2, case.clinical, case.intervals[1]).count)
    assert vols[0] == zone.sum() and vols[2] == 0
    assert vols[0] >= vols[1] >= vols[2]


def test_run_fold_is_deterministic(small_cohort):
    cfg = small_config(skip_baseline=True)
    a = run_fold(small_cohort, 0, cfg)
    b = run_fold(small_cohort, 0, cfg)
    assert a.learned == b.learned and a.ranking == b.ranking and a.threshold == b.threshold
    assert a.baseline is None


def test_loocv_needs_three(small_cohort):
    with pytest.raises(ValueError):
        run_loocv(small_cohort[:2], small_config())
