import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from growthcast.learner import (
    ConvergenceError,
    PersonalizedThreshold,
    SelectionResult,
    SvmConfig,
    SvmModel,
    accuracy,
    confusion,
    decision_value,
    personalize_threshold,
    predicted_volume,
    relative_volume_difference,
    rfe_rank,
    select_model,
    svm_objective,
    threshold_candidates,
    train_svm,
)


def dual_oracle(X, y, C, iters=20000):
    """Accelerated projected gradient on the box-constrained SVM dual (bias as a feature)."""
    ys = np.where(np.asarray(y) == 1, 1.0, -1.0)
    Z = np.hstack([X, np.ones((len(X), 1))]) * ys[:, None]
    Q = Z @ Z.T
    step = 1.0 / np.linalg.eigvalsh(Q)[-1]
    a = np.zeros(len(X))
    v, t = a.copy(), 1.0
    for _ in range(iters):
        a_new = np.clip(v - step * (Q @ v - 1.0), 0.0, C)
        t_new = (1 + np.sqrt(1 + 4 * t * t)) / 2
        v = a_new + (t - 1) / t_new * (a_new - a)
        a, t = a_new, t_new
    wa = Z.T @ a
    return wa[:-1], wa[-1]


def random_problem(seed, n=50, d=5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X @ rng.normal(size=d) + 0.8 * rng.normal(size=n) > 0).astype(int)
    return X, y


def planted(seed, n=200):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 9))
    X[:, 3] = (2 * y - 1) + 0.5 * rng.normal(size=n)
    return X, y


# -- training ----------------------------------------------------------------


def test_one_dimensional_separable():
    X = np.array([[-1.0], [1.0]])
    y = np.array([0, 1])
    m = train_svm(X, y)
    assert m.w[0] > 0
    assert np.all((m.decision(X) > 0) == (y == 1))


def test_matches_independent_oracle():
    X, y = random_problem(0)
    m = train_svm(X, y, SvmConfig(C=1.0))
    w_o, b_o = dual_oracle(X, y, 1.0)
    ours = svm_objective(m.w, m.b, X, y, 1.0)
    ref = svm_objective(w_o, b_o, X, y, 1.0)
    assert abs(ours - ref) <= 1e-4 * abs(ref)
    np.testing.assert_allclose(m.w, w_o, atol=1e-3)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 1.0, 10.0]))
def test_objective_not_above_oracle(seed, C):
    X, y = random_problem(seed, n=40, d=4)
    if y.min() == y.max():
        return
    m = train_svm(X, y, SvmConfig(C=C))
    w_o, b_o = dual_oracle(X, y, C, iters=5000)
    assert svm_objective(m.w, m.b, X, y, C) <= svm_objective(w_o, b_o, X, y, C) * (1 + 1e-4)


def test_duplicating_samples_with_half_penalty():
    X, y = random_problem(1)
    cfg = SvmConfig(C=1.0, tol=1e-10, max_iter=200000)
    a = train_svm(X, y, cfg)
    b = train_svm(np.vstack([X, X]), np.concatenate([y, y]), SvmConfig(C=0.5, tol=1e-10, max_iter=200000))
    np.testing.assert_allclose(a.w, b.w, atol=1e-4)
    assert a.b == pytest.approx(b.b, abs=1e-4)


def test_dual_trace_monotone_and_kkt():
    X, y = random_problem(2, n=120, d=6)
    C = 1.0
    m, trace = train_svm(X, y, SvmConfig(C=C), return_trace=True)
    assert np.all(np.diff(trace) <= 1e-12)
    a = m.alpha
    assert np.all(a >= 0) and np.all(a <= C)
    ys = np.where(y == 1, 1.0, -1.0)
    margin = ys * m.decision(X)
    free = (a > 1e-8) & (a < C - 1e-8)
    assert np.all(margin[a <= 1e-8] >= 1 - 1e-3)
    assert np.all(margin[a >= C - 1e-8] <= 1 + 1e-3)
    np.testing.assert_allclose(margin[free], 1.0, atol=1e-3)


def test_warm_start_reaches_same_optimum():
    X, y = random_problem(3, n=80, d=5)
    cold = train_svm(X, y)
    warm = train_svm(X, y, warm_start=np.full(len(y), 0.7))
    np.testing.assert_allclose(cold.w, warm.w, atol=1e-3)


def test_training_errors():
    X = np.random.default_rng(0).normal(size=(10, 2))
    with pytest.raises(ValueError):
        train_svm(X, np.ones(10, int))
    with pytest.raises(ValueError):
        train_svm(X, np.arange(10))
    Xh, yh = random_problem(4, n=200)
    with pytest.raises(ConvergenceError):
        train_svm(Xh, yh, SvmConfig(tol=1e-14, max_iter=2))
    with pytest.raises(ValueError):
        SvmConfig(C=0)


# -- decision values ---------------------------------------------------------


def test_decision_value():
    zero = SvmModel(np.zeros(3), 0.25, (0, 1, 2))
    assert decision_value(zero, [1.0, 2.0, 3.0]) == 0.25
    m = SvmModel(np.array([0.5, -2.0, 1.0]), 0.1, (0, 3, 5))
    x = np.array([2.0, 1.0, -3.0])
    assert decision_value(m, x) == pytest.approx(1.0 - 2.0 - 3.0 + 0.1)
    f0 = decision_value(m, np.zeros(3))
    assert decision_value(m, 2 * x) - f0 == pytest.approx(2 * (decision_value(m, x) - f0))
    full = np.zeros(9)
    full[[0, 3, 5]] = x
    assert m.decision(full) == pytest.approx(decision_value(m, x))
    with pytest.raises(ValueError):
        decision_value(m, np.zeros(4))


# -- RFE ---------------------------------------------------------------------


def test_rfe_prior_first_and_permutation():
    X, y = planted(0)
    r = rfe_rank(X, y, prior=(2,))
    assert r[0] == 2 and sorted(r) == list(range(9))


def test_rfe_planted_feature():
    hits = sum(rfe_rank(*planted(seed), prior=(2,))[1] == 3 for seed in range(100))
    assert hits >= 95


def test_rfe_two_features_fixed():
    X, y = random_problem(5, d=2)
    assert rfe_rank(X, y, prior=(0,)) == (0, 1)


def test_rfe_order_invariant():
    X, y = planted(7)
    perm = np.random.default_rng(1).permutation(len(y))
    assert rfe_rank(X, y) == rfe_rank(X[perm], y[perm])


# -- model selection ---------------------------------------------------------


def test_accuracy_formula():
    assert accuracy(8, 2, 4, 6) == pytest.approx(0.70)
    y = np.array([1, 0] * 10)
    assert accuracy(*confusion(y, y)) == 1.0
    assert confusion([1, 1, 0, 0], [1, 0, 1, 0]) == (1, 1, 1, 1)


def test_select_model_trains_eight():
    Xg, yg = planted(11)
    Xp, yp = planted(12, n=60)
    ranking = rfe_rank(Xg, yg)
    res = select_model(Xg, yg, Xp, yp, ranking)
    assert sorted(res.models) == list(range(2, 10))
    assert 2 <= res.m <= 9 and res.selected == ranking[:res.m]
    for m, model in res.models.items():
        acc = accuracy(*confusion(yp, model.decision(Xp) >= 0))
        assert acc == res.accuracies[m] and 0 <= acc <= 1
    best = max(res.accuracies.values())
    assert res.m == min(m for m, a in res.accuracies.items() if a == best)


def test_selection_serialization():
    Xg, yg = planted(13)
    res = select_model(Xg, yg, *planted(14, n=40), rfe_rank(Xg, yg))
    back = SelectionResult.from_dict(res.to_dict())
    Xp, _ = planted(15, n=20)
    np.testing.assert_array_equal(back.model.decision(Xp), res.model.decision(Xp))
    assert back.ranking == res.ranking and back.accuracies == res.accuracies


def test_select_model_needs_both_classes():
    Xg, yg = planted(0)
    with pytest.raises(ValueError):
        select_model(Xg, yg, Xg[:5], np.ones(5, int), rfe_rank(Xg, yg))


# -- threshold personalization -----------------------------------------------


def test_exact_volume_match():
    d = np.linspace(-3, 2, 101)
    gt = 30 * 2.0  # 30 voxels of 2 mm^3
    th = personalize_threshold(d, gt, 2.0)
    assert th.rvd == 0.0
    assert predicted_volume(d, th.threshold, 2.0) == gt


def test_degenerate_all_below_zero():
    d = np.full(3, -1.0)
    th = personalize_threshold(d, 1.0, 1.0)
    assert th.threshold == 0.0 and th.rvd == 1.0
    assert predicted_volume(d, th.threshold, 1.0) == 0.0


def test_tie_prefers_zero():
    d = np.array([-1.0, 1.0])
    # thresholds in (-1, 1] all predict one voxel
    assert personalize_threshold(d, 1.0, 1.0).threshold == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 300), st.floats(0.5, 200))
def test_threshold_is_exhaustive_minimum(seed, n, gt):
    d = np.random.default_rng(seed).normal(size=n)
    th = personalize_threshold(d, gt, 1.0)
    rvds = [relative_volume_difference(predicted_volume(d, t, 1.0), gt) for t in threshold_candidates(d)]
    assert th.rvd == min(rvds)
    assert th.threshold in threshold_candidates(d)


def test_threshold_errors():
    with pytest.raises(ValueError):
        personalize_threshold([], 1.0, 1.0)
    with pytest.raises(ValueError):
        personalize_threshold([1.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        PersonalizedThreshold(np.nan, 0.0)
