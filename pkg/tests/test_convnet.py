import numpy as np
import pytest

from growthcast.convnet import (
    DECAYED,
    PARAM_ORDER,
    NetSpec,
    NetWeights,
    TrainHyper,
    _pool_backward,
    _pool_forward,
    backward,
    deep_features,
    forward,
    init_weights,
    learning_rate,
    load_weights,
    logits,
    loss_and_grad,
    predict_proba,
    save_weights,
    stratified_split,
    train,
)


def separable_task(n, rng):
    """Mask channel equals the label; the other channels are noise."""
    labels = rng.integers(0, 2, n)
    x = np.zeros((n, 3, 17, 17), np.float32)
    x[:, 0] = rng.uniform(0, 255, (n, 17, 17))
    x[:, 1] = rng.uniform(0, 100, (n, 17, 17))
    x[:, 2] = labels[:, None, None] * 255.0
    return x, labels


@pytest.fixture(scope="module")
def separable_run():
    rng = np.random.default_rng(0)
    x, y = separable_task(3000, rng)
    net, hist = train(x, y, TrainHyper(epochs=5), rng=np.random.default_rng(1))
    xt, yt = separable_task(600, np.random.default_rng(2))
    return net, hist, xt, yt


def test_default_spec_shapes():
    spec = NetSpec()
    assert spec.flat_size == 2 * 2 * 64
    w = init_weights(spec)
    assert set(w.params) == set(PARAM_ORDER)
    with pytest.raises(ValueError):
        NetSpec(n_out=3)
    with pytest.raises(ValueError):
        NetSpec(patch=7)


# -- init --------------------------------------------------------------------


def test_init_deterministic_and_zero_bias():
    a = init_weights(NetSpec(), np.random.default_rng(5))
    b = init_weights(NetSpec(), np.random.default_rng(5))
    for k in PARAM_ORDER:
        assert np.array_equal(a.params[k], b.params[k])
        if k.endswith("_b"):
            assert not a.params[k].any()


@pytest.mark.parametrize("name", DECAYED)
def test_init_variance(name):
    w = init_weights(NetSpec(), np.random.default_rng(3), dtype=np.float64).params[name]
    assert w.size >= 256
    fan_in = int(np.prod(w.shape[:-1]))
    assert w.var() == pytest.approx(2.0 / fan_in, rel=0.2)


def test_init_variance_many_draws():
    spec = NetSpec()
    draws = np.concatenate([init_weights(spec, np.random.default_rng(s), np.float64).params["fc2_w"].ravel()
                            for s in range(10)])
    assert draws.size >= 1000
    assert draws.var() == pytest.approx(2.0 / 128, rel=0.2)


# -- forward -----------------------------------------------------------------


def test_forward_normalized_and_deterministic():
    rng = np.random.default_rng(0)
    w = init_weights(NetSpec(), rng)
    x = rng.uniform(0, 255, (7, 3, 17, 17))
    p = forward(w, x)
    assert p.shape == (7, 2) and np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    assert np.array_equal(p, forward(w, x))
    assert forward(w, x[0]).shape == (2,)


def test_zero_final_layer_gives_half():
    w = init_weights(NetSpec(), np.random.default_rng(0))
    w.params["fc2_w"][:] = 0
    p = forward(w, np.random.default_rng(1).uniform(0, 255, (3, 3, 17, 17)))
    np.testing.assert_allclose(p, 0.5, atol=1e-7)


def test_forward_shape_errors():
    w = init_weights(NetSpec())
    with pytest.raises(ValueError):
        forward(w, np.zeros((2, 3, 15, 17)))
    with pytest.raises(ValueError):
        forward(w, np.full((3, 17, 17), np.nan))
    with pytest.raises(ValueError):
        forward(w, np.zeros((1, 3, 17, 17)), mode="eval")


def test_train_mode_needs_rng():
    w = init_weights(NetSpec())
    with pytest.raises(ValueError):
        forward(w, np.zeros((1, 3, 17, 17)), mode="train")


def test_dropout_inference_is_monte_carlo_expectation():
    rng = np.random.default_rng(4)
    w = init_weights(NetSpec(), rng, dtype=np.float64)
    x = rng.uniform(0, 255, (3, 17, 17))
    expected = logits(w, x)[0]
    batch = np.repeat(x[None], 10000, axis=0)
    sampled = logits(w, batch, mode="train", rng=np.random.default_rng(5)).mean(0)
    scale = np.abs(expected).max()
    assert np.all(np.abs(sampled - expected) <= 0.02 * scale)


# -- pooling -----------------------------------------------------------------


def test_maxpool_routes_to_argmax():
    x = np.array([[1, 3, 0, 0],
                  [2, 0, 5, 5],
                  [7, 7, 1, 2],
                  [7, 0, 4, 3]], dtype=float).reshape(1, 4, 4, 1)
    out, arg = _pool_forward(x)
    assert out[0, :, :, 0].tolist() == [[3, 5], [7, 4]]
    g = np.array([[10.0, 20.0], [30.0, 40.0]]).reshape(1, 2, 2, 1)
    dx = _pool_backward(g, arg, x.shape)[0, :, :, 0]
    expected = np.zeros((4, 4))
    expected[0, 1] = 10  # unique max
    expected[1, 2] = 20  # tie 5/5: first in scan order
    expected[2, 0] = 30  # three-way tie of 7s: first in scan order
    expected[3, 2] = 40
    assert np.array_equal(dx, expected)


# -- gradients ---------------------------------------------------------------


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    w = init_weights(NetSpec(), rng, dtype=np.float64)
    for k in PARAM_ORDER:
        if k.endswith("_b"):
            w.params[k] = rng.normal(0, 0.1, w.params[k].shape)
    x = rng.uniform(0, 255, (4, 3, 17, 17))
    y = np.array([0, 1, 1, 0])
    mask = (rng.random((4, 128)) < 0.5).astype(float)
    wd = 0.0005
    _, g = loss_and_grad(w, x, y, wd, dropout_mask=mask)
    eps = 1e-4
    for k in PARAM_ORDER:
        flat = w.params[k].reshape(-1)
        idx = rng.choice(flat.size, min(flat.size, 25), replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_and_grad(w, x, y, wd, dropout_mask=mask)[0]
            flat[i] = orig - eps
            lm = loss_and_grad(w, x, y, wd, dropout_mask=mask)[0]
            flat[i] = orig
            num[j] = (lp - lm) / (2 * eps)
        ana = g[k].reshape(-1)[idx]
        rel = np.linalg.norm(ana - num) / max(np.linalg.norm(ana) + np.linalg.norm(num), 1e-12)
        assert rel < 1e-4, k


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(2)
    w = init_weights(NetSpec(), rng, dtype=np.float64)
    x = rng.uniform(0, 255, (5, 3, 17, 17))
    y = rng.integers(0, 2, 5)
    g1 = backward(w, x, y, 0.0005, mode="infer")
    g2 = backward(w, np.concatenate([x, x]), np.concatenate([y, y]), 0.0005, mode="infer")
    for k in PARAM_ORDER:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_gradient_vanishes_at_optimum():
    w = init_weights(NetSpec(), np.random.default_rng(0), dtype=np.float64)
    w.params["fc2_w"][:] = 0
    w.params["fc2_b"][:] = [-100.0, 100.0]  # class 1 with probability 1
    x = np.random.default_rng(1).uniform(0, 255, (4, 3, 17, 17))
    loss, g = loss_and_grad(w, x, np.ones(4, int), 0.0, mode="infer")
    assert loss < 1e-12
    assert np.sqrt(sum(float((v ** 2).sum()) for v in g.values())) < 1e-8


def test_weight_decay_term():
    w = init_weights(NetSpec(), np.random.default_rng(0), dtype=np.float64)
    x = np.zeros((2, 3, 17, 17))
    y = np.array([0, 1])
    l0, g0 = loss_and_grad(w, x, y, 0.0, mode="infer")
    l1, g1 = loss_and_grad(w, x, y, 0.01, mode="infer")
    norm = sum(float((w.params[k] ** 2).sum()) for k in DECAYED)
    assert l1 - l0 == pytest.approx(0.005 * norm, rel=1e-10)
    np.testing.assert_allclose(g1["fc1_w"] - g0["fc1_w"], 0.01 * w.params["fc1_w"], atol=1e-15)
    np.testing.assert_array_equal(g1["fc1_b"], g0["fc1_b"])


# -- training ----------------------------------------------------------------


@pytest.mark.parametrize("epoch, lr", [(0, 1e-3), (9, 1e-3), (10, 1e-4), (19, 1e-4), (20, 1e-5), (29, 1e-5)])
def test_learning_rate_schedule(epoch, lr):
    assert learning_rate(epoch, TrainHyper()) == pytest.approx(lr, rel=1e-12)


def test_stratified_split():
    labels = np.array([0] * 80 + [1] * 120)
    tr, va = stratified_split(labels, 0.1, np.random.default_rng(0))
    assert (labels[va] == 0).sum() == 8 and (labels[va] == 1).sum() == 12
    assert len(np.intersect1d(tr, va)) == 0 and len(tr) + len(va) == 200


def test_train_preconditions():
    x = np.zeros((100, 3, 17, 17))
    with pytest.raises(ValueError):
        train(x, np.zeros(100, int), TrainHyper(batch=16))
    with pytest.raises(ValueError):
        train(x, np.zeros(100, int), TrainHyper(batch=256))


def test_separable_task_learns(separable_run):
    net, hist, xt, yt = separable_run
    assert max(r.val_acc for r in hist.records) >= 0.99
    # both measured in inference mode; the per-epoch train loss is a dropout running mean
    assert hist.records[0].val_loss < hist.initial_val_loss
    p = deep_features(net, xt[yt == 1])
    assert np.mean(p[:, 1] > 0.9) >= 0.95


def test_returned_epoch_is_best(separable_run):
    net, hist, _, _ = separable_run
    losses = hist.val_losses
    assert net.epoch == hist.best_epoch == int(np.argmin(losses))


def test_deep_features_equal_forward(separable_run):
    net, _, xt, _ = separable_run
    np.testing.assert_array_equal(deep_features(net, xt[:5]), forward(net, xt[:5], mode="infer"))
    np.testing.assert_allclose(predict_proba(net, xt, batch=64), forward(net, xt), rtol=1e-6)


def test_training_deterministic():
    x, y = separable_task(600, np.random.default_rng(7))
    hyper = TrainHyper(epochs=2, batch=64)
    a, ha = train(x, y, hyper, rng=np.random.default_rng(3))
    b, hb = train(x, y, hyper, rng=np.random.default_rng(3))
    for k in PARAM_ORDER:
        assert np.array_equal(a.params[k], b.params[k])
    assert ha.val_losses == hb.val_losses


# -- weight file -------------------------------------------------------------


def test_weight_round_trip(tmp_path):
    w = init_weights(NetSpec(), np.random.default_rng(0))
    w.epoch = 12
    h1 = save_weights(w, tmp_path / "a.bin")
    h2 = save_weights(w, tmp_path / "b.bin")
    assert h1 == h2
    back = load_weights(tmp_path / "a.bin")
    assert back.epoch == 12 and back.spec == w.spec
    for k in PARAM_ORDER:
        assert np.array_equal(back.params[k], w.params[k])


def test_weight_file_corruption(tmp_path):
    w = init_weights(NetSpec())
    save_weights(w, tmp_path / "a.bin")
    data = bytearray((tmp_path / "a.bin").read_bytes())
    (tmp_path / "bad.bin").write_bytes(b"XXXXXX" + bytes(data[6:]))
    with pytest.raises(ValueError):
        load_weights(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(bytes(data[:-10]))
    with pytest.raises(ValueError):
        load_weights(tmp_path / "short.bin")


def test_weights_reject_nonfinite():
    params = init_weights(NetSpec()).params
    params["fc1_b"] = params["fc1_b"].copy()
    params["fc1_b"][0] = np.inf
    with pytest.raises(ValueError):
        NetWeights(params)
