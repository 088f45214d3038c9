import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fscnn import autodiff as ad
from fscnn.grid import GridError, GridFunction
from fscnn.models import small_net
from fscnn.network import LayerParams, Params, forward_batch, init_params, value_and_grad, weight_norm
from fscnn.train import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    check_one_hot,
    compensate_weight_decay,
    mse_loss,
    objective,
    objective_and_grad,
    qnorm_loss,
    regularizer,
    train_loop,
    weighted_cross_entropy,
    write_history,
)


def gf(a, h=1.0):
    return GridFunction.from_array(np.asarray(a, dtype=float), h=h)


# --------------------------------------------------------------------------
# losses


def test_mse_loss():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 3))
    assert mse_loss(gf(a), gf(a)) == 0
    assert mse_loss(gf(a + 0.5), gf(a)) == pytest.approx(0.25, rel=1e-14)
    assert mse_loss(gf(a), gf(b)) == pytest.approx(sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 9, rel=1e-12)
    with pytest.raises(GridError):
        mse_loss(gf(a), gf(a, h=0.5))


def test_qnorm_loss():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 4, 4))
    assert qnorm_loss(gf(a, 0.25), gf(a, 0.25), 2) == 0
    # unit-area domain, constant difference c: c^2 / 2
    assert qnorm_loss(gf(np.full((4, 4), 3.0), 0.25), gf(np.zeros((4, 4)), 0.25), 2.0) == pytest.approx(4.5)
    ref = sum(0.0625 * abs(x - y) ** 1.5 for x, y in zip(a.ravel(), b.ravel())) / 1.5
    assert qnorm_loss(gf(a, 0.25), gf(b, 0.25), 1.5) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        qnorm_loss(gf(a), gf(b), 0.5)


def _one_hot(labels, n):
    return np.eye(n)[labels].transpose(2, 0, 1)


def test_cross_entropy():
    labels = np.array([[0, 1], [2, 1]])
    y = gf(_one_hot(labels, 3), 0.5)
    ones = gf(np.ones((2, 2)), 0.5)
    assert weighted_cross_entropy(y, gf(np.zeros((3, 2, 2)), 0.5), ones) == pytest.approx(math.log(3))
    assert weighted_cross_entropy(y, gf(np.zeros((3, 2, 2)), 0.5), gf(np.zeros((2, 2)), 0.5)) == 0
    losses = [weighted_cross_entropy(y, gf(m * _one_hot(labels, 3), 0.5), ones) for m in (1, 5, 10)]
    assert losses[0] > losses[1] > losses[2] > 0
    with pytest.raises(ValueError, match="one-hot"):
        check_one_hot(np.ones((3, 2, 2)))
    with pytest.raises(ValueError):
        weighted_cross_entropy(y, y, gf(-np.ones((2, 2)), 0.5))
    # large logits stay finite
    assert math.isfinite(weighted_cross_entropy(y, gf(1e4 * _one_hot(labels, 3), 0.5), ones))


# --------------------------------------------------------------------------
# objectives


def test_objective_pure_data_and_lambda_additivity():
    cfg = small_net(6, 2, 2)
    params = init_params(cfg, 1)
    rng = np.random.default_rng(2)
    u, y = rng.standard_normal((2, 3, 1, 6, 6))
    base = TrainConfig()
    data = sum(mse_loss(gf(o), gf(t)) for o, t in zip(forward_batch(cfg, params, u), y))
    assert objective(cfg, params, (u, y), base) == pytest.approx(data, rel=1e-13)
    lam = TrainConfig(lam=0.7, nu=0.2)
    bias = math.sqrt(sum(np.sum(lp.bias**2) for lp in params.layers))
    assert objective(cfg, params, (u, y), lam) == pytest.approx(data + 0.7 * weight_norm(params) + 0.2 * bias, rel=1e-13)


def test_objective_zero_params_constant_output():
    cfg = small_net(6, 3, 2)
    params = init_params(cfg, 3).map(lambda n, v: np.zeros_like(v) if n.endswith("kernel") else v)
    rng = np.random.default_rng(3)
    u, y = rng.standard_normal((2, 2, 1, 6, 6))
    b = params.layers[-1].bias[0]
    expect = sum(np.mean((b - yj) ** 2) for yj in y)
    assert objective(cfg, params, (u, y), TrainConfig()) == pytest.approx(expect, rel=1e-13)


def test_regularizer_gradients_match_closed_form():
    cfg = small_net(6, 2, 2, h=1.0)
    params = init_params(cfg, 4)
    u, y = np.random.default_rng(4).standard_normal((2, 2, 1, 6, 6))
    tc0, tc1 = TrainConfig(), TrainConfig(lam=0.5, nu=0.3)
    _, g0 = objective_and_grad(cfg, params, (u, y), tc0)
    _, g1 = objective_and_grad(cfg, params, (u, y), tc1, n_total=4)
    wn = weight_norm(params)
    bn = math.sqrt(sum(np.sum(lp.bias**2) for lp in params.layers))
    for l, (a, b, lp) in enumerate(zip(g0.layers, g1.layers, params.layers)):
        h = params.hs[l]
        assert np.allclose(b.kernel - a.kernel, 0.5 * h * h * lp.kernel / wn / 4, rtol=1e-10, atol=1e-15)
        assert np.allclose(b.bias - a.bias, 0.3 * lp.bias / bn / 4, rtol=1e-10, atol=1e-15)
    rep = ad.grad_check(
        cfg, params, u,
        lambda o, pv: ad.total([ad.scale(ad.mse(o, y), c=2.0)] + regularizer(pv, tc1)),
    )
    assert rep.passed


def test_mask_forward_operator():
    cfg = small_net(4, 1, 1)
    params = init_params(cfg, 5)
    mask = np.zeros((1, 4, 4))
    mask[0, :2] = 1.0
    u, y = np.random.default_rng(5).standard_normal((2, 1, 1, 4, 4))
    tc = TrainConfig(forward_op="mask", mask=mask.tolist())
    out = forward_batch(cfg, params, u)
    assert objective(cfg, params, (u, y), tc) == pytest.approx(np.mean((out * mask - y) ** 2), rel=1e-13)
    with pytest.raises(ValueError):
        TrainConfig(forward_op="mask")


def test_train_config_validation():
    for bad in ({"q": 0.5}, {"beta1": 1.0}, {"lr": -1}, {"lam": -1}, {"loss": "l1"}, {"epochs": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    tc = TrainConfig(lam=0.1, epochs=3)
    assert TrainConfig.from_dict(json.loads(tc.to_json())) == tc


# --------------------------------------------------------------------------
# ADAM


def _params(a):
    return Params([LayerParams(np.asarray(a, dtype=float), np.zeros(1))], (1.0,))


def test_adam_zero_grads_no_decay():
    p = _params(np.ones((1, 1, 2, 2)))
    st_, q = adam_step(OptimizerState.zeros(p), p, p.zeros_like(), TrainConfig(lr=0.1))
    assert q.equal(p) and st_.t == 1


def test_adam_first_step_closed_form():
    g = np.array([[[[0.3, -2.0], [1e-3, 0.0]]]])
    p = _params(np.zeros((1, 1, 2, 2)))
    grads = p.zeros_like()
    grads.layers[0].kernel = g
    tc = TrainConfig(lr=0.01)
    _, q = adam_step(OptimizerState.zeros(p), p, grads, tc)
    # bias-corrected moments after one step are g and g^2
    assert np.allclose(q.layers[0].kernel, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_pure_decay_shrinks():
    p = _params([[[[1.0, -2.0], [0.5, -0.25]]]])
    st_ = OptimizerState.zeros(p)
    tc = TrainConfig(lr=0.01, weight_decay=0.1)
    prev = np.abs(p.layers[0].kernel)
    for _ in range(10):
        st_, p = adam_step(st_, p, p.zeros_like(), tc)
        cur = np.abs(p.layers[0].kernel)
        assert np.all(cur < prev)
        prev = cur


def test_adam_decay_kernels_only():
    p = _params(np.ones((1, 1, 1, 1)))
    p.layers[0].bias = np.ones(1)
    _, q = adam_step(OptimizerState.zeros(p), p, p.zeros_like(), TrainConfig(weight_decay=0.1, decay_all=False))
    assert q.layers[0].bias[0] == 1.0 and q.layers[0].kernel[0, 0, 0, 0] < 1.0


def test_adam_nonfinite_raises_with_step():
    p = _params(np.ones((1, 1, 1, 1)))
    g = p.zeros_like()
    g.layers[0].kernel = np.full((1, 1, 1, 1), np.nan)
    with pytest.raises(TrainingDiverged, match="step 1"):
        adam_step(OptimizerState.zeros(p), p, g, TrainConfig())


def test_compensate_weight_decay():
    assert compensate_weight_decay(0.001, 2) == 0.00025
    assert compensate_weight_decay(0.001, 3) == pytest.approx(0.001 / 9, rel=1e-15)
    assert compensate_weight_decay(0.3, 1) == 0.3
    with pytest.raises(ValueError):
        compensate_weight_decay(0.1, 0)


@given(st.floats(0, 10), st.integers(1, 6), st.integers(1, 6))
def test_compensation_composes(wd, g1, g2):
    assert compensate_weight_decay(wd, g1 * g2) == pytest.approx(
        compensate_weight_decay(compensate_weight_decay(wd, g1), g2), rel=1e-14, abs=1e-300
    )


# --------------------------------------------------------------------------
# training loop


def _toy_data(n=3, size=6, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.uniform(0, 1, (n, 1, size, size))
    return y + 0.1 * rng.standard_normal(y.shape), y


def test_zero_epochs_and_zero_lr():
    cfg = small_net(6, 2, 2)
    p0 = init_params(cfg, 6)
    data = _toy_data()
    p, hist = train_loop(cfg, data, TrainConfig(epochs=0), p0)
    assert p.equal(p0) and len(hist) == 1
    p, hist = train_loop(cfg, data, TrainConfig(epochs=3, lr=0.0, batch_size=2), p0)
    assert p.equal(p0)
    assert len({r["wnorm_fs"] for r in hist}) == 1 and len({r["probe_max_jump"] for r in hist}) == 1
    with pytest.raises(ValueError):
        train_loop(cfg, (data[0][:0], data[1][:0]), TrainConfig(), p0)


def test_training_deterministic_and_history(tmp_path):
    cfg = small_net(6, 2, 2)
    p0 = init_params(cfg, 7)
    data = _toy_data(5)
    tc = TrainConfig(epochs=3, batch_size=2, lr=0.01, seed=3)
    a, ha = train_loop(cfg, data, tc, p0)
    b, hb = train_loop(cfg, data, tc, p0)
    assert a.equal(b) and ha == hb
    assert [r["epoch"] for r in ha] == [0, 1, 2, 3]
    write_history(tmp_path / "h.csv", ha)
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert float(rows[2]["train_loss"]) == ha[2]["train_loss"]
    assert list(rows[0]) == ["epoch", "train_loss", "wnorm_fs", "wnorm_ms", "probe_max_jump"]


def test_overfit_single_sample():
    cfg = small_net(8, 3, 4)
    p0 = init_params(cfg, 8)
    u, y = _toy_data(1, 8, 8)
    tc = TrainConfig(epochs=500, batch_size=1, lr=0.01)
    L0 = objective(cfg, p0, (u, y), tc)
    p, hist = train_loop(cfg, (u, y), tc, p0)
    assert objective(cfg, p, (u, y), tc) < 1e-3 * L0


def test_decay_on_zero_data_shrinks_weights():
    cfg = small_net(6, 3, 2)
    p0 = init_params(cfg, 9).map(lambda n, v: np.zeros_like(v) if n.endswith("bias") else v)
    zeros = np.zeros((4, 1, 6, 6))
    _, hist = train_loop(cfg, (zeros, zeros), TrainConfig(epochs=6, batch_size=2, lr=0.01, weight_decay=0.5), p0)
    norms = [r["wnorm_fs"] for r in hist]
    assert all(b < a for a, b in zip(norms[1:], norms[2:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_history():
    cfg = small_net(6, 2, 2)
    p0 = init_params(cfg, 10)
    u, y = _toy_data()
    with pytest.raises(TrainingDiverged) as e:
        train_loop(cfg, (u, y * 1e300), TrainConfig(epochs=2, lr=0.1), p0)
    assert len(e.value.history) >= 1
