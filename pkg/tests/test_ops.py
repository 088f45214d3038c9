import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fscnn import ops
from fscnn.grid import GridFunction, GridSpec, RectDomain, refine
from fscnn.ops import (
    Activation,
    BNParams,
    InterpFn,
    Kernel,
    OpError,
    PoolingFn,
    apply_activation,
    batch_norm_gf,
    downsample_gf,
    reflect_pad_gf,
    upsample_gf,
    valid_conv,
)

import oracles

vals = st.floats(-1e3, 1e3, allow_nan=False)


def gf(a, h=1.0, x0=0.0, y0=0.0):
    return GridFunction.from_array(np.asarray(a, dtype=float), h=h, x0=x0, y0=y0)


# --------------------------------------------------------------------------
# convolution


def test_conv_single_entry_identity():
    u = gf([[1, 2], [3, 4]])
    out = valid_conv(u, Kernel.centered([[1.0]], 1.0))
    assert np.array_equal(out.values[0], [[1, 2], [3, 4]])
    assert out.domain.close_to(u.domain)


def test_conv_quadrature_weight():
    out = valid_conv(gf(np.ones((3, 3)), h=0.5), Kernel.centered(np.ones((2, 2)), 0.5))
    assert out.spec.shape == (2, 2)
    assert np.allclose(out.values, 1.0, rtol=0, atol=1e-15)


def test_conv_output_domain():
    u = gf(np.zeros((5, 6)), h=0.5, x0=1.0, y0=-1.0)
    k = Kernel(np.zeros((1, 1, 3, 2)), RectDomain(-0.75, -0.25, 1.0, 1.5))
    out = valid_conv(u, k)
    assert out.spec.shape == (3, 5)
    # exact convolution lives on (inp - support); cells centered on its lattice points
    assert out.domain.close_to(RectDomain(1.0 + 0.25 - 0.25, -1.0 + 1.25 - 0.25, 2.5, 1.5))


def test_conv_matches_exact_pc_integral():
    rng = np.random.default_rng(0)
    for _ in range(20):
        h = float(rng.choice([1.0, 0.5]))
        u = gf(rng.standard_normal((5, 5)), h=h, x0=h * int(rng.integers(-3, 3)))
        w = rng.standard_normal((3, 3))
        sup = RectDomain(h * int(rng.integers(-3, 1)), h * int(rng.integers(-3, 1)), 3 * h, 3 * h)
        out = valid_conv(u, Kernel(w, sup))
        X, Y = out.spec.cell_centers()
        for i in range(out.spec.rows):
            for j in range(out.spec.cols):
                ref = oracles.exact_pc_conv_at(u.values[0], u.domain.x0, u.domain.y0, h, w, sup.x0, sup.y0, X[i, j], Y[i, j])
                assert out.values[0, i, j] == pytest.approx(ref, abs=1e-12)


def test_conv_matches_tap_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    a = ops.conv2d(x, w, 0.5)
    b = np.stack([oracles.ref_conv(xi, w, 0.5) for xi in x])
    assert np.max(np.abs(a - b)) < 1e-12


def test_conv_backward_is_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((2, 3, 3, 2))
    g = rng.standard_normal((2, 2, 4, 4))
    dx, dw = ops.conv2d_backward(x, w, g, 0.5)
    # <conv(x, w), g> is linear in each argument
    assert np.sum(ops.conv2d(x, w, 0.5) * g) == pytest.approx(np.sum(dx * x), rel=1e-12)
    assert np.sum(ops.conv2d(x, w, 0.5) * g) == pytest.approx(np.sum(dw * w), rel=1e-12)


def test_conv_errors():
    u = gf(np.ones((2, 2)))
    with pytest.raises(OpError, match="larger"):
        valid_conv(u, Kernel.centered(np.ones((3, 1)), 1.0))
    with pytest.raises(OpError, match="resolution"):
        valid_conv(u, Kernel.centered(np.ones((1, 1)), 0.5))
    with pytest.raises(OpError, match="channels"):
        ops.conv2d(np.ones((1, 2, 3, 3)), np.ones((1, 1, 1, 1)), 1.0)


@settings(max_examples=30)
@given(hnp.arrays(np.float64, (1, 1, 5, 4), elements=vals), hnp.arrays(np.float64, (2, 1, 2, 3), elements=vals),
       st.floats(-4, 4, allow_nan=False))
def test_conv_scales_with_kernel(x, w, c):
    a = ops.conv2d(x, c * w, 1.0)
    b = c * ops.conv2d(x, w, 1.0)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)


@settings(max_examples=30)
@given(hnp.arrays(np.float64, (1, 2, 4, 4), elements=vals), hnp.arrays(np.float64, (1, 2, 4, 4), elements=vals))
def test_conv_additive_in_input(x, y):
    w = np.arange(12.0).reshape(1, 2, 2, 3) / 7
    assert np.allclose(ops.conv2d(x + y, w, 1.0), ops.conv2d(x, w, 1.0) + ops.conv2d(y, w, 1.0), rtol=1e-10, atol=1e-8)


def test_conv_refinement_exact_with_kernel_support_offset():
    rng = np.random.default_rng(3)
    u = gf(rng.standard_normal((6, 7)), h=0.5, x0=0.5)
    sup = RectDomain(-1.0, -0.5, 1.5, 1.0)
    w = rng.standard_normal((1, 1, 2, 3))
    a = valid_conv(u, Kernel(w, sup))
    b = valid_conv(refine(u, 2), Kernel(np.repeat(np.repeat(w, 2, 2), 2, 3), sup))
    assert np.max(np.abs(a.values - b.values[:, ::2, ::2])) <= 1e-12 * np.max(np.abs(a.values))


# --------------------------------------------------------------------------
# padding


def test_reflect_pad_edge_inclusive():
    u = gf([[1.0, 2.0, 3.0]])
    out = reflect_pad_gf(u, (2, 0, 0, 0))
    assert np.array_equal(out.values[0, 0], [2, 1, 1, 2, 3])
    assert out.domain.close_to(RectDomain(-2, 0, 5, 1))


def test_reflect_pad_constant_and_errors():
    u = gf(np.full((3, 3), 7.0))
    assert np.all(reflect_pad_gf(u, (4, 1, 2, 5)).values == 7.0)
    with pytest.raises(OpError):
        reflect_pad_gf(u, (-1, 0, 0, 0))


def test_double_reflection_reproduces_interior():
    rng = np.random.default_rng(4)
    for _ in range(10):
        x = rng.standard_normal((1, 1, 6, 6))
        p = ops.reflect_pad(x, (3, 3, 3, 3))
        # mirror across the left edge of the original domain: padded column 3-1-i <-> 3+i
        assert np.array_equal(p[..., 3:6][..., ::-1], p[..., 0:3])
        assert np.array_equal(p[..., 3:-3, 3:-3], x)
        q = ops.reflect_pad(x, (9, 0, 0, 0))  # larger than the input: repeated reflection
        assert np.array_equal(q[0, 0, 0], x[0, 0, 0, [oracles.ref_reflect(i - 9, 6) for i in range(15)]])


@given(hnp.arrays(np.float64, (1, 1, 3, 4), elements=vals), st.tuples(*[st.integers(0, 5)] * 4))
def test_reflect_pad_preserves_sup(x, pad):
    p = ops.reflect_pad(x, pad)
    assert np.max(np.abs(p)) == np.max(np.abs(x))
    ref = oracles.ref_pad(x[0], *pad)
    assert np.array_equal(p[0], ref)


# --------------------------------------------------------------------------
# sampling


def test_pool_examples():
    u = gf([[1.0, 2.0], [3.0, 4.0]])
    assert downsample_gf(u, PoolingFn("max", 2)).values[0, 0, 0] == 4
    assert downsample_gf(u, PoolingFn("average", 2)).values[0, 0, 0] == 2.5
    assert downsample_gf(u, PoolingFn("subsample", 2)).values[0, 0, 0] == 1
    c = gf(np.full((4, 6), 0.3))
    out = downsample_gf(c, PoolingFn("average", 2))
    assert np.all(out.values == 0.3) and out.h == 2.0 and out.domain.close_to(c.domain)


def test_pool_indivisible_names_axis():
    with pytest.raises(OpError, match="cols"):
        downsample_gf(gf(np.ones((4, 3))), PoolingFn("max", 2))
    with pytest.raises(OpError, match="rows"):
        downsample_gf(gf(np.ones((3, 4))), PoolingFn("max", 2))
    with pytest.raises(OpError):
        PoolingFn("max", 0)


def test_upsample_examples():
    u = gf([[1.0, 2.0], [3.0, 4.0]])
    out = upsample_gf(u, InterpFn("constant", 2))
    assert np.array_equal(out.values[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert out.h == 0.5
    c = upsample_gf(gf(np.full((3, 2), -2.5)), InterpFn("bilinear", 3))
    assert np.all(c.values == -2.5)


def test_bilinear_weights():
    x = np.array([[[[0.0, 4.0], [8.0, 12.0]]]])
    y = ops.upsample(x, InterpFn("bilinear", 2))[0, 0]
    assert np.array_equal(y[:2, :2], [[0, 2], [4, 6]])
    assert np.array_equal(y[2:, 2:], [[12, 12], [12, 12]])  # constant extension
    assert np.array_equal(y, oracles.ref_up(x[0], 2, "bilinear")[0])


@given(hnp.arrays(np.float64, (1, 1, 4, 4), elements=vals), st.integers(2, 4))
def test_bilinear_sandwich(x, s):
    y = ops.upsample(x, InterpFn("bilinear", s))[0, 0]
    for r in range(4 * s):
        for c in range(4 * s):
            i, j = r // s, c // s
            st_ = x[0, 0, i : min(i + 2, 4), j : min(j + 2, 4)]
            assert st_.min() <= y[r, c] <= st_.max()


@given(hnp.arrays(np.float64, (2, 3, 6, 6), elements=vals), st.sampled_from([1, 2, 3]))
def test_average_of_constant_upsample_is_identity(x, s):
    up = ops.upsample(x, InterpFn("constant", s))
    assert np.array_equal(ops.downsample(up, PoolingFn("average", s)), x)


@given(hnp.arrays(np.float64, (1, 2, 4, 6), elements=vals), st.sampled_from(["max", "average", "subsample"]))
def test_pool_sandwich(x, kind):
    y = ops.downsample(x, PoolingFn(kind, 2))
    blocks = x.reshape(1, 2, 2, 2, 3, 2)
    assert np.all(y >= blocks.min(axis=(3, 5))) and np.all(y <= blocks.max(axis=(3, 5)))


# --------------------------------------------------------------------------
# activations and batch norm


def test_activation_examples():
    assert np.array_equal(apply_activation(gf([[-1.0, 2.0]]), Activation("relu")).values[0], [[0, 2]])
    assert apply_activation(gf([[-10.0]]), Activation("leaky_relu", 0.1)).values[0, 0, 0] == -1.0
    assert Activation("leaky_relu", 3.0).lipschitz == 3.0
    assert Activation("identity").lipschitz == 1.0


@given(hnp.arrays(np.float64, 20, elements=vals), hnp.arrays(np.float64, 20, elements=vals),
       st.sampled_from([Activation("relu"), Activation("leaky_relu", 0.1), Activation("leaky_relu", 2.0)]))
def test_activation_lipschitz(a, b, act):
    fa, fb = ops.activate(a, act), ops.activate(b, act)
    assert np.all(np.abs(fa - fb) <= act.lipschitz * np.abs(a - b) * (1 + 1e-12))


def test_batch_norm_examples():
    same = [gf(np.full((2, 2), 3.0)), gf(np.full((2, 2), 3.0))]
    out = batch_norm_gf(same, BNParams(1.0, 0.0))
    assert all(np.all(o.values == 0) for o in out)
    pair = [gf(np.zeros((2, 3)), h=0.5), gf(np.full((2, 3), 2.0), h=0.5)]
    lo, hi = batch_norm_gf(pair, BNParams(1.0, 0.0, eps=1e-14))
    assert np.allclose(lo.values, -1.0, atol=1e-12) and np.allclose(hi.values, 1.0, atol=1e-12)


def test_batch_norm_errors():
    with pytest.raises(OpError):
        batch_norm_gf([], BNParams(1.0, 0.0))
    with pytest.raises(OpError):
        BNParams(1.0, 0.0, eps=0.0)
    with pytest.raises(OpError, match="share"):
        batch_norm_gf([gf(np.ones((2, 2))), gf(np.ones((3, 3)))], BNParams(1.0, 0.0))


def test_batch_norm_statistics_are_quadratures():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2, 4, 5))
    m, v = ops.bn_stats(x, 0.25)
    assert np.allclose(m, x.mean(axis=(0, 2, 3)), rtol=1e-13)
    assert np.allclose(v, x.var(axis=(0, 2, 3)), rtol=1e-13)
    y = ops.batch_norm(x, np.array([2.0, -1.0]), np.array([0.5, 1.0]), 1e-5, 0.25)
    ref = oracles.ref_bn(list(x), np.array([2.0, -1.0]), np.array([0.5, 1.0]), 1e-5)
    assert np.allclose(y, np.stack(ref), rtol=0, atol=1e-13)


def test_center_crop():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    assert np.array_equal(ops.center_crop(x, 3, 2)[0, 0], x[0, 0, 1:4, 1:3])
    with pytest.raises(OpError):
        ops.center_crop(x, 6, 1)
