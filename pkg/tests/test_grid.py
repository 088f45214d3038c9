import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fscnn.grid import (
    GridError,
    GridFunction,
    GridSpec,
    RectDomain,
    as_integer,
    common_step,
    conv_resolutions,
    project_pc,
    refine,
    resolution_ladder,
    sup_diff,
    sup_diff_overlap,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def grid_values(max_side=6, channels=(1, 2)):
    return st.tuples(
        st.integers(*channels), st.integers(1, max_side), st.integers(1, max_side)
    ).flatmap(lambda s: hnp.arrays(np.float64, s, elements=finite))


# --------------------------------------------------------------------------
# types


def test_domain_rejects_empty():
    with pytest.raises(GridError):
        RectDomain(0, 0, 0, 1)
    with pytest.raises(GridError):
        RectDomain(0, 0, 1, -2)


def test_spec_requires_integer_cell_counts():
    assert GridSpec(RectDomain(0, 0, 1, 1), 0.1).shape == (10, 10)
    with pytest.raises(GridError, match="width/h"):
        GridSpec(RectDomain(0, 0, 1.05, 1), 0.1)
    with pytest.raises(GridError):
        GridSpec(RectDomain(0, 0, 1, 1), 0.0)


def test_as_integer_tolerance():
    assert as_integer(3.0000000000001) == 3
    with pytest.raises(GridError):
        as_integer(3.001)


def test_cells_tile_domain():
    spec = GridSpec(RectDomain(-1, 2, 2, 1), 0.5)
    X, Y = spec.cell_centers()
    assert spec.shape == (2, 4)
    assert X[0, 0] == -0.75 and Y[0, 0] == 2.25
    assert X[-1, -1] == 0.75 and Y[-1, -1] == 2.75


def test_gridfunction_validation():
    spec = GridSpec.from_shape(2, 3, 1.0)
    with pytest.raises(GridError):
        GridFunction(spec, np.zeros((2, 2)))
    with pytest.raises(GridError, match="finite"):
        GridFunction(spec, np.full((2, 3), np.nan))
    u = GridFunction(spec, np.arange(6.0).reshape(2, 3))
    assert u.channels == 1
    assert not u.values.flags.writeable


def test_evaluate_half_open_cells():
    u = GridFunction.from_array(np.arange(4.0).reshape(2, 2), h=0.5)
    assert u.evaluate(0.0, 0.0)[0] == 0
    assert u.evaluate(0.5, 0.0)[0] == 1  # left edge belongs to the cell
    assert u.evaluate(0.25, 0.75)[0] == 2
    with pytest.raises(GridError):
        u.evaluate(1.0, 0.2)


# --------------------------------------------------------------------------
# projection


def test_project_constant():
    u = project_pc(lambda X, Y: 3.0, GridSpec.from_shape(4, 4, 1.0))
    assert np.all(u.values == 3.0)


def test_project_linear_cell_centers():
    u = project_pc(lambda X, Y: X, GridSpec(RectDomain(0, 0, 1, 1), 0.5))
    assert np.array_equal(u.values[0], [[0.25, 0.75], [0.25, 0.75]])


def test_project_error_halves_per_refinement():
    f = lambda X, Y: np.sin(np.pi * X) * np.sin(np.pi * Y)
    errs = []
    for h in (1 / 8, 1 / 16, 1 / 32):
        spec = GridSpec(RectDomain(0, 0, 1, 1), h)
        u = project_pc(f, spec)
        dense = spec.refined(10)
        X, Y = dense.cell_centers()
        errs.append(np.max(np.abs(refine(u, 10).values[0] - f(X, Y))))
    for a, b in zip(errs, errs[1:]):
        assert 0.4 <= b / a <= 0.6


def test_project_reports_bad_cell():
    def f(X, Y):
        out = np.ones_like(X)
        out[1, 2] = np.inf
        return out

    with pytest.raises(GridError, match=r"k=2, l=1"):
        project_pc(f, GridSpec.from_shape(3, 3, 1.0))


@given(grid_values())
def test_project_own_evaluator_is_identity(v):
    u = GridFunction.from_array(v, h=0.5, x0=-1.0)
    w = project_pc(lambda X, Y: np.stack([[[u.evaluate(x, y)[c] for x, y in zip(rx, ry)] for rx, ry in zip(X, Y)] for c in range(u.channels)]), u.spec, u.channels)
    assert np.array_equal(w.values, u.values)


@given(grid_values(channels=(1, 1)))
def test_projection_bounded_by_sampler_sup(v):
    spec = GridSpec.from_shape(v.shape[1], v.shape[2], 1.0)
    # sampler is a smooth function whose sup we know
    amp = float(np.max(np.abs(v))) + 1.0
    u = project_pc(lambda X, Y: amp * np.cos(X * Y), spec)
    assert np.max(np.abs(u.values)) <= amp


# --------------------------------------------------------------------------
# refinement and resolution arithmetic


def test_refine_constant_copy():
    u = GridFunction.from_array([[5.0]])
    r = refine(u, 3)
    assert r.spec.shape == (3, 3) and np.all(r.values == 5.0)
    assert r.domain.close_to(u.domain)


def test_refine_identity_and_composition():
    rng = np.random.default_rng(0)
    u = GridFunction.from_array(rng.standard_normal((2, 3, 4)), h=0.5)
    assert refine(u, 1) is u
    assert np.array_equal(refine(refine(u, 2), 3).values, refine(u, 6).values)
    with pytest.raises(GridError):
        refine(u, 0)


def test_resolution_ladder_examples():
    assert resolution_ladder(1.0, [(2, 1)]) == [1.0, 2.0]
    assert resolution_ladder(1.0, [(2, 1), (1, 2)]) == [1.0, 2.0, 1.0]
    ladder = resolution_ladder(0.25, [(2, 1), (2, 1), (1, 2), (1, 2)])
    assert ladder[-1] == pytest.approx(0.25) and max(ladder) == 1.0
    assert conv_resolutions(1.0, [(2, 1), (1, 2)]) == [1.0, 1.0]


def test_resolution_ladder_names_layer():
    doms = [RectDomain(0, 0, 6, 6)] * 3
    with pytest.raises(GridError, match="layer 2"):
        resolution_ladder(1.0, [(2, 1), (2, 1)], doms)
    with pytest.raises(GridError):
        resolution_ladder(1.0, [(1.5, 1)])


# --------------------------------------------------------------------------
# sup distances


def test_sup_diff_examples():
    rng = np.random.default_rng(1)
    u = GridFunction.from_array(rng.standard_normal((4, 4)))
    assert sup_diff(u, u) == 0.0
    assert sup_diff(u, refine(u, 2)) == 0.0
    a = GridFunction.from_array(np.ones((2, 2)))
    b = GridFunction.from_array(np.full((4, 4), 1.5), h=0.5)
    assert sup_diff(a, b) == 0.5


def test_sup_diff_errors():
    a = GridFunction.from_array(np.ones((2, 2)))
    with pytest.raises(GridError):
        sup_diff(a, GridFunction.from_array(np.ones((3, 3))))
    c = GridFunction(GridSpec(RectDomain(0, 0, 2, 2), 2 / 3), np.ones((3, 3)))
    assert common_step(1.0, 2 / 3) == (3, 2)
    assert sup_diff(a, c) == 0.0
    with pytest.raises(GridError):
        common_step(1.0, np.pi)


@settings(max_examples=40)
@given(grid_values(4, (1, 1)), grid_values(4, (1, 1)), grid_values(4, (1, 1)))
def test_sup_diff_is_metric(x, y, z):
    s = (1, 4, 4)
    x, y, z = (np.resize(a, s) for a in (x, y, z))
    u = GridFunction.from_array(x)
    v = refine(GridFunction.from_array(y), 2)
    w = GridFunction(GridSpec(RectDomain(0, 0, 4, 4), 2.0), z[:, :2, :2])
    assert sup_diff(u, v) == sup_diff(v, u)
    assert sup_diff(u, w) <= sup_diff(u, v) + sup_diff(v, w) + 1e-12
    assert (sup_diff(u, v) == 0) == np.array_equal(x, y)


def test_sup_diff_overlap_offset_domains():
    u = GridFunction.from_array(np.arange(16.0).reshape(4, 4))
    # v is u shifted by half a cell and sampled at h/2 on the overlap
    fine = refine(u, 2).values[0]
    v = GridFunction.from_array(fine[1:, 1:], h=0.5, x0=0.5, y0=0.5)
    assert sup_diff_overlap(u, v) == 0.0
    w = GridFunction.from_array(fine[1:, 1:] + 0.25, h=0.5, x0=0.5, y0=0.5)
    assert sup_diff_overlap(u, w) == 0.25
    far = GridFunction.from_array(np.ones((2, 2)), x0=10.0)
    with pytest.raises(GridError, match="overlap"):
        sup_diff_overlap(u, far)
