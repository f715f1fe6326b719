import json

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import dtw_bruteforce
from bridgesched.core import RateCurve, TimeGrid, grid_to_density, validate_grid
from bridgesched.evaluation import dtw_align, mmd
from bridgesched.scheduling import apply_transform, bcr, build_entropic_grid, entropic_schedule

positive = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def curves(draw, min_size=2, max_size=40):
    n = draw(st.integers(min_size, max_size))
    mesh = np.unique(draw(arrays(float, n, elements=st.floats(0.0, 1.0))))
    if len(mesh) < 2:
        mesh = np.array([0.25, 0.75])
    vals = draw(arrays(float, len(mesh), elements=positive))
    return RateCurve(mesh, vals)


@st.composite
def grids(draw, max_steps=8):
    n = draw(st.integers(1, max_steps))
    inner = np.unique(draw(arrays(float, n - 1, elements=st.floats(1e-6, 1 - 1e-6))))
    return TimeGrid(np.r_[0.0, inner, 1.0])


@settings(max_examples=200, deadline=None)
@given(curves(), st.integers(1, 300))
def test_inverse_cdf_grid_always_valid(curve, N):
    g = build_entropic_grid(curve, N)
    validate_grid(g)
    assert g.steps == N and g.nodes[0] == 0.0 and g.nodes[-1] == 1.0


@settings(max_examples=100, deadline=None)
@given(curves(min_size=5), st.integers(2, 60), st.sampled_from(["raw", "log1p"]))
def test_pipeline_density_normalised(curve, N, phi):
    g, dens = entropic_schedule(curve, N, phi)
    assert abs(dens.integral(0.0, 1.0) - 1.0) < 1e-9
    assert abs(grid_to_density(g).integral(0.0, 1.0) - 1.0) < 1e-12
    assert bcr(g, 0.1) > 0


@settings(max_examples=100, deadline=None)
@given(curves())
def test_transforms_preserve_order(curve):
    for phi in ("raw", "log1p"):
        out = apply_transform(curve, phi).values
        order = np.argsort(curve.values, kind="stable")
        assert np.all(np.diff(out[order]) >= 0)


@settings(max_examples=100, deadline=None)
@given(curves())
def test_rate_curve_json_roundtrip(curve):
    back = RateCurve.from_json(json.loads(json.dumps(curve.to_json())))
    np.testing.assert_array_equal(back.mesh, curve.mesh)
    np.testing.assert_array_equal(back.values, curve.values)


@settings(max_examples=100, deadline=None)
@given(grids())
def test_grid_density_integrates_to_one(g):
    assert abs(grid_to_density(g).integral(0.0, 1.0) - 1.0) < 1e-12
    assert grid_to_density(g.reversed()).values.tolist() == grid_to_density(g).values.tolist()


@settings(max_examples=60, deadline=None)
@given(grids(5), grids(5))
def test_dtw_matches_enumeration(a, b):
    d, path = dtw_align(a, b)
    assert abs(d - dtw_bruteforce(a.nodes, b.nodes)) < 1e-12
    assert path[0] == (0, 0) and path[-1] == (a.steps, b.steps)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (6, 2), elements=st.floats(-5, 5)), arrays(float, (4, 2), elements=st.floats(-5, 5)),
       st.floats(0.1, 5.0))
def test_mmd_exactly_symmetric(x, y, h):
    assert mmd(x, y, h) == mmd(y, x, h)
