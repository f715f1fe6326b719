import json
import math

import numpy as np
import pytest

from bridgesched.core import RateCurve, StepDensity, TimeGrid, grid_to_density, validate_grid
from bridgesched.errors import (
    AllValuesNonFinite,
    BadEps,
    BadSpec,
    InvalidInput,
    UnnormalizedDensity,
    ZeroTotalMass,
)
from bridgesched.scheduling import (
    PRESETS,
    ScheduleSpec,
    apply_transform,
    baseline_grid,
    bcr,
    build_entropic_grid,
    build_schedule,
    entropic_schedule,
    normalize_density,
    optimal_density,
    postprocess_rate,
    preset,
    schedule_to_json,
)


def bb_abs_rate(M=50, eps=1e-3, d=2):
    s = np.linspace(eps, 1 - eps, M)
    return RateCurve(s, np.abs(d * (1 - 2 * s) / (2 * s * (1 - s))))


# ---------------------------------------------------------------- spec


def test_spec_validation():
    for bad in (dict(kind="karras"), dict(transform="sqrt"), dict(steps=0), dict(gamma=0.0),
                dict(floor=0.0), dict(window=4), dict(a=-1.0)):
        with pytest.raises(BadSpec):
            ScheduleSpec(**bad)
    assert preset("power3", 7) == ScheduleSpec("power", steps=7, gamma=3.0)
    with pytest.raises(BadSpec):
        preset("nope", 5)
    assert set(PRESETS) >= {"linear", "power2", "power3", "log", "cosine", "sigmoid", "entropic"}


# ---------------------------------------------------------------- postprocess


def test_postprocess_identity_window_only_clips():
    c = RateCurve([0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 2.0, 5.0])
    out = postprocess_rate(c, floor=0.5, window=1)
    np.testing.assert_array_equal(out.values, [1.0, 0.5, 2.0, 5.0])


def test_postprocess_interpolates_nonfinite():
    c = RateCurve([0.1, 0.5, 0.9], [1.0, np.nan, 3.0])
    np.testing.assert_allclose(postprocess_rate(c, window=1).values, [1.0, 2.0, 3.0])


def test_postprocess_floor_and_errors():
    rng = np.random.default_rng(0)
    c = RateCurve(np.linspace(0.01, 0.99, 50), rng.normal(size=50))
    out = postprocess_rate(c, floor=0.1)
    assert np.all(out.values >= 0.1)
    with pytest.raises(AllValuesNonFinite):
        postprocess_rate(RateCurve([0.1, 0.2], [np.nan, np.inf]))
    with pytest.raises(InvalidInput):
        postprocess_rate(c, window=2)
    with pytest.raises(InvalidInput):
        postprocess_rate(c, window=51)


def test_postprocess_keeps_end_values():
    c = RateCurve(np.linspace(0.1, 0.9, 9), np.arange(1.0, 10.0) ** 2)
    out = postprocess_rate(c, window=5)
    assert out.values[0] == 1.0 and out.values[-1] == 81.0
    assert out.values[1] == pytest.approx((1 + 4 + 9) / 3)


# ---------------------------------------------------------------- transforms


def test_transform_examples():
    c = RateCurve([0.2, 0.8], [0.0, math.e - 1])
    out = apply_transform(c, "log1p").values
    assert out[0] == 0.0 and out[1] == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(apply_transform(c, "raw").values, c.values)
    with pytest.raises(InvalidInput):
        apply_transform(RateCurve([0.2, 0.8], [-1.0, 1.0]))


@pytest.mark.parametrize("phi", ["raw", "log1p"])
def test_transform_preserves_order(phi):
    v = np.sort(np.random.default_rng(1).exponential(size=30))
    out = apply_transform(RateCurve(np.linspace(0.1, 0.9, 30), v), phi).values
    assert np.all(np.diff(out) >= 0)


# ---------------------------------------------------------------- inverse CDF


def test_constant_curve_gives_linear_grid():
    g = build_entropic_grid(RateCurve([0.1, 0.5, 0.9], [2.0, 2.0, 2.0]), 4)
    np.testing.assert_array_equal(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_linear_rate_sqrt_nodes():
    s = np.linspace(0, 1, 2001)
    s[0] = 1e-12  # strictly positive curve
    curve = RateCurve(s, s.copy())
    assert build_entropic_grid(curve, 2).nodes[1] == pytest.approx(math.sqrt(0.5), abs=2e-3)
    expected = [math.sqrt(k / 4) for k in range(5)]
    np.testing.assert_allclose(build_entropic_grid(curve, 4).nodes, expected, atol=2e-3)


def test_zero_curve_rejected():
    with pytest.raises(ZeroTotalMass):
        build_entropic_grid(RateCurve([0.1, 0.9], [0.0, 0.0]), 4)
    with pytest.raises(InvalidInput):
        build_entropic_grid(RateCurve([0.1, 0.9], [0.0, 1.0]), 4)


@pytest.mark.parametrize("seed", range(10))
def test_entropic_grid_strictly_monotone_with_exact_endpoints(seed):
    rng = np.random.default_rng(seed)
    mesh = np.sort(rng.uniform(0.001, 0.999, 40))
    curve = RateCurve(mesh, rng.exponential(size=40) + 1e-6)
    g = build_entropic_grid(curve, int(rng.integers(1, 200)))
    validate_grid(g)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 1.0
    assert np.all(np.diff(g.nodes) > 0)


def test_composition_converges():
    mesh = np.linspace(0, 1, 4001)
    mesh[0] = 1e-12
    q = RateCurve(mesh, 1.5 * np.sqrt(mesh))
    probe = np.linspace(0.05, 0.95, 200)
    errs = []
    for N in (10, 100, 1000):
        dens = grid_to_density(build_entropic_grid(q, N))
        errs.append(np.max(np.abs(dens(probe) - 1.5 * np.sqrt(probe))))
    assert errs[0] > errs[1] > errs[2]


def test_log1p_grids_valid_for_ordered_curves():
    mesh = np.linspace(0.01, 0.99, 50)
    qa = RateCurve(mesh, np.ones(50))
    qb = RateCurve(mesh, 1.0 + 50 * (mesh - 0.5) ** 2)
    for c in (qa, qb):
        g, dens = entropic_schedule(c, 25)
        validate_grid(g)
        assert dens.integral(0, 1) == pytest.approx(1.0)


# ---------------------------------------------------------------- baselines


def test_baseline_examples():
    np.testing.assert_array_equal(baseline_grid(ScheduleSpec("linear", 4)).nodes, [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_allclose(baseline_grid(ScheduleSpec("cosine", 2)).nodes, [0, 0.5, 1], atol=1e-15)
    np.testing.assert_array_equal(baseline_grid(ScheduleSpec("power", 2, gamma=2.0)).nodes, [0, 0.25, 1])


def test_sigmoid_and_log_formulas():
    s = baseline_grid(ScheduleSpec("sigmoid", 4, a=3.0)).nodes
    lg = 1 / (1 + math.exp(-3.0))
    lo = 1 / (1 + math.exp(3.0))
    assert s[1] == pytest.approx((1 / (1 + math.exp(1.5)) - lo) / (lg - lo))
    assert s[2] == pytest.approx(0.5)
    l = baseline_grid(ScheduleSpec("log", 4, alpha=9.0)).nodes
    assert l[1] == pytest.approx(math.log(1 + 9 / 4) / math.log(10))


@pytest.mark.parametrize("name", ["linear", "power2", "power3", "log", "cosine", "sigmoid"])
@pytest.mark.parametrize("N", [1, 2, 10, 50])
def test_all_baselines_valid(name, N):
    g = build_schedule(preset(name, N))
    validate_grid(g)
    assert g.steps == N


def test_entropic_needs_curve():
    with pytest.raises(BadSpec):
        build_schedule(preset("entropic", 5))
    with pytest.raises(BadSpec):
        baseline_grid(ScheduleSpec("entropic"))


# ---------------------------------------------------------------- BCR


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_bcr_uniform(eps):
    assert bcr(TimeGrid(np.linspace(0, 1, 11)), eps) == pytest.approx(1.0, abs=1e-12)
    assert bcr(StepDensity([0.0, 1.0], [1.0]), eps) == pytest.approx(1.0, abs=1e-12)


def test_bcr_boundary_density():
    q = StepDensity([0.0, 0.25, 0.75, 1.0], [2.0, 0.0, 2.0])
    assert bcr(q, 0.1) == pytest.approx(2.0, abs=1e-12)


def test_bcr_errors():
    with pytest.raises(BadEps):
        bcr(TimeGrid([0.0, 1.0]), 0.5)
    with pytest.raises(UnnormalizedDensity):
        bcr(StepDensity([0.0, 1.0], [2.0]), 0.1)


def test_bcr_log1p_bridge_rate_exceeds_one():
    _, dens = entropic_schedule(bb_abs_rate(), 10)
    assert bcr(dens, 0.1) > 1.0


def test_raw_is_more_boundary_heavy_than_log1p():
    c = bb_abs_rate()
    _, raw = entropic_schedule(c, 10, "raw")
    _, tem = entropic_schedule(c, 10, "log1p")
    assert bcr(raw, 0.1) > bcr(tem, 0.1)


# ---------------------------------------------------------------- optimal density


def test_optimal_density_constant_is_uniform():
    rho = optimal_density(RateCurve([0.1, 0.5, 0.9], [4.0, 4.0, 4.0]), 2)
    np.testing.assert_array_equal(rho.values, 1.0)


def test_optimal_density_linear_error_constant():
    mesh = np.linspace(0, 1, 4001)
    rho = optimal_density(RateCurve(mesh, mesh.copy()), 1)
    np.testing.assert_allclose(rho.values, 1.5 * np.sqrt(mesh), atol=2e-3)


def test_optimal_density_high_order_flattens():
    # exact rho is (102/101) t^(1/101), which drops below 0.95 only for t < 0.002
    mesh = np.linspace(0.01, 1, 1000)
    rho = optimal_density(RateCurve(mesh, mesh.copy()), 100)
    assert np.max(np.abs(rho.values - 1.0)) < 0.05


def test_optimal_density_errors():
    with pytest.raises(ZeroTotalMass):
        optimal_density(RateCurve([0.1, 0.9], [0.0, 0.0]), 1)
    with pytest.raises(InvalidInput):
        optimal_density(RateCurve([0.1, 0.9], [1.0, 1.0]), 0)
    with pytest.raises(ZeroTotalMass):
        normalize_density(RateCurve([0.1, 0.9], [0.0, 0.0]))


# ---------------------------------------------------------------- export


def test_schedule_json_format():
    spec = preset("entropic", 6)
    g = build_schedule(spec, bb_abs_rate())
    d = schedule_to_json(spec, g)
    assert list(d) == ["version", "kind", "transform", "nodes", "bcr"]
    assert d["kind"] == "entropic" and d["transform"] == "log1p" and d["bcr"]["eps"] == 0.1
    back = json.loads(json.dumps(d))
    np.testing.assert_array_equal(back["nodes"], g.nodes)
    assert "transform" not in schedule_to_json(preset("cosine", 3), build_schedule(preset("cosine", 3)))
