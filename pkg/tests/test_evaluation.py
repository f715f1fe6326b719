import numpy as np
import pytest

from _oracles import dtw_bruteforce, rbf_mmd2_bruteforce
from bridgesched.core import SampleBatch, TimeGrid
from bridgesched.errors import InvalidInput, NoMatchedUnits, TooFewSamples
from bridgesched.evaluation import (
    MetricRecord,
    ResultsSet,
    bootstrap_mean_ci,
    dtw_align,
    dtw_sequences,
    improvement_pct,
    match_units,
    median_bandwidth,
    mmd,
    paired_bootstrap,
)


def rec(value, scheduler="linear", seed=0, nfe=20, solver="heun", scenario="CC", sigma0=0.5, metric="mmd2"):
    return MetricRecord(scheduler, nfe, solver, seed, scenario, sigma0, metric, value)


def random_grid(rng, n):
    return TimeGrid(np.r_[0.0, np.sort(rng.uniform(size=n - 1)), 1.0])


# ---------------------------------------------------------------- results


def test_results_set_unique_key_and_csv_roundtrip():
    rs = ResultsSet([rec(0.1, seed=s) for s in range(3)])
    with pytest.raises(InvalidInput):
        rs.add(rec(0.2, seed=1))
    back = ResultsSet.from_csv(rs.to_csv())
    assert len(back) == 3
    assert {r.key: r.value for r in back} == {r.key: r.value for r in rs}
    assert back.to_csv() == rs.to_csv()
    assert rs.to_csv().splitlines()[0] == "scheduler,nfe,solver,seed,scenario,sigma0,metric,value"


def test_results_merge_collision():
    a = ResultsSet([rec(0.1)])
    with pytest.raises(InvalidInput):
        a.merge(ResultsSet([rec(0.3)]))
    a.merge(ResultsSet([rec(0.3, seed=9)]))
    assert len(a.select(seed=9)) == 1


# ---------------------------------------------------------------- MMD


def test_mmd_matches_bruteforce():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(15, 2)), rng.normal(size=(12, 2)) + 0.5
    for h in (0.3, 1.0, 2.5):
        assert mmd(x, y, h) == pytest.approx(rbf_mmd2_bruteforce(x, y, h), rel=1e-12, abs=1e-14)


def test_mmd_symmetric_exactly():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = rng.normal(size=(40, 3)), rng.normal(size=(33, 3))
        assert mmd(x, y) == mmd(y, x)
        assert mmd(x, y, 0.7) == mmd(y, x, 0.7)


def test_mmd_same_distribution_concentrates():
    n = 2000
    vals = [mmd(np.random.default_rng([s, 0]).normal(size=(n, 2)), np.random.default_rng([s, 1]).normal(size=(n, 2)))
            for s in range(20)]
    assert np.all(np.abs(vals) <= 4 / np.sqrt(n))


def test_mmd_coincident_samples():
    x = np.random.default_rng(2).normal(size=(200, 2))
    assert mmd(x, x.copy()) <= 1e-12


def test_mmd_far_apart_clusters():
    h = 1.0
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1500, 2))
    y = rng.normal(size=(1500, 2)) + np.array([20 * h, 0.0])
    # Monte-Carlo oracle for E k(X, X') + E k(Y, Y') with 1e5 independent pairs
    o = np.random.default_rng(4)
    d = o.normal(size=(100_000, 2)) - o.normal(size=(100_000, 2))
    within = np.exp(-np.sum(d * d, 1) / (2 * h * h)).mean()
    assert mmd(x, y, h) == pytest.approx(2 * within, rel=0.05)


def test_median_bandwidth():
    assert median_bandwidth(np.array([[0.0], [1.0], [3.0]])) == 2.0
    with pytest.raises(TooFewSamples):
        median_bandwidth(np.zeros((1, 2)))


def test_mmd_errors():
    with pytest.raises(TooFewSamples):
        mmd(np.zeros((1, 2)), np.ones((5, 2)))
    with pytest.raises(InvalidInput):
        mmd(np.zeros((3, 2)), np.ones((3, 3)))
    with pytest.raises(InvalidInput):
        mmd(np.zeros((3, 2)), np.ones((3, 2)), -1.0)
    assert mmd(SampleBatch(np.eye(3)), SampleBatch(np.eye(3) + 1), 1.0) > 0


# ---------------------------------------------------------------- bootstrap


def test_bootstrap_identical_sets():
    a = [rec(v, seed=i) for i, v in enumerate([0.1, 0.4, 0.2, 0.3])]
    b = [rec(v, seed=i, scheduler="entropic") for i, v in enumerate([0.1, 0.4, 0.2, 0.3])]
    assert paired_bootstrap(a, b, R=200) == (0.0, 0.0, 0.0)


def test_bootstrap_constant_shift():
    vals = np.random.default_rng(5).uniform(size=10)
    a = [rec(v, seed=i) for i, v in enumerate(vals)]
    b = [rec(v + 0.5, seed=i, scheduler="entropic") for i, v in enumerate(vals)]
    m, lo, hi = paired_bootstrap(a, b, R=300)
    assert m == pytest.approx(0.5) and lo == pytest.approx(0.5) and hi == pytest.approx(0.5)


def test_bootstrap_order_invariant():
    rng = np.random.default_rng(6)
    a = [rec(v, seed=i) for i, v in enumerate(rng.uniform(size=12))]
    b = [rec(v, seed=i, scheduler="entropic") for i, v in enumerate(rng.uniform(size=12))]
    assert paired_bootstrap(a, b, seed=3) == paired_bootstrap(a[::-1], b[5:] + b[:5], seed=3)


def test_bootstrap_coverage():
    rng = np.random.default_rng(7)
    hits = 0
    for rep in range(1000):
        _, lo, hi = bootstrap_mean_ci(rng.normal(1.0, 2.0, size=50), R=1000, seed=rep)
        hits += lo <= 1.0 <= hi
    assert 930 <= hits <= 970


def test_bootstrap_errors():
    with pytest.raises(NoMatchedUnits):
        paired_bootstrap([rec(0.1, seed=0)], [rec(0.1, seed=1)])
    with pytest.raises(InvalidInput):
        bootstrap_mean_ci([1.0, 2.0], R=50)
    with pytest.raises(InvalidInput):
        match_units([rec(0.1), rec(0.2, scheduler="x")], [rec(0.1)])


def test_improvement_sign():
    base = [rec(0.2, seed=0), rec(0.4, seed=1)]
    cand = [rec(0.1, seed=0, scheduler="e"), rec(0.5, seed=1, scheduler="e")]
    _, pct = improvement_pct(base, cand)
    np.testing.assert_allclose(pct, [50.0, -25.0])


# ---------------------------------------------------------------- DTW


def test_dtw_identical_is_diagonal():
    g = TimeGrid(np.linspace(0, 1, 6))
    d, path = dtw_align(g, g)
    assert d == 0.0 and path == [(i, i) for i in range(6)]


def test_dtw_repeated_node():
    # node 0 of a pairs with both leading zeros of b
    d, path = dtw_sequences([0.0, 1.0], [0.0, 0.0, 1.0])
    assert d == 0.0 and dtw_bruteforce(np.array([0.0, 1.0]), np.array([0.0, 0.0, 1.0])) == 0.0
    assert path == [(0, 0), (0, 1), (1, 2)]


def test_dtw_rejects_invalid_grids():
    with pytest.raises(InvalidInput):
        dtw_align(TimeGrid([0.0, 1.0]), TimeGrid([0.0, 0.0, 1.0]))


def test_dtw_nonnegative_and_zero_only_on_zero_cost_diagonal():
    rng = np.random.default_rng(11)
    for _ in range(20):
        ga, gb = random_grid(rng, 5), random_grid(rng, 5)
        d, _ = dtw_align(ga, gb)
        assert d >= 0
        assert (d == 0) == bool(np.all(ga.nodes == gb.nodes))


@pytest.mark.parametrize("seed", range(8))
def test_dtw_matches_bruteforce_and_is_monotone(seed):
    rng = np.random.default_rng(seed)
    ga, gb = random_grid(rng, int(rng.integers(2, 7))), random_grid(rng, int(rng.integers(2, 7)))
    d, path = dtw_align(ga, gb)
    assert d == pytest.approx(dtw_bruteforce(ga.nodes, gb.nodes), abs=1e-12)
    assert path[0] == (0, 0) and path[-1] == (ga.steps, gb.steps)
    steps = np.diff(np.array(path), axis=0)
    assert np.all(steps >= 0) and np.all(steps.sum(1) >= 1) and np.all(steps <= 1)
    cost = sum(abs(ga.nodes[i] - gb.nodes[j]) for i, j in path)
    assert cost == pytest.approx(d, abs=1e-12)
