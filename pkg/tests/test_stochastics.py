import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srlab import geometry as g
from srlab import stochastics as s
from srlab.bundle import FramePoint, block_rotation

HEIS = g.heisenberg()
FLAT2 = g.flat_torus(2, 10.0)


@given(st.integers(0, 2 ** 32), st.integers(0, 10 ** 6), st.integers(1, 6))
@settings(max_examples=15)
def test_brownian_is_deterministic_and_starts_at_zero(seed, index, level):
    a = s.sample_brownian(level, (seed, index), 2)
    b = s.sample_brownian(level, (seed, index), 2)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.values[0], np.zeros(2))
    assert a.level == level


def test_brownian_streams_match_block_increments():
    inc = s.brownian_increments(7, [3, 11], 5, 2)
    for row, idx in enumerate([3, 11]):
        w = s.sample_brownian(5, (7, idx), 2)
        assert np.allclose(w.increments, inc[row], rtol=0, atol=1e-15)


def test_brownian_unit_variance():
    N = 100_000
    w1 = s.brownian_increments(0, range(N), 2, 1).sum(axis=1)[:, 0]
    var = float(w1.var(ddof=1))
    assert abs(var - 1.0) <= 3 * math.sqrt(2.0 / (N - 1))


def test_brownian_level_check():
    with pytest.raises(ValueError):
        s.sample_brownian(0, 1)


def test_zero_noise_is_constant():
    u0 = FramePoint(np.array([0.1, 0.2, 0.3]), block_rotation(HEIS, 0.4))
    traj = s.simulate(u0, 0.0, None, 6, (0, 0), HEIS)
    assert np.array_equal(traj.x, np.broadcast_to(u0.x, traj.x.shape))
    syn = g.synthetic_connection()
    traj = s.simulate(FramePoint.identity(syn, np.zeros(3)), 0.0, None, 6, 1, syn)
    assert np.array_equal(traj.x, np.zeros_like(traj.x))


def test_flat_covariance():
    N, eps = 100_000, 0.5
    ens = s.simulate_ensemble(FLAT2, np.zeros(2), eps, N, level=3, seed=4)
    cov = np.cov(ens.endpoints.T)
    se = eps ** 2 * math.sqrt(2.0 / N)
    assert abs(cov[0, 0] - eps ** 2) <= 3 * se and abs(cov[1, 1] - eps ** 2) <= 3 * se
    assert abs(cov[0, 1]) <= 3 * eps ** 2 / math.sqrt(N)


def test_heisenberg_vertical_mean_vanishes():
    ens = s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 20_000, level=8, seed=2)
    z = ens.endpoints[:, 2]
    assert abs(z.mean()) <= 3 * z.std(ddof=1) / math.sqrt(z.size)


def test_drift_moves_the_mean():
    N, eps = 20_000, 0.5
    ens = s.simulate_ensemble(g.flat_torus(1, 20.0), np.zeros(1), eps, N, level=4, seed=1,
                              V=lambda x: np.ones_like(x))
    m = ens.endpoints[:, 0]
    assert abs(m.mean() - eps ** 2) <= 3 * eps / math.sqrt(N)


def test_ensembles_are_order_independent():
    a = s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 300, level=6, seed=9, block=64)
    b = s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 300, level=6, seed=9, block=1000, workers=3)
    c = s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 100, level=6, seed=9, start_index=200)
    assert np.array_equal(a.endpoints, b.endpoints)
    assert np.array_equal(a.endpoints[200:], c.endpoints)


def test_ensemble_paths_recorded():
    ens = s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 10, level=6, seed=0, record_stride=8)
    assert ens.paths.shape == (10, 9, 3)
    assert np.array_equal(ens.paths[:, -1], ens.endpoints)
    assert np.array_equal(ens.paths[:, 0], np.zeros((10, 3)))
    with pytest.raises(ValueError):
        s.simulate_ensemble(HEIS, np.zeros(3), 0.5, 0)


def test_workers_env(monkeypatch):
    monkeypatch.setenv(s.WORKERS_ENV, "3")
    assert s.default_workers() == 3
    monkeypatch.setenv(s.WORKERS_ENV, "junk")
    assert s.default_workers() == 1


def test_energy_distance_identical_and_shifted(rng):
    a = rng.normal(size=(400, 2))
    same = s.energy_distance_test(a, a)
    assert same.statistic == 0.0 and same.passed
    shifted = s.energy_distance_test(a, rng.normal(size=(400, 2)) + 0.5)
    assert shifted.p_value == pytest.approx(1 / 201) and not shifted.passed
    null = s.energy_distance_test(a, rng.normal(size=(400, 2)), seed=3)
    assert null.statistic > -1e-12


def test_energy_distance_streaming_is_exact(rng):
    a, b = rng.normal(size=(150, 3)), rng.normal(size=(90, 3)) + 0.1
    r1 = s.energy_distance_test(a, b, 50, row_block=1000)
    r2 = s.energy_distance_test(a, b, 50, row_block=7)
    assert r1.statistic == pytest.approx(r2.statistic, rel=1e-12) and r1.p_value == r2.p_value
    from scipy.spatial.distance import cdist
    direct = 2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    assert r1.statistic == pytest.approx(direct, rel=1e-10)


def test_energy_distance_accepts_1d(rng):
    r = s.energy_distance_test(rng.normal(size=100), rng.normal(size=100)[:, None], 20)
    assert r.n_a == r.n_b == 100


def test_scaling_law_trivial_and_flat():
    same = s.scaling_law_check(FLAT2, np.zeros(2), 1.0, 300, level=4, seed=5, seed_b=5)
    assert same.statistic == 0.0
    rep = s.scaling_law_check(FLAT2, np.zeros(2), 0.5, 2000, level=4, seed=1)
    assert rep.passed


def test_frame_independence_trivial_and_errors():
    u = FramePoint.identity(HEIS, np.zeros(3))
    rep = s.frame_independence_check(HEIS, np.zeros(3), u, u, 0.5, 200, level=5, seed=0, seed_b=0)
    assert rep.statistic == 0.0
    with pytest.raises(ValueError):
        s.frame_independence_check(HEIS, np.zeros(3), u, FramePoint.identity(HEIS, np.ones(3)), 0.5, 10)


def test_frame_independence_flat_rotation():
    u = FramePoint.identity(FLAT2, np.zeros(2))
    rot = u.act(block_rotation(FLAT2, 1.1))
    assert s.frame_independence_check(FLAT2, np.zeros(2), u, rot, 0.5, 2000, level=4, seed=2).passed


def test_connection_independence_dimension_check():
    with pytest.raises(ValueError):
        s.connection_independence_check(HEIS, FLAT2, np.zeros(3), 0.5, 10)


def test_wong_zakai_decreasing_heisenberg():
    rows = s.wong_zakai_convergence(HEIS, np.zeros(3), 1.0, range(4, 10), n_seeds=100, seed=0)
    gaps = [r.median_gap for r in rows]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))
    slope = np.polyfit([r.level for r in rows], np.log2(gaps), 1)[0]
    assert -0.8 < slope < -0.3


def test_wong_zakai_synthetic_runs():
    rows = s.wong_zakai_convergence(g.synthetic_connection(), np.zeros(3), 0.5, [4, 6], n_seeds=20)
    assert rows[1].median_gap < rows[0].median_gap
