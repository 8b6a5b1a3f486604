import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from srlab import geometry as g
from srlab import variational as v
from srlab.bundle import FramePoint, develop
from srlab.paths import PiecewiseLinearPath

HEIS = g.heisenberg()
SYN = g.synthetic_connection()
ORIGIN = np.zeros(3)


def test_energy_examples():
    assert v.energy(PiecewiseLinearPath.linear([1.0, 0.0])) == 1.0
    assert v.energy(PiecewiseLinearPath.linear([1.0, 1.0])) == 2.0
    t = np.linspace(0, 1, 11)
    line = np.stack([t, 0 * t, 0 * t], axis=1)
    assert v.energy_path(t, line, HEIS) == pytest.approx(1.0, rel=1e-14)
    vertical = np.stack([0 * t, 0 * t, t], axis=1)
    assert v.energy_path(t, vertical, HEIS) == math.inf


def test_circle_control_reaches_unit_area():
    # independent oracle for d(0, (0, 0, 1)): a full circle of length L encloses area L^2 / (4 pi)
    L = 2 * math.sqrt(math.pi)
    m = 4096
    s = (np.arange(m) + 0.5) / m
    vel = L * np.stack([np.cos(2 * np.pi * s), np.sin(2 * np.pi * s)], axis=1)
    h = PiecewiseLinearPath.from_velocities(vel)
    end = develop(FramePoint.identity(HEIS, ORIGIN), h, HEIS).x[-1]
    assert np.allclose(end, [0, 0, 1.0], atol=1e-5)
    assert h.energy() == pytest.approx(4 * math.pi, rel=1e-12)


def test_distance_trivial():
    res = v.sr_distance(HEIS, ORIGIN, ORIGIN)
    assert res.d_sr == 0.0 and res.converged and not res.h_star.values.any()


def test_distance_horizontal_line():
    res = v.sr_distance(HEIS, ORIGIN, np.array([1.0, 0, 0]), n_starts=4)
    assert res.converged and res.d_sr == pytest.approx(1.0, rel=5e-3)
    assert res.constraint_violation <= v.ENDPOINT_TOL
    assert np.linalg.norm(res.path[-1] - [1, 0, 0]) <= res.constraint_violation + 1e-12
    E = v.energy_path(res.times, res.path, HEIS, tol=1e-4)
    assert E == pytest.approx(res.h_star.energy(), rel=1e-6)


def test_distance_flat_torus():
    res = v.sr_distance(g.flat_torus(2, 10.0), np.zeros(2), np.array([3.0, 4.0]), n_starts=2)
    assert res.d_sr == pytest.approx(5.0, rel=1e-4)


def test_distance_on_quotient_uses_nearest_image():
    res = v.sr_distance(g.flat_torus(1, 20.0), np.zeros(1), np.array([19.0]), n_starts=2)
    assert res.d_sr == pytest.approx(1.0, rel=1e-4)


def test_distance_generic_target_matches_oracle():
    a = np.array([0.4, 0.2, 0.15])
    res = v.sr_distance(HEIS, ORIGIN, a, n_starts=6)
    assert res.d_sr == pytest.approx(g.heisenberg_distance(ORIGIN, a), rel=1e-2)


def test_distance_symmetry_and_triangle():
    x, y, z = np.array([0.1, 0.2, 0.0]), np.array([0.5, -0.1, 0.2]), np.array([-0.3, 0.3, 0.1])
    d = lambda p, q: v.sr_distance(HEIS, p, q, n_starts=6).d_sr
    dxy, dyx = d(x, y), d(y, x)
    assert abs(dxy - dyx) <= 0.02 * max(dxy, dyx)
    assert d(x, z) <= dxy + d(y, z) + 1e-3


def test_distance_reports_infeasible():
    res = v.sr_distance(HEIS, ORIGIN, np.array([0, 0, 50.0]), n_controls=4, n_starts=1, max_iter=3,
                        penalties=(1e-6,))
    assert not res.converged and res.constraint_violation > v.ENDPOINT_TOL


def test_rate_function_examples():
    a = np.array([1.0, 0, 0])
    detour = PiecewiseLinearPath.from_velocities(np.array([[2.0, 0.0], [0.0, 0.0]]))
    r = v.rate_J(HEIS, ORIGIN, a, h=detour)
    assert r.energy == pytest.approx(2.0) and r.J == pytest.approx(0.5, abs=1e-9)
    wrong = v.rate_J(HEIS, ORIGIN, np.array([0.0, 1.0, 0]), h=detour)
    assert wrong.J == math.inf and "endpoint" in wrong.diagnostic
    straight = v.rate_J(HEIS, ORIGIN, a, h=PiecewiseLinearPath.linear([1.0, 0.0]))
    assert straight.J == 0.0
    with pytest.raises(ValueError):
        v.rate_J(HEIS, ORIGIN, a)


def test_rate_function_on_base_paths():
    a = np.array([1.0, 0, 0])
    t = np.linspace(0, 1, 9)
    line = np.stack([t, 0 * t, 0 * t], axis=1)
    assert v.rate_J(HEIS, ORIGIN, a, gamma=line, times=t).J == pytest.approx(0.0, abs=1e-12)
    bent = line.copy()
    bent[:, 2] = 0.1 * np.sin(np.pi * t)
    assert v.rate_J(HEIS, ORIGIN, a, gamma=bent, times=t).J == math.inf


def test_rate_function_at_minimizer_is_small():
    a = np.array([0.3, 0.0, 0.1])
    res = v.sr_distance(HEIS, ORIGIN, a, n_starts=4)
    r = v.rate_J(HEIS, ORIGIN, a, h=res.h_star, dt=1 / 256)
    assert 0.0 <= r.J <= 1e-3


@settings(max_examples=10)
@given(arrays(float, (4, 2), elements=st.floats(-2, 2, allow_nan=False)))
def test_rate_function_nonnegative(vel):
    h = PiecewiseLinearPath.from_velocities(vel)
    end = develop(FramePoint.identity(HEIS, ORIGIN), h, HEIS, dt=1 / 64).x[-1]
    assert v.rate_J(HEIS, ORIGIN, end, h=h, dt=1 / 64).J >= 0.0


def test_connect_examples():
    assert not v.connect(HEIS, ORIGIN, ORIGIN).values.any()
    a = np.array([0, 0, 0.2])
    h = v.connect(HEIS, ORIGIN, a)
    _, path = v.controlled_path(HEIS, ORIGIN, h)
    assert np.linalg.norm(path[-1] - a) <= 1e-4


def test_connect_with_vertical_drift():
    Z3 = g.frame_field(HEIS, 2)
    a = np.array([0.5, -0.2, 0.1])
    h = v.connect(HEIS, ORIGIN, a, drift=Z3)
    times, k = v.controlled_path(HEIS, ORIGIN, h, drift=Z3)
    assert np.linalg.norm(k[-1] - a) <= 1e-4
    # k' - V(k) must lie in D: its Z3 coordinate vanishes up to integration error
    vel = np.diff(k, axis=0) / np.diff(times)[:, None]
    mid = 0.5 * (k[1:] + k[:-1])
    rel = np.linalg.solve(HEIS.frame(mid), (vel - Z3(mid))[..., None])[..., 0]
    assert np.abs(rel[:, 2]).max() < 1e-3


def test_connect_synthetic():
    a = np.array([0.2, 0.1, -0.1])
    h = v.connect(SYN, ORIGIN, a)
    assert np.linalg.norm(develop(FramePoint.identity(SYN, ORIGIN), h, SYN, dt=1 / 128).x[-1] - a) <= 2e-4


def test_malliavin_flat():
    model = g.flat_torus(2)
    h = PiecewiseLinearPath.from_velocities(np.array([[0.3, -0.1], [1.0, 0.5]]))
    for t in (0.5, 1.0):
        res = v.malliavin_cov(model, FramePoint.identity(model, np.zeros(2)), h, t=t)
        assert np.allclose(res.gamma, t * np.eye(2), atol=1e-12)
        assert res.det == pytest.approx(t ** 2)


def test_malliavin_trivial_control_is_degenerate():
    res = v.malliavin_cov(HEIS, FramePoint.identity(HEIS, ORIGIN), PiecewiseLinearPath.zero(2, 4))
    assert np.allclose(res.gamma, np.diag([1.0, 1.0, 0.0]), atol=1e-12)
    assert abs(res.det) <= 1e-10 and res.jk_residual <= 1e-8


def test_malliavin_nondegenerate_along_line():
    # along h = (t, 0) the flow is x -> x + s Z1; pushing Z_i(path_s) forward to time 1
    # gives Z1 = (1, 0, 0) and (0, 1, s - 1/2) in chart coordinates at (1, 0, 0)
    h = PiecewiseLinearPath.linear([1.0, 0.0])
    res = v.malliavin_cov(HEIS, FramePoint.identity(HEIS, ORIGIN), h, substeps=32)
    s = np.linspace(0, 1, 20001)
    cols = np.stack([np.ones_like(s), 0 * s, 0 * s], axis=1), np.stack([0 * s, np.ones_like(s), 0.5 - (1 - s)], axis=1)
    exact = sum(np.trapezoid(c[:, :, None] * c[:, None, :], s, axis=0) for c in cols)
    assert np.allclose(res.gamma, exact, atol=1e-8)
    assert res.det == pytest.approx(np.linalg.det(exact), rel=1e-6) and res.det > 0


@settings(max_examples=5)
@given(arrays(float, (4, 2), elements=st.floats(-2, 2, allow_nan=False)))
def test_malliavin_psd_and_jk(vel):
    h = PiecewiseLinearPath.from_velocities(vel)
    res = v.malliavin_cov(SYN, FramePoint.identity(SYN, ORIGIN), h)
    assert np.allclose(res.gamma, res.gamma.T, atol=0)
    assert res.min_eigenvalue >= -1e-10
    assert res.jk_residual <= 1e-8


def test_malliavin_rejects_bad_time():
    with pytest.raises(ValueError):
        v.malliavin_cov(HEIS, FramePoint.identity(HEIS, ORIGIN), PiecewiseLinearPath.zero(2), t=2.0)


def test_energy_path_ignores_rounding_sized_chords():
    # a path that nearly stops: the last chords are at the rounding level of the z coordinate
    vel = np.full((8, 2), 1e-11)
    vel[0, 0] = 1.0
    h = PiecewiseLinearPath.from_velocities(vel)
    model = g.heisenberg()
    traj = develop(FramePoint.identity(model, np.array([0.1, -0.2, 0.05])), h, model, dt=2.0 ** -10)
    assert v.energy_path(traj.times, traj.x, model, tol=1e-4) == pytest.approx(h.energy(), rel=1e-6)
