"""Energy, sub-Riemannian distance by optimal control, the rate function J,
constructive controllability and the deterministic Malliavin covariance."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .bundle import (ADMISSIBILITY_TOL, Drift, FramePoint, canonical_field_arrays, develop, develop_batch,
                     rounding_floor)
from .geometry import ManifoldModel
from .paths import CameronMartinPath, PiecewiseLinearPath

ENDPOINT_TOL = 1e-4
PENALTIES = (1e2, 1e3, 1e4)
TIE_TOL = 1e-6
MALLIAVIN_ARC_STEP = 0.015  # control length per RK4 step; keeps |JK - I| near 1e-9


class InfeasibleError(RuntimeError):
    """No control reaching the target was found within the budget."""


class MalliavinError(RuntimeError):
    """The Jacobian system lost invertibility."""


# ---------------------------------------------------------------------------
# energy


def energy(h: PiecewiseLinearPath) -> float:
    return h.energy()


def energy_path(times, gamma, model: ManifoldModel, tol: float = ADMISSIBILITY_TOL) -> float:
    """Energy of a sampled base path; ``inf`` when some chord leaves D.

    Each chord is written in the frame at its midpoint; its D-part gives
    the squared metric speed and its D-perp part the admissibility test.
    """
    times = np.asarray(times, float)
    gamma = np.asarray(gamma, float)
    chord = np.diff(gamma, axis=0)
    c = np.linalg.solve(model.frame(gamma[:-1] + 0.5 * chord), chord[..., None])[..., 0]
    d = model.dim_d
    speed = np.linalg.norm(c, axis=1)
    transverse = np.linalg.norm(c[:, d:], axis=1)
    if np.any(transverse > tol * speed + rounding_floor(gamma)):
        return math.inf
    return float(np.sum(np.sum(c[:, :d] ** 2, axis=1) / np.diff(times)))


# ---------------------------------------------------------------------------
# endpoint map of piecewise-constant controls


class EndpointMap:
    """``u -> psi(h_u)_T`` for controls constant on ``segments`` equal pieces.

    ``u`` is flattened ``(segments, d)`` velocity data.  Evaluations are
    batched so that a central-difference Jacobian costs one call.
    """

    def __init__(self, model: ManifoldModel, x, segments: int = 32, horizon: float = 1.0,
                 substeps: int = 4, drift: Drift | None = None, fd_step: float = 1e-6):
        self.model = model
        self.x = np.asarray(x, float)
        self.m = int(segments)
        self.T = float(horizon)
        self.substeps = int(substeps)
        self.drift = drift
        self.fd_step = fd_step
        self.size = self.m * model.dim_d

    def endpoints(self, U):
        U = np.atleast_2d(U)
        B = U.shape[0]
        inc = U.reshape(B, self.m, self.model.dim_d) * (self.T / self.m)
        x0 = np.broadcast_to(self.x, (B, self.model.dim_n))
        return develop_batch(self.model, x0, np.eye(self.model.dim_n), inc, self.T / self.m,
                             drift=self.drift, substeps=self.substeps)[0]

    def value_and_jacobian(self, u):
        """Endpoint at ``u`` and its ``(n, size)`` central-difference Jacobian."""
        P = self.size
        step = self.fd_step
        U = np.repeat(u[None], 2 * P + 1, axis=0)
        U[1:P + 1] += step * np.eye(P)
        U[P + 1:] -= step * np.eye(P)
        ends = self.endpoints(U)
        return ends[0], (ends[1:P + 1] - ends[P + 1:]).T / (2 * step)

    def path(self, u):
        inc = u.reshape(1, self.m, self.model.dim_d) * (self.T / self.m)
        _, _, xs, _ = develop_batch(self.model, self.x[None], np.eye(self.model.dim_n), inc, self.T / self.m,
                                    drift=self.drift, substeps=self.substeps, record=True)
        times = np.linspace(0.0, self.T, xs.shape[1])
        return times, xs[0]

    def control(self, u) -> CameronMartinPath:
        return CameronMartinPath.from_velocities(u.reshape(self.m, self.model.dim_d), self.T)

    def energy(self, u) -> float:
        return float(np.sum(u ** 2) * self.T / self.m)


def _newton_project(emap: EndpointMap, u, target, tol, max_iter=30):
    """Minimum-norm Gauss-Newton steps onto ``{u : psi(u) = target}``."""
    model = emap.model
    for _ in range(max_iter):
        end, J = emap.value_and_jacobian(u)
        r = model.displacement(end, target)
        nr = float(np.linalg.norm(r))
        if nr <= tol:
            return u, nr
        step = np.linalg.lstsq(J, r, rcond=None)[0]
        t = 1.0
        while t > 1e-4:
            trial = u - t * step
            nt = float(np.linalg.norm(model.displacement(emap.endpoints(trial)[0], target)))
            if nt < nr:
                u = trial
                break
            t *= 0.5
        else:
            return u, nr
    r = model.displacement(emap.endpoints(u)[0], target)
    return u, float(np.linalg.norm(r))


# ---------------------------------------------------------------------------
# distance


@dataclass(frozen=True)
class StartReport:
    index: int
    energy: float
    violation: float


@dataclass(frozen=True, eq=False)
class DistanceResult:
    d_sr: float
    h_star: CameronMartinPath
    times: np.ndarray
    path: np.ndarray
    converged: bool
    constraint_violation: float
    energy: float
    starts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"d_sr": self.d_sr, "energy": self.energy, "converged": self.converged,
                "constraint_violation": self.constraint_violation,
                "starts": [vars(s) for s in self.starts]}


def _initial_control(rng, m, d, scale):
    t = (np.arange(m) + 0.5) / m
    u = np.zeros((m, d))
    for k in range(3):
        u += rng.normal(size=d) * np.cos(2 * np.pi * k * t)[:, None] + rng.normal(size=d) * np.sin(
            2 * np.pi * k * t)[:, None] * (k > 0)
    return scale * u.ravel() / math.sqrt(3)


def _solve_start(emap: EndpointMap, a, u, penalties, max_iter, tol):
    model = emap.model
    m = emap.m
    T = emap.T

    def objective(u, lam, mu):
        end, J = emap.value_and_jacobian(u)
        r = model.displacement(end, a)
        f = np.sum(u ** 2) * T / m + lam @ r + mu * (r @ r)
        g = 2.0 * u * T / m + J.T @ (lam + 2.0 * mu * r)
        return f, g

    lam = np.zeros(model.dim_n)
    for mu in penalties:
        u = minimize(objective, u, args=(lam, mu), jac=True, method="L-BFGS-B",
                     options={"maxiter": max_iter}).x
    mu = penalties[-1]
    for _ in range(10):
        r = model.displacement(emap.endpoints(u)[0], a)
        if np.linalg.norm(r) <= 0.1 * tol:
            break
        lam = lam + 2.0 * mu * r
        u = minimize(objective, u, args=(lam, mu), jac=True, method="L-BFGS-B",
                     options={"maxiter": max_iter}).x
    u, viol = _newton_project(emap, u, a, 1e-3 * tol)
    return u, viol


def sr_distance(model: ManifoldModel, x, a, n_controls: int = 32, n_starts: int = 16,
                penalties=PENALTIES, max_iter: int = 300, tol: float = ENDPOINT_TOL, seed: int = 0,
                substeps: int = 4, workers: int = 1) -> DistanceResult:
    """Minimise the control energy subject to reaching ``a``; ``d_SR = sqrt(min energy)``.

    Quadratic penalties of increasing weight are followed by an augmented
    Lagrangian polish and a Gauss-Newton projection onto the constraint.
    Among feasible starts the lowest energy wins, earlier starts winning ties.
    """
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    emap = EndpointMap(model, x, n_controls, substeps=substeps)
    d = model.dim_d
    if float(np.linalg.norm(model.displacement(a, x))) == 0.0:
        u = np.zeros(emap.size)
        times, path = emap.path(u)
        return DistanceResult(0.0, emap.control(u), times, path, True, 0.0, 0.0, [StartReport(0, 0.0, 0.0)])
    gap = float(np.linalg.norm(model.displacement(a, x)))
    scale = max(gap, math.sqrt(gap), 0.5)

    def run(k):
        rng = np.random.default_rng([seed, k])
        u0 = _initial_control(rng, n_controls, d, scale)
        u, viol = _solve_start(emap, a, u0, penalties, max_iter, tol)
        return u, viol

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(n_starts)))
    else:
        results = [run(k) for k in range(n_starts)]

    reports, best, best_any = [], None, None
    for k, (u, viol) in enumerate(results):
        E = emap.energy(u)
        reports.append(StartReport(k, E, viol))
        if viol <= tol and (best is None or E < best[1] - TIE_TOL):
            best = (u, E, viol)
        if best_any is None or viol < best_any[2]:
            best_any = (u, E, viol)
    converged = best is not None
    u, E, viol = best if converged else best_any
    times, path = emap.path(u)
    return DistanceResult(math.sqrt(E), emap.control(u), times, path, converged, viol, E, reports)


# ---------------------------------------------------------------------------
# rate function


_DISTANCE_CACHE: dict = {}


def cached_distance(model: ManifoldModel, x, a, **opts) -> float:
    """``d_SR(x, a)`` from the model's oracle when present, else a cached solve."""
    if model.distance_oracle is not None:
        return float(model.distance_oracle(np.asarray(x, float), np.asarray(a, float)))
    key = (id(model), tuple(np.round(np.asarray(x, float), 12)), tuple(np.round(np.asarray(a, float), 12)),
           tuple(sorted(opts.items())))
    if key not in _DISTANCE_CACHE:
        res = sr_distance(model, x, a, **opts)
        if not res.converged:
            raise InfeasibleError(f"no feasible path from {x} to {a}")
        _DISTANCE_CACHE[key] = res.d_sr
    return _DISTANCE_CACHE[key]


@dataclass(frozen=True)
class RateValue:
    J: float
    energy: float
    d_sr: float
    diagnostic: str = ""


def rate_J(model: ManifoldModel, x, a, h: PiecewiseLinearPath | None = None, gamma=None, times=None,
           d_sr: float | None = None, u0: FramePoint | None = None, tol: float = ENDPOINT_TOL,
           dt: float | None = None, admissibility_tol: float = ADMISSIBILITY_TOL) -> RateValue:
    """``J = (E(gamma) - d_SR(x, a)^2) / 2`` for a path from ``x`` to ``a``.

    Give either a control ``h`` (developed from ``u0``, by default the
    identity frame at ``x``) or a sampled base path ``gamma`` on ``times``.
    Wrong endpoints or inadmissible paths give ``J = inf``.
    """
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    if (h is None) == (gamma is None):
        raise ValueError("give exactly one of h or gamma")
    if h is not None:
        u0 = u0 or FramePoint.identity(model, x)
        traj = develop(u0, h, model, dt=dt)
        gamma, E = traj.x, h.energy()
    else:
        gamma = np.asarray(gamma, float)
        if times is None:
            times = np.linspace(0.0, 1.0, gamma.shape[0])
        E = energy_path(times, gamma, model, admissibility_tol)
    d = cached_distance(model, x, a) if d_sr is None else float(d_sr)
    start_gap = float(np.linalg.norm(model.displacement(gamma[0], x)))
    end_gap = float(np.linalg.norm(model.displacement(gamma[-1], a)))
    if start_gap > tol or end_gap > tol:
        return RateValue(math.inf, E, d, f"endpoint mismatch: start {start_gap:.2e}, end {end_gap:.2e}")
    if not math.isfinite(E):
        return RateValue(math.inf, E, d, "path is not admissible")
    J = 0.5 * (E - d * d)
    if J < 0:
        if J < -1e-3 * max(1.0, d * d):
            raise ValueError(f"energy {E:.6g} is below d_SR^2 = {d * d:.6g}; the distance is not minimal")
        return RateValue(0.0, E, d, f"clipped {J:.2e} to 0")
    return RateValue(J, E, d)


# ---------------------------------------------------------------------------
# controllability


def connect(model: ManifoldModel, x, a, drift: Callable | None = None, tau: float = 1.0,
            tol: float = ENDPOINT_TOL, n_controls: int = 32, max_starts: int = 16, seed: int = 0,
            substeps: int = 4) -> CameronMartinPath:
    """Some control on ``[0, tau]`` whose development reaches ``a``.

    With a drift field ``V`` the controlled path ``k`` solves
    ``k' = V(k) + sum_i h_i' u<e_i>``, so ``k' - V(k)`` lies in D.  The
    endpoint residual is driven to zero by Gauss-Newton steps with no
    energy term; the first feasible start is returned.
    """
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    dr = None if drift is None else Drift(field=drift, rate=1.0, corrected=False)
    emap = EndpointMap(model, x, n_controls, tau, substeps, dr)
    if drift is None and float(np.linalg.norm(model.displacement(a, x))) == 0.0:
        return emap.control(np.zeros(emap.size))
    scale = max(float(np.linalg.norm(model.displacement(a, x))), 0.5)
    best = math.inf
    for k in range(max_starts):
        rng = np.random.default_rng([seed, k])
        u0 = _initial_control(rng, n_controls, model.dim_d, scale)
        u, viol = _newton_project(emap, u0, a, 0.1 * tol, max_iter=50)
        best = min(best, viol)
        if viol <= tol:
            return emap.control(u)
    raise InfeasibleError(f"no feasible control after {max_starts} starts (best residual {best:.2e})")


def controlled_path(model: ManifoldModel, x, h: PiecewiseLinearPath, drift: Callable | None = None,
                    substeps: int = 4):
    """Base path driven by ``h`` (and the uncorrected drift ``V``); returns ``(times, points)``."""
    dr = None if drift is None else Drift(field=drift, rate=1.0, corrected=False)
    u0 = FramePoint.identity(model, x)
    _, _, xs, _ = develop_batch(model, u0.x[None], u0.e[None], h.increments[None], h.dt, drift=dr,
                                substeps=substeps, record=True)
    times = np.concatenate([[h.times[0]], np.repeat(h.times[1:], 1)]) if substeps == 1 else \
        np.linspace(h.times[0], h.times[-1], xs.shape[1])
    return times, xs[0]


# ---------------------------------------------------------------------------
# deterministic Malliavin covariance


@dataclass(frozen=True, eq=False)
class MalliavinResult:
    gamma: np.ndarray
    det: float
    C: np.ndarray
    J: np.ndarray
    jk_residual: float

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gamma).min())


def _bundle_fields(model: ManifoldModel, Y):
    """Driving fields ``(B, N, d)`` at embedded points ``Y = (x, vec e)``."""
    n = model.dim_n
    x = Y[:, :n]
    e = Y[:, n:].reshape(-1, n, n)
    cols = []
    for i in range(model.dim_d):
        dx, de = canonical_field_arrays(model, x, e, i)
        cols.append(np.concatenate([dx, de.reshape(-1, n * n)], axis=1))
    return np.stack(cols, axis=-1)


def _fields_and_gradients(model, y, step):
    N = y.size
    Y = np.repeat(y[None], 2 * N + 1, axis=0)
    Y[1:N + 1] += step * np.eye(N)
    Y[N + 1:] -= step * np.eye(N)
    V = _bundle_fields(model, Y)
    grad = (V[1:N + 1] - V[N + 1:]) / (2 * step)  # [k, a, i] = d V_i^a / d y_k
    return V[0], np.transpose(grad, (1, 0, 2))  # (N, d), (N, N, d)


def malliavin_cov(model: ManifoldModel, u0: FramePoint, h: PiecewiseLinearPath, t: float = 1.0,
                  substeps: int = 16, fd_step: float = 1e-6) -> MalliavinResult:
    """``Gamma(h, 0)_t`` from the skeleton ODE and its Jacobian pair.

    Integrates ``y' = V(y) h'``, ``J' = A J``, ``K' = -K A`` and
    ``C' = K V V^T K^T`` with ``A = sum_i grad V_i h_i'`` in the embedded
    coordinates ``(x, vec e)``, then projects ``J C J^T`` to the base.
    ``substeps`` is a minimum; fast segments get more steps.
    """
    if not 0 < t <= h.times[-1] + 1e-15:
        raise ValueError("need 0 < t <= horizon of h")
    n = model.dim_n
    N = n + n * n
    y = np.concatenate([u0.x, u0.e.ravel()])
    J = np.eye(N)
    K = np.eye(N)
    C = np.zeros((N, N))
    vel = h.increments / h.dt[:, None]
    residual = 0.0

    def rhs(y, J, K, v):
        V, G = _fields_and_gradients(model, y, fd_step)
        A = G @ v
        KV = K @ V
        return V @ v, A @ J, -K @ A, KV @ KV.T

    for k in range(vel.shape[0]):
        t0, t1 = h.times[k], min(h.times[k + 1], t)
        if t1 <= t0:
            break
        v = vel[k]
        steps = max(substeps, math.ceil(float(np.linalg.norm(v)) * (t1 - t0) / MALLIAVIN_ARC_STEP))
        tau = (t1 - t0) / steps
        for _ in range(steps):
            k1 = rhs(y, J, K, v)
            k2 = rhs(y + 0.5 * tau * k1[0], J + 0.5 * tau * k1[1], K + 0.5 * tau * k1[2], v)
            k3 = rhs(y + 0.5 * tau * k2[0], J + 0.5 * tau * k2[1], K + 0.5 * tau * k2[2], v)
            k4 = rhs(y + tau * k3[0], J + tau * k3[1], K + tau * k3[2], v)
            y = y + tau / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            J = J + tau / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            K = K + tau / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            C = C + tau / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
            residual = max(residual, float(np.abs(J @ K - np.eye(N)).max()))
        if residual > 1e-6:
            raise MalliavinError(f"|JK - I| = {residual:.2e} at segment {k}")
    full = J @ C @ J.T
    gamma = full[:n, :n]
    gamma = 0.5 * (gamma + gamma.T)
    return MalliavinResult(gamma, float(np.linalg.det(gamma)), 0.5 * (C + C.T), J, residual)
