"""Small-noise diffusions on the frame bundle by Wong-Zakai development.

The diffusion ``dU = eps sum_i A_i(U) o dw^i + eps^2 A_0(U) dt`` is
realised by developing ``eps`` times the dyadic piecewise-linear
interpolation of a Brownian path, with the drift ``A_0`` run at clock
rate ``eps^2``.

Every trajectory owns a counter-based random stream keyed by
``(seed, index)``, so an ensemble does not depend on block size, worker
count or evaluation order.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .bundle import Drift, FramePoint, FrameTrajectory, develop_batch
from .geometry import ManifoldModel
from .paths import PiecewiseLinearPath, dyadic_grid

DEFAULT_LEVEL = 12
DEFAULT_BLOCK = 1024
N_PERMUTATIONS = 200
WORKERS_ENV = "SRLAB_WORKERS"


# ---------------------------------------------------------------------------
# random streams


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory ``index`` of run ``seed``."""
    key = np.random.SeedSequence(int(seed)).generate_state(2, np.uint64)
    bitgen = np.random.Philox(key=key, counter=np.array([0, 0, 0, int(index)], dtype=np.uint64))
    return np.random.Generator(bitgen)


def _as_rng(stream) -> np.random.Generator:
    if isinstance(stream, np.random.Generator):
        return stream
    if isinstance(stream, tuple):
        return trajectory_rng(*stream)
    return trajectory_rng(int(stream), 0)


def brownian_increments(seed: int, indices, level: int, dim: int, horizon: float = 1.0) -> np.ndarray:
    """Increments ``(len(indices), 2^level, dim)`` of independent Brownian paths on ``[0, horizon]``."""
    K = 2 ** level
    sd = math.sqrt(horizon / K)
    out = np.empty((len(indices), K, dim))
    for row, idx in enumerate(indices):
        out[row] = trajectory_rng(seed, idx).standard_normal((K, dim))
    out *= sd
    return out


def sample_brownian(level: int, rng_stream, dim: int = 1, horizon: float = 1.0) -> PiecewiseLinearPath:
    """Dyadic piecewise-linear Brownian path ``w(k)`` with ``w_0 = 0``.

    ``rng_stream`` is a Generator, a ``(seed, index)`` pair or an integer seed.
    """
    if level < 1:
        raise ValueError("level must be at least 1")
    K = 2 ** level
    rng = _as_rng(rng_stream)
    inc = rng.standard_normal((K, dim)) * math.sqrt(horizon / K)
    values = np.zeros((K + 1, dim))
    np.cumsum(inc, axis=0, out=values[1:])
    return PiecewiseLinearPath(dyadic_grid(level, horizon), values)


# ---------------------------------------------------------------------------
# simulation


def _drift(eps: float, field: Callable | None) -> Drift:
    return Drift(field=field, rate=eps * eps, corrected=True)


def simulate(u0: FramePoint, eps: float, V: Callable | None, level: int, rng_stream,
             model: ManifoldModel, horizon: float = 1.0) -> FrameTrajectory:
    """One trajectory of the frame diffusion on ``[0, horizon]``."""
    w = sample_brownian(level, rng_stream, model.dim_d, horizon)
    inc = eps * w.increments
    _, _, xs, es = develop_batch(model, u0.x[None], u0.e[None], inc[None], w.dt,
                                 drift=_drift(eps, V), record=True)
    return FrameTrajectory(w.times, xs[0], es[0])


def simulate_block(model: ManifoldModel, u0: FramePoint, eps: float, seed: int, indices, level: int,
                   V: Callable | None = None, horizon: float = 1.0, record_stride: int | None = None):
    """Endpoints ``(B, n)`` and, with ``record_stride``, base paths sampled
    every ``record_stride`` steps for the listed trajectory indices."""
    inc = brownian_increments(seed, indices, level, model.dim_d, horizon)
    inc *= eps
    K = inc.shape[1]
    B = len(indices)
    x0 = np.broadcast_to(u0.x, (B, model.dim_n))
    record = record_stride is not None
    x, _, xs, _ = develop_batch(model, x0, u0.e, inc, horizon / K, drift=_drift(eps, V),
                                record=record, record_stride=record_stride or 1)
    return x, xs


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Endpoints (and optionally base paths) of ``N`` independent trajectories."""

    model: str
    eps: float
    N: int
    seed: int
    level: int
    horizon: float
    x0: np.ndarray
    endpoints: np.ndarray
    times: np.ndarray | None = None
    paths: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.N < 1 or self.endpoints.shape[0] != self.N:
            raise ValueError("ensemble must hold N >= 1 endpoints")

    def config(self) -> dict:
        return {"model": self.model, "eps": self.eps, "N": self.N, "seed": self.seed,
                "level": self.level, "horizon": self.horizon, "x0": list(map(float, self.x0)), **self.params}


def simulate_ensemble(model: ManifoldModel, x0, eps: float, N: int, level: int = DEFAULT_LEVEL, seed: int = 0,
                      V: Callable | None = None, e0=None, horizon: float = 1.0, block: int = DEFAULT_BLOCK,
                      record_stride: int | None = None, workers: int | None = None,
                      start_index: int = 0) -> Ensemble:
    """Simulate trajectories ``start_index .. start_index + N - 1`` of run ``seed``."""
    if N < 1:
        raise ValueError("N must be positive")
    x0 = np.asarray(x0, float)
    u0 = FramePoint(x0, np.eye(model.dim_n) if e0 is None else e0)
    starts = list(range(0, N, block))
    workers = workers or default_workers()

    def run(s):
        idx = range(start_index + s, start_index + min(s + block, N))
        return simulate_block(model, u0, eps, seed, idx, level, V, horizon, record_stride)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    ends = np.concatenate([p[0] for p in parts])
    paths = times = None
    if record_stride is not None:
        paths = np.concatenate([p[1] for p in parts])
        times = np.linspace(0.0, horizon, paths.shape[1])
    return Ensemble(model.name, float(eps), int(N), int(seed), int(level), float(horizon), x0, ends,
                    times, paths)


# ---------------------------------------------------------------------------
# two-sample energy-distance test


@dataclass(frozen=True)
class TwoSampleReport:
    statistic: float
    p_value: float
    n_permutations: int
    n_a: int
    n_b: int
    threshold: float = 0.01

    @property
    def passed(self) -> bool:
        """Non-rejection of equality in law at the threshold."""
        return self.p_value > self.threshold


def energy_distance_test(a, b, n_permutations: int = N_PERMUTATIONS, seed: int = 0,
                         row_block: int = 1024) -> TwoSampleReport:
    """Energy statistic ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with a permutation p-value.

    The pooled distance matrix is streamed in row blocks and multiplied
    against the label matrix of all permutations at once, so memory stays
    at ``row_block x (n_a + n_b)``.
    """
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[1] == 1:
        a = a.T
    na, nb = a.shape[0], b.shape[0]
    Z = np.concatenate([a, b])
    n = na + nb
    rng = np.random.default_rng(seed)
    labels = np.zeros((n, n_permutations + 1))
    labels[:na, 0] = 1.0
    for p in range(1, n_permutations + 1):
        labels[rng.permutation(n)[:na], p] = 1.0
    cols = np.concatenate([labels, np.ones((n, 1))], axis=1)
    DL = np.empty((n, cols.shape[1]))
    for lo in range(0, n, row_block):
        hi = min(lo + row_block, n)
        DL[lo:hi] = cdist(Z[lo:hi], Z) @ cols
    D_in = DL[:, :-1]
    D_all = DL[:, -1:]
    s_aa = np.einsum("ip,ip->p", labels, D_in)
    s_ab = np.einsum("ip,ip->p", labels, D_all - D_in)
    s_bb = np.einsum("ip,ip->p", 1.0 - labels, D_all - D_in)
    stats = 2.0 * s_ab / (na * nb) - s_aa / na ** 2 - s_bb / nb ** 2
    obs = float(stats[0])
    if np.array_equal(a, b):
        obs = 0.0
    exceed = int(np.sum(stats[1:] >= obs - 1e-12 * max(1.0, abs(obs))))
    return TwoSampleReport(obs, (1 + exceed) / (n_permutations + 1), n_permutations, na, nb)


def scaling_law_check(model: ManifoldModel, x, eps: float, N: int, level: int = DEFAULT_LEVEL,
                      seed: int = 0, seed_b: int | None = None, n_permutations: int = N_PERMUTATIONS,
                      V: Callable | None = None) -> TwoSampleReport:
    """Compare ``X^eps(1)`` with ``X^1(eps^2)``; they should agree in law."""
    seed_b = seed + 1 if seed_b is None else seed_b
    A = simulate_ensemble(model, x, eps, N, level, seed, V=V).endpoints
    B = simulate_ensemble(model, x, 1.0, N, level, seed_b, V=V, horizon=eps * eps).endpoints
    return energy_distance_test(A, B, n_permutations, seed)


def frame_independence_check(model: ManifoldModel, x, u0a: FramePoint, u0b: FramePoint, eps: float,
                             N: int, level: int = DEFAULT_LEVEL, seed: int = 0, seed_b: int | None = None,
                             n_permutations: int = N_PERMUTATIONS) -> TwoSampleReport:
    """Projected endpoints started from two frames over the same point ``x``."""
    x = np.asarray(x, float)
    for u in (u0a, u0b):
        if np.linalg.norm(model.displacement(u.x, x)) > 1e-12:
            raise ValueError("both initial frames must sit over x")
    seed_b = seed + 1 if seed_b is None else seed_b
    A = simulate_ensemble(model, x, eps, N, level, seed, e0=u0a.e).endpoints
    B = simulate_ensemble(model, x, eps, N, level, seed_b, e0=u0b.e).endpoints
    return energy_distance_test(A, B, n_permutations, seed)


def connection_independence_check(model_a: ManifoldModel, model_b: ManifoldModel, x, eps: float, N: int,
                                  level: int = DEFAULT_LEVEL, seed: int = 0, seed_b: int | None = None,
                                  n_permutations: int = N_PERMUTATIONS) -> TwoSampleReport:
    """Same geometry under two connections: projected laws must coincide."""
    if model_a.dim_n != model_b.dim_n or model_a.dim_d != model_b.dim_d:
        raise ValueError("models must share dimensions")
    seed_b = seed + 1 if seed_b is None else seed_b
    A = simulate_ensemble(model_a, x, eps, N, level, seed).endpoints
    B = simulate_ensemble(model_b, x, eps, N, level, seed_b).endpoints
    return energy_distance_test(A, B, n_permutations, seed)


@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    median_gap: float


def wong_zakai_convergence(model: ManifoldModel, x, eps: float, levels, n_seeds: int = 100,
                           seed: int = 0) -> list:
    """Median over paths of ``|X(k) - X(k+1)|`` for the dyadic approximations
    of one fine Brownian path per seed."""
    levels = sorted(int(k) for k in levels)
    top = levels[-1] + 1
    fine = brownian_increments(seed, range(n_seeds), top, model.dim_d) * eps
    x0 = np.broadcast_to(np.asarray(x, float), (n_seeds, model.dim_n))
    e0 = np.eye(model.dim_n)

    def endpoint(k):
        stride = 2 ** (top - k)
        inc = fine.reshape(n_seeds, 2 ** k, stride, model.dim_d).sum(axis=2)
        return develop_batch(model, x0, e0, inc, 1.0 / 2 ** k, drift=_drift(eps, None), substeps=stride)[0]

    ends = {k: endpoint(k) for k in set(levels) | {k + 1 for k in levels}}
    return [ConvergenceRow(k, float(np.median(np.linalg.norm(ends[k] - ends[k + 1], axis=1))))
            for k in levels]
