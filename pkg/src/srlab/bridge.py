"""Diffusion bridges by endpoint rejection, their finite-dimensional laws on
the flat model, and concentration around minimising geodesics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import kstest, norm

from .bundle import FramePoint
from .geometry import ManifoldModel
from .stochastics import DEFAULT_BLOCK, DEFAULT_LEVEL, simulate_block

DEFAULT_RECORD_POINTS = 64
ORBIT_SIZE = 64


class BridgeError(RuntimeError):
    """No proposal landed in the acceptance ball."""


@dataclass(frozen=True, eq=False)
class BridgeEnsemble:
    times: np.ndarray
    paths: np.ndarray
    delta: float
    acceptance_rate: float
    proposals: int
    eps: float
    x: np.ndarray
    a: np.ndarray
    seed: int
    indices: np.ndarray

    @property
    def accepted(self) -> int:
        return self.paths.shape[0]

    def config(self) -> dict:
        return {"eps": self.eps, "delta": self.delta, "seed": self.seed, "x": self.x.tolist(),
                "a": self.a.tolist(), "proposals": self.proposals, "accepted": self.accepted}


def sample_bridges(model: ManifoldModel, x, a, eps: float, delta: float, N_target: int, budget: int,
                   level: int = DEFAULT_LEVEL, seed: int = 0, record_points: int = DEFAULT_RECORD_POINTS,
                   block: int = DEFAULT_BLOCK) -> BridgeEnsemble:
    """Forward paths whose endpoint falls within ``delta`` of ``a``.

    Proposals are simulated in index order and the first ``N_target``
    acceptances are kept, so the result does not depend on block size.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    K = 2 ** level
    stride = max(1, K // record_points)
    u0 = FramePoint.identity(model, x)
    kept_paths, kept_idx, count, used, start = [], [], 0, 0, 0
    while start < budget and count < N_target:
        idx = np.arange(start, min(start + block, budget))
        ends, paths = simulate_block(model, u0, eps, seed, idx, level, record_stride=stride)
        hit = np.flatnonzero(model.chart_distance(ends, a) <= delta)[:N_target - count]
        kept_paths.append(paths[hit])
        kept_idx.append(idx[hit])
        count += hit.size
        used = int(idx[hit[-1]]) + 1 if count >= N_target else int(idx[-1]) + 1
        start = int(idx[-1]) + 1
    if count == 0:
        raise BridgeError(f"no proposal out of {used} ended within {delta} of a; increase delta or eps")
    indices = np.concatenate(kept_idx)
    paths = np.concatenate(kept_paths)
    times = np.linspace(0.0, 1.0, paths.shape[1])
    return BridgeEnsemble(times, paths, float(delta), indices.size / used, used, float(eps), x, a, int(seed),
                          indices)


# ---------------------------------------------------------------------------
# finite-dimensional distributions on the flat model


@dataclass(frozen=True)
class FddReport:
    ks_stats: tuple
    n_accepted: int
    threshold: float = 0.05
    min_accepted: int = 2000

    @property
    def ks_stat(self) -> float:
        return max(self.ks_stats)

    @property
    def inconclusive(self) -> bool:
        return self.n_accepted < self.min_accepted

    @property
    def passed(self) -> bool:
        return not self.inconclusive and self.ks_stat < self.threshold


def flat_bridge_marginal(model: ManifoldModel, x, a, eps: float, t: float):
    """Mean and standard deviation of the exact flat bridge at time ``t``."""
    x = np.asarray(x, float)
    shift = model.displacement(np.asarray(a, float), x)
    return x + t * shift, eps * math.sqrt(t * (1 - t))


def fdd_consistency(model: ManifoldModel, x, a, eps: float, delta: float = 0.02, t_mid: float = 0.5,
                    N: int = 2000, budget: int = 10 ** 6, level: int = DEFAULT_LEVEL, seed: int = 0) -> FddReport:
    """Kolmogorov-Smirnov distance between accepted bridges at ``t_mid`` and
    the exact Gaussian bridge marginal, per coordinate."""
    if model.dim_d != model.dim_n or model.heat_kernel_oracle is None:
        raise ValueError("fdd_consistency needs a flat model with a closed-form kernel")
    bridges = sample_bridges(model, x, a, eps, delta, N, budget, level, seed)
    k = int(round(t_mid * (bridges.times.size - 1)))
    if abs(bridges.times[k] - t_mid) > 1e-12:
        raise ValueError("t_mid is not on the recorded grid")
    mean, sd = flat_bridge_marginal(model, x, a, eps, t_mid)
    vals = bridges.paths[:, k, :]
    stats = tuple(float(kstest(vals[:, i], norm(mean[i], sd).cdf).statistic) for i in range(model.dim_n))
    return FddReport(stats, bridges.accepted)


# ---------------------------------------------------------------------------
# concentration around minimisers


def _fixed_by_symmetry(model: ManifoldModel, x, a) -> bool:
    if model.symmetry is None:
        return False
    theta = 0.7
    return (np.linalg.norm(model.symmetry(theta, x) - x) < 1e-12
            and np.linalg.norm(model.symmetry(theta, a) - a) < 1e-12)


def geodesic_orbit(model: ManifoldModel, x, a, geodesic, size: int = ORBIT_SIZE) -> np.ndarray:
    """The minimiser and, when ``x`` and ``a`` are fixed by the model's
    symmetry, its images under ``size`` equally spaced group elements."""
    geodesic = np.asarray(geodesic, float)
    if not _fixed_by_symmetry(model, x, a):
        return geodesic[None]
    return np.stack([model.symmetry(2 * math.pi * j / size, geodesic) for j in range(size)])


def sup_distance(model: ManifoldModel, paths, orbit) -> np.ndarray:
    """``min over orbit of sup_t |path_t - ref_t|`` (lattice-aware chart norm)."""
    out = np.full(paths.shape[0], np.inf)
    for ref in orbit:
        out = np.minimum(out, model.chart_distance(paths, ref[None]).max(axis=1))
    return out


def _resample(times, path, new_times):
    return np.stack([np.interp(new_times, times, path[:, i]) for i in range(path.shape[1])], axis=-1)


@dataclass(frozen=True)
class ConcentrationRow:
    eps: float
    median_sup_dist: float
    q90_sup_dist: float
    accepted: int
    acceptance_rate: float
    delta: float


def concentration_curve(model: ManifoldModel, x, a, eps_list, delta_rule: float = 0.1, N_target: int = 500,
                        budget: int = 10 ** 6, level: int = DEFAULT_LEVEL, seed: int = 0, geodesic=None,
                        record_points: int = DEFAULT_RECORD_POINTS) -> list:
    """Sup-distance from accepted bridges to the set of minimising geodesics.

    ``delta = delta_rule * eps``.  ``geodesic`` is ``(times, points)``; by
    default it is taken from :func:`sr_distance`.
    """
    from .variational import sr_distance

    x = np.asarray(x, float)
    a = np.asarray(a, float)
    if geodesic is None:
        res = sr_distance(model, x, a)
        geodesic = (res.times, res.path)
    g_times, g_path = geodesic
    rows = []
    for eps in eps_list:
        delta = delta_rule * eps
        br = sample_bridges(model, x, a, eps, delta, N_target, budget, level, seed, record_points)
        ref = _resample(np.asarray(g_times), np.asarray(g_path), br.times)
        dist = sup_distance(model, br.paths, geodesic_orbit(model, x, a, ref))
        rows.append(ConcentrationRow(float(eps), float(np.median(dist)), float(np.quantile(dist, 0.9)),
                                     br.accepted, br.acceptance_rate, delta))
    return rows


def strictly_decreasing(values) -> bool:
    values = list(values)
    return all(b < a for a, b in zip(values, values[1:]))


@dataclass(frozen=True)
class TubeRow:
    eps: float
    fraction: float
    eps2logfrac: float
    minus_J: float
    accepted: int

    @property
    def feasible(self) -> bool:
        return self.fraction > 0


def rate_function_tube_check(model: ManifoldModel, x, a, gamma_ref, eps_list, tube_radius: float, N: int,
                             budget: int, delta_rule: float = 0.1, level: int = DEFAULT_LEVEL, seed: int = 0,
                             J_ref: float | None = None) -> list:
    """Fraction of bridges inside the sup-norm tube around ``gamma_ref`` on
    the eps ladder, reported as ``eps^2 log fraction`` next to ``-J``.

    ``gamma_ref`` is ``(times, points)``.  The limit is only sandwiched by
    the large-deviation bounds, so the rows are a trend diagnostic.
    """
    from .variational import rate_J

    g_times, g_path = (np.asarray(v, float) for v in gamma_ref)
    if J_ref is None:
        J_ref = rate_J(model, x, a, gamma=g_path, times=g_times).J
    rows = []
    for eps in eps_list:
        br = sample_bridges(model, x, a, eps, delta_rule * eps, N, budget, level, seed)
        ref = _resample(g_times, g_path, br.times)
        inside = sup_distance(model, br.paths, ref[None]) <= tube_radius
        frac = float(inside.mean())
        val = eps * eps * math.log(frac) if frac > 0 else -math.inf
        rows.append(TubeRow(float(eps), frac, val, -float(J_ref), br.accepted))
    return rows
