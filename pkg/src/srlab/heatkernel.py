"""Monte Carlo heat-kernel estimates, positivity certificates and the
small-noise curve ``eps^2 log p -> -d_SR^2 / 2``."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .geometry import BoxLattice, ManifoldModel
from .stochastics import DEFAULT_LEVEL, Ensemble, simulate_ensemble

N_BATCHES = 20
BANDWIDTH_CONSTANT = 1.06


@dataclass(frozen=True)
class HeatKernelEstimate:
    """Density of the endpoint law at ``a`` with respect to vol."""

    p_hat: float
    stderr: float
    bandwidth: tuple
    N: int
    eps: float
    t: float
    x: tuple
    a: tuple
    seed: int = 0

    def lower_bound(self, confidence: float = 0.99) -> float:
        return self.p_hat - norm.ppf(confidence) * self.stderr

    @property
    def log_stderr(self) -> float:
        """Delta-method standard error of ``log p_hat``."""
        return self.stderr / self.p_hat if self.p_hat > 0 else math.inf


def plug_in_bandwidth(endpoints) -> np.ndarray:
    """Per-coordinate ``1.06 sigma_k N^(-1/(n+4))``; ``sigma_k`` is of order eps."""
    endpoints = np.asarray(endpoints, float)
    N, n = endpoints.shape
    sigma = endpoints.std(axis=0, ddof=1) if N > 1 else np.ones(n)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return BANDWIDTH_CONSTANT * sigma * N ** (-1.0 / (n + 4))


def _kernel_values(model: ManifoldModel, endpoints, a, b):
    disp = model.displacement(endpoints, a)
    shifts = [np.zeros(model.dim_n)]
    if isinstance(model.lattice, BoxLattice):
        shifts = model.lattice.images(np.zeros(model.dim_n)).tolist()
    vals = np.zeros(endpoints.shape[0])
    norm_const = np.prod(1.0 / (math.sqrt(2 * math.pi) * b))
    for s in shifts:
        z = (disp + np.asarray(s)) / b
        vals += np.exp(-0.5 * np.sum(z * z, axis=1))
    return vals * norm_const, norm_const


def estimate_density(ensemble: Ensemble, a, model: ManifoldModel, bandwidth=None) -> HeatKernelEstimate:
    """Gaussian kernel estimate at ``a`` divided by the volume density there.

    The standard error comes from batch means over ``N_BATCHES`` contiguous
    batches of trajectory indices.  When no sample carries kernel mass the
    estimate is 0 and the error is the rule-of-three binomial bound.
    """
    a = np.asarray(a, float)
    ends = ensemble.endpoints
    N = ends.shape[0]
    b = plug_in_bandwidth(ends) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, float), (model.dim_n,)).copy()
    if np.any(b <= 0):
        raise ValueError("bandwidth must be positive")
    vals, peak = _kernel_values(model, ends, a, b)
    rho = float(model.density(a))
    p_hat = float(vals.mean()) / rho
    if p_hat > 0 and N >= N_BATCHES:
        batches = np.array([chunk.mean() for chunk in np.array_split(vals, N_BATCHES)]) / rho
        stderr = float(batches.std(ddof=1) / math.sqrt(N_BATCHES))
    elif p_hat > 0:
        stderr = float(vals.std(ddof=1) / math.sqrt(N) / rho) if N > 1 else math.inf
    else:
        stderr = 3.0 / N * peak / rho
    return HeatKernelEstimate(p_hat, stderr, tuple(map(float, b)), N, ensemble.eps, ensemble.horizon,
                              tuple(map(float, ensemble.x0)), tuple(map(float, a)), ensemble.seed)


def heat_kernel_mc(model: ManifoldModel, x, a, eps: float, N: int, t: float = 1.0, level: int = DEFAULT_LEVEL,
                   seed: int = 0, bandwidth=None, **kw) -> HeatKernelEstimate:
    """Simulate ``N`` paths on ``[0, t]`` and estimate ``p^eps_t(x, a)``."""
    ens = simulate_ensemble(model, x, eps, N, level, seed, horizon=t, **kw)
    return estimate_density(ens, a, model, bandwidth)


@dataclass(frozen=True)
class PositivityReport:
    estimate: HeatKernelEstimate
    lower_bound: float
    confidence: float

    @property
    def certified(self) -> bool:
        return self.lower_bound > 0


def certify(estimate: HeatKernelEstimate, confidence: float = 0.99) -> PositivityReport:
    return PositivityReport(estimate, estimate.lower_bound(confidence), confidence)


def positivity(model: ManifoldModel, x, a, eps: float, N: int, bandwidth=None, level: int = DEFAULT_LEVEL,
               seed: int = 0, confidence: float = 0.99) -> PositivityReport:
    """One-sided lower confidence bound on ``p^eps_1(x, a)``; positive means certified."""
    return certify(heat_kernel_mc(model, x, a, eps, N, level=level, seed=seed, bandwidth=bandwidth), confidence)


@dataclass(frozen=True)
class LDPRow:
    eps: float
    p_hat: float
    stderr: float
    eps2logp: float
    eps2logp_stderr: float
    target: float
    exact: float
    feasible: bool

    @property
    def gap(self) -> float:
        return abs(self.eps2logp - self.target)


def ldp_curve(model: ManifoldModel, x, a, eps_list, N: int, t: float = 1.0, level: int = DEFAULT_LEVEL,
              seed: int = 0, d_sr: float | None = None, bandwidth=None, **kw) -> list:
    """Rows of ``eps^2 log p_hat`` against ``-d_SR(x, a)^2 / 2``.

    ``exact`` holds ``eps^2 log p`` from the model's heat-kernel oracle when
    there is one (NaN otherwise).  Rows whose estimate is zero or has
    relative error above one half are flagged infeasible.
    """
    from .variational import cached_distance

    x = np.asarray(x, float)
    a = np.asarray(a, float)
    d = cached_distance(model, x, a) if d_sr is None else float(d_sr)
    target = -0.5 * d * d
    rows = []
    for eps in eps_list:
        eps = float(eps)
        if math.exp(-d * d / (2 * eps * eps * t)) < 10.0 / N:
            warnings.warn(f"eps={eps}: expected density below the Monte Carlo floor for N={N}", stacklevel=2)
        est = heat_kernel_mc(model, x, a, eps, N, t, level, seed, bandwidth, **kw)
        e2 = eps * eps
        exact = math.nan
        if model.heat_kernel_oracle is not None:
            exact = e2 * math.log(model.heat_kernel_oracle(e2 * t, x, a))
        feasible = est.p_hat > 0 and est.stderr < 0.5 * est.p_hat
        logp = e2 * math.log(est.p_hat) if est.p_hat > 0 else -math.inf
        rows.append(LDPRow(eps, est.p_hat, est.stderr, logp, e2 * est.log_stderr, target, exact, feasible))
    return rows


def gaps_decreasing(rows) -> bool:
    """Strict decrease of ``|eps^2 log p_hat - target|`` along the rows' order."""
    gaps = [r.gap for r in rows]
    return all(g1 < g0 for g0, g1 in zip(gaps, gaps[1:]))
