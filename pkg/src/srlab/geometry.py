"""Chart-based sub-Riemannian model geometries.

A model lives on a single global chart of R^n.  Its orthonormal frame is
returned as an ``(..., n, n)`` array whose columns are the vector fields
``Z_1 .. Z_n`` in chart coordinates; the first ``d`` columns span the
distribution D and the remaining ones its complement.  Every evaluator is
vectorised over leading axes, so ``frame(x)`` accepts ``x`` of shape
``(n,)`` or ``(batch, n)``.

Connection coefficients are stored as ``gamma[..., a, b, c]`` meaning
``nabla_{Z_c} Z_b = sum_a gamma[a, b, c] Z_a``.  Indices are 0-based
throughout the package.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import integrate, optimize

RANK_RTOL = 1e-8
DEFAULT_FD_STEP = 1e-4


class ModelDefinitionError(ValueError):
    """Raised when a model violates one of its structural hypotheses."""


# ---------------------------------------------------------------------------
# lattices for periodic quotients


class BoxLattice:
    """Coordinate-wise periods; ``inf`` marks a non-periodic coordinate."""

    def __init__(self, periods):
        self.periods = np.asarray(periods, dtype=float)

    def displacement(self, x, a):
        """Chart displacement from ``a`` to the nearest lattice image of ``x``."""
        diff = np.asarray(x, float) - np.asarray(a, float)
        p = self.periods
        finite = np.isfinite(p)
        out = diff.copy()
        out[..., finite] = diff[..., finite] - p[finite] * np.round(diff[..., finite] / p[finite])
        return out

    def reduce(self, x):
        x = np.asarray(x, float)
        p = self.periods
        finite = np.isfinite(p)
        out = x.copy()
        out[..., finite] = np.mod(x[..., finite], p[finite])
        return out

    def images(self, x, shells=1):
        """Lattice translates of ``x`` within ``shells`` periods (non-periodic axes fixed)."""
        x = np.asarray(x, float)
        p = self.periods
        offsets = [np.arange(-shells, shells + 1) if np.isfinite(pk) else np.zeros(1) for pk in p]
        grid = np.stack(np.meshgrid(*offsets, indexing="ij"), axis=-1).reshape(-1, len(p))
        shift = np.where(np.isfinite(p), grid * np.where(np.isfinite(p), p, 0.0), 0.0)
        return x[None, :] + shift

    def to_dict(self):
        return {"type": "box", "periods": [float(v) for v in self.periods]}


class HeisenbergLattice:
    """Left action of the discrete group {(p, q, r): p, q in Z, r in Z/2}.

    The quotient of the Heisenberg group by this lattice is a compact
    nilmanifold on which the left-invariant frame descends.
    """

    @staticmethod
    def act(g, x):
        g = np.asarray(g, float)
        x = np.asarray(x, float)
        out = g + x
        out[..., 2] = g[..., 2] + x[..., 2] + 0.5 * (g[..., 0] * x[..., 1] - g[..., 1] * x[..., 0])
        return out

    def _best_image(self, x, a):
        x = np.asarray(x, float)
        a = np.asarray(a, float)
        base = np.round(a[..., :2] - x[..., :2])
        best = None
        best_norm = None
        for dp in (-1, 0, 1):
            for dq in (-1, 0, 1):
                p = base[..., 0] + dp
                q = base[..., 1] + dq
                zshift = x[..., 2] + 0.5 * (p * x[..., 1] - q * x[..., 0])
                r = 0.5 * np.round(2.0 * (a[..., 2] - zshift))
                img = np.stack([x[..., 0] + p, x[..., 1] + q, zshift + r], axis=-1)
                nrm = np.linalg.norm(img - a, axis=-1)
                if best is None:
                    best, best_norm = img, nrm
                else:
                    take = nrm < best_norm
                    best = np.where(take[..., None], img, best)
                    best_norm = np.where(take, nrm, best_norm)
        return best

    def displacement(self, x, a):
        return self._best_image(x, a) - np.asarray(a, float)

    def reduce(self, x):
        x = np.asarray(x, float)
        p = -np.floor(x[..., 0])
        q = -np.floor(x[..., 1])
        z = x[..., 2] + 0.5 * (p * x[..., 1] - q * x[..., 0])
        z = z - 0.5 * np.floor(2.0 * z)
        return np.stack([x[..., 0] + p, x[..., 1] + q, z], axis=-1)

    def images(self, x, shells=1):
        x = np.asarray(x, float)
        out = []
        for p in range(-shells, shells + 1):
            for q in range(-shells, shells + 1):
                for r in range(-shells, shells + 1):
                    out.append(self.act(np.array([p, q, 0.5 * r]), x))
        return np.array(out)

    def to_dict(self):
        return {"type": "heisenberg"}


# ---------------------------------------------------------------------------
# the model type


@dataclass(frozen=True, eq=False)
class ManifoldModel:
    """Immutable description of a sub-Riemannian geometry on one chart.

    Optional oracles (exact brackets, divergences, distance, heat kernel,
    exact path flow) are used by tests and as fast paths; every operation
    also works from the evaluators alone.
    """

    name: str
    dim_n: int
    dim_d: int
    frame: Callable
    vol_density: Callable | None = None
    connection: Callable | None = None
    lattice: BoxLattice | HeisenbergLattice | None = None
    exact_bracket: Callable | None = None
    exact_divergence: Callable | None = None
    distance_oracle: Callable | None = None
    heat_kernel_oracle: Callable | None = None
    path_flow: Callable | None = None
    symmetry: Callable | None = None
    divergence_free: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.dim_d <= self.dim_n:
            raise ModelDefinitionError(f"need 1 <= d <= n, got d={self.dim_d}, n={self.dim_n}")

    @property
    def has_connection(self) -> bool:
        return self.connection is not None

    def density(self, x):
        x = np.asarray(x, float)
        if self.vol_density is None:
            return np.ones(x.shape[:-1])
        return np.asarray(self.vol_density(x), float)

    def gamma(self, x):
        x = np.asarray(x, float)
        if self.connection is None:
            return np.zeros(x.shape[:-1] + (self.dim_n,) * 3)
        return np.asarray(self.connection(x), float)

    @property
    def zero_drift_correction(self) -> bool:
        """True when ``drift_correction`` vanishes identically (declared, not probed)."""
        return self.divergence_free and self.connection is None

    def displacement(self, x, a):
        """Chart displacement ``x - a``, reduced to the nearest image on quotients."""
        if self.lattice is None:
            return np.asarray(x, float) - np.asarray(a, float)
        return self.lattice.displacement(x, a)

    def chart_distance(self, x, a):
        return np.linalg.norm(self.displacement(x, a), axis=-1)

    def describe(self) -> dict:
        return {"name": self.name, "n": self.dim_n, "d": self.dim_d, **self.params}


def forbidden_block_mask(n: int, d: int) -> np.ndarray:
    """Boolean ``(n, n)`` mask of index pairs mixing D and its complement."""
    inside = np.arange(n) < d
    return inside[:, None] != inside[None, :]


# ---------------------------------------------------------------------------
# operations


def eval_frame(model: ManifoldModel, x) -> np.ndarray:
    """Evaluate the frame matrix at ``x`` and check that it is invertible."""
    F = np.asarray(model.frame(np.asarray(x, float)), float)
    if not np.all(np.isfinite(F)):
        raise ModelDefinitionError(f"{model.name}: non-finite frame at {x}")
    cond = np.linalg.cond(F)
    if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
        raise ModelDefinitionError(f"{model.name}: singular frame at {x}")
    return F


def frame_field(model: ManifoldModel, i: int) -> Callable:
    """The vector field ``Z_i`` as a callable ``x -> (..., n)``."""
    return lambda x: model.frame(np.asarray(x, float))[..., :, i]


def lie_bracket(X: Callable, Y: Callable, x, fd_step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """``[X, Y](x) = DY(x) X(x) - DX(x) Y(x)`` by central differences."""
    x = np.asarray(x, float)
    Xx = X(x)
    Yx = Y(x)
    dY = (Y(x + fd_step * Xx) - Y(x - fd_step * Xx)) / (2 * fd_step)
    dX = (X(x + fd_step * Yx) - X(x - fd_step * Yx)) / (2 * fd_step)
    return dY - dX


def bracket(model: ManifoldModel, i: int, j: int, x, fd_step: float = DEFAULT_FD_STEP,
            exact: bool = True) -> np.ndarray:
    """Lie bracket ``[Z_i, Z_j](x)``; a model-supplied closed form wins when ``exact``."""
    n = model.dim_n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"frame indices must lie in [0, {n})")
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    if exact and model.exact_bracket is not None:
        return np.asarray(model.exact_bracket(i, j, np.asarray(x, float)), float)
    if i == j:
        return np.zeros(np.shape(x))
    return lie_bracket(frame_field(model, i), frame_field(model, j), x, fd_step)


@dataclass
class RankReport:
    rank: int
    depth_reached: int
    full_rank: bool
    singular_values: np.ndarray


def hormander_rank(model: ManifoldModel, x, max_depth: int = 4,
                   fd_step: float = DEFAULT_FD_STEP) -> RankReport:
    """Rank of the iterated brackets of ``Z_1 .. Z_d`` at ``x``, depth by depth.

    Depth ``k`` adds ``[Z_i, B]`` for every ``B`` of depth ``k-1``.  The rank
    uses the singular-value threshold ``1e-8 * s_max``.  Failure to reach
    rank ``n`` is reported, not raised.
    """
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    x = np.asarray(x, float)
    n, d = model.dim_n, model.dim_d
    gens = [frame_field(model, i) for i in range(d)]
    level = list(gens)
    # depth-2 brackets of frame fields may come from the model's closed form
    level_ids = [(i,) for i in range(d)]
    vectors = [g(x) for g in level]
    rank, sv = _rank(vectors)
    depth = 1
    while rank < n and depth < max_depth:
        depth += 1
        new_level, new_ids = [], []
        for i, g in enumerate(gens):
            for ids, B in zip(level_ids, level):
                if len(ids) == 1 and ids[0] == i:
                    continue
                if len(ids) == 1 and model.exact_bracket is not None:
                    j = ids[0]
                    fn = (lambda y, i=i, j=j: np.asarray(model.exact_bracket(i, j, y), float))
                else:
                    step = fd_step ** (1.0 / depth) if depth > 2 else fd_step
                    fn = (lambda y, g=g, B=B, step=step: lie_bracket(g, B, y, step))
                new_level.append(fn)
                new_ids.append((i,) + ids)
        level, level_ids = new_level, new_ids
        vectors.extend(fn(x) for fn in level)
        rank, sv = _rank(vectors)
    return RankReport(rank=rank, depth_reached=depth, full_rank=rank == n, singular_values=sv)


def _rank(vectors):
    M = np.atleast_2d(np.array(vectors, dtype=float))
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0, sv
    return int(np.sum(sv > RANK_RTOL * sv[0])), sv


def divergence(model: ManifoldModel, i: int, x, fd_step: float = DEFAULT_FD_STEP,
               exact: bool = True):
    """``div Z_i`` with respect to vol, i.e. ``sum_k d_k(rho Z_i^k) / rho``."""
    x = np.asarray(x, float)
    if exact and model.exact_divergence is not None:
        return np.asarray(model.exact_divergence(i, x), float)
    n = model.dim_n
    total = np.zeros(x.shape[:-1])
    for k in range(n):
        step = np.zeros(n)
        step[k] = fd_step
        up = model.density(x + step) * model.frame(x + step)[..., k, i]
        dn = model.density(x - step) * model.frame(x - step)[..., k, i]
        total = total + (up - dn) / (2 * fd_step)
    return total / model.density(x)


def drift_correction_coefficients(model: ManifoldModel, x, fd_step: float = DEFAULT_FD_STEP,
                                  exact: bool = True) -> np.ndarray:
    """Coordinates of the drift correction in ``Z_1 .. Z_d``."""
    x = np.asarray(x, float)
    d = model.dim_d
    if exact and model.zero_drift_correction:
        return np.zeros(x.shape[:-1] + (d,))
    coeff = np.stack([np.broadcast_to(divergence(model, i, x, fd_step, exact), x.shape[:-1])
                      for i in range(d)], axis=-1)
    if model.has_connection:
        # sum over j of gamma[j, i, j]
        coeff = coeff - np.einsum("...jij->...i", model.gamma(x)[..., :d, :d, :d])
    return 0.5 * coeff


def drift_correction(model: ManifoldModel, x, fd_step: float = DEFAULT_FD_STEP,
                     exact: bool = True) -> np.ndarray:
    """Vector field ``(Delta_sub - Delta_tilde) / 2`` at ``x``.

    Locally ``0.5 * [sum_i div(Z_i) Z_i - sum_{i,j<d} gamma[j, i, j] Z_i]``.
    """
    x = np.asarray(x, float)
    if exact and model.zero_drift_correction:
        return np.zeros(x.shape)
    coeff = drift_correction_coefficients(model, x, fd_step, exact)
    F = model.frame(x)
    return np.einsum("...ki,...i->...k", F[..., :, :model.dim_d], coeff)


def directional(f: Callable, x, v, fd_step: float):
    """Central-difference derivative of ``f`` at ``x`` along ``v``."""
    return (f(x + fd_step * v) - f(x - fd_step * v)) / (2 * fd_step)


def apply_sub_laplacian(model: ManifoldModel, f: Callable, x, fd_step: float = DEFAULT_FD_STEP,
                        exact: bool = True):
    """``Delta_sub f(x) = sum_i Z_i^2 f + div(Z_i) Z_i f`` by nested differences."""
    x = np.asarray(x, float)
    total = 0.0
    for i in range(model.dim_d):
        Z = frame_field(model, i)

        def Zf(y, Z=Z):
            return directional(f, y, Z(y), fd_step)

        total = total + directional(Zf, x, Z(x), fd_step) + divergence(model, i, x, fd_step, exact) * Zf(x)
    return total


# ---------------------------------------------------------------------------
# validation


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    model: str
    checks: list
    max_depth_needed: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def table(self) -> str:
        rows = [f"{c.name:<28} {'PASS' if c.passed else 'FAIL'}  {c.detail}" for c in self.checks]
        return "\n".join(rows)


DEFAULT_TOLERANCES = {"cond": 1e10, "antisymmetry": 1e-12, "block": 1e-12, "max_depth": 4}


def validate_model(model: ManifoldModel, sample_points, tolerances: dict | None = None) -> ValidationReport:
    """Run the structural checks at every sample point; never raises."""
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    pts = np.atleast_2d(np.asarray(sample_points, float))
    n, d = model.dim_n, model.dim_d
    mask = forbidden_block_mask(n, d)
    checks = []

    def run(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # structured failure instead of propagating
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        checks.append(CheckResult(name, bool(ok), detail))

    def frame_check():
        F = np.asarray(model.frame(pts), float)
        if not np.all(np.isfinite(F)):
            return False, "non-finite frame entries"
        cond = np.linalg.cond(F)
        worst = int(np.argmax(cond))
        return bool(np.all(cond < tol["cond"])), f"max cond {cond[worst]:.3g} at {pts[worst].tolist()}"

    def density_check():
        rho = model.density(pts)
        return bool(np.all(rho > 0) and np.all(np.isfinite(rho))), f"min density {rho.min():.3g}"

    def antisym_check():
        G = model.gamma(pts)
        err = np.abs(G + np.swapaxes(G, -3, -2)).max() if G.size else 0.0
        return err <= tol["antisymmetry"], f"max |G[a,b,c] + G[b,a,c]| = {err:.3g}"

    def block_check():
        G = model.gamma(pts)
        err = np.abs(G[..., mask, :]).max() if mask.any() else 0.0
        return err <= tol["block"], f"max forbidden-block entry {err:.3g}"

    depth_needed = [0]

    def hormander_check():
        worst_rank, depth = n, 0
        for p in pts:
            rep = hormander_rank(model, p, tol["max_depth"])
            worst_rank = min(worst_rank, rep.rank)
            depth = max(depth, rep.depth_reached)
        depth_needed[0] = depth
        return worst_rank == n, f"min rank {worst_rank}/{n}, depth {depth}"

    run("frame_invertible", frame_check)
    run("density_positive", density_check)
    run("connection_antisymmetric", antisym_check)
    run("connection_block_pattern", block_check)
    run("hormander", hormander_check)
    return ValidationReport(model.name, checks, depth_needed[0])


# ---------------------------------------------------------------------------
# built-in models


def _heis_frame(x):
    x = np.asarray(x, float)
    F = np.zeros(x.shape[:-1] + (3, 3))
    F[..., 0, 0] = 1.0
    F[..., 2, 0] = -0.5 * x[..., 1]
    F[..., 1, 1] = 1.0
    F[..., 2, 1] = 0.5 * x[..., 0]
    F[..., 2, 2] = 1.0
    return F


def _heis_bracket(i, j, x):
    x = np.asarray(x, float)
    out = np.zeros(x.shape)
    if (i, j) == (0, 1):
        out[..., 2] = 1.0
    elif (i, j) == (1, 0):
        out[..., 2] = -1.0
    return out


def _zero_divergence(i, x):
    return np.zeros(np.asarray(x).shape[:-1])


def heisenberg_inverse_mul(x, a):
    """Group element ``x^{-1} a`` for the law ``(p, q) -> p + q + (0, 0, (p1 q2 - p2 q1) / 2)``."""
    x = np.asarray(x, float)
    a = np.asarray(a, float)
    out = a - x
    out[..., 2] = a[..., 2] - x[..., 2] - 0.5 * (x[..., 0] * a[..., 1] - x[..., 1] * a[..., 0])
    return out


def heisenberg_distance(x, a) -> float:
    """Closed-form sub-Riemannian distance on the Heisenberg group.

    Geodesics project to circular arcs.  With ``r`` the planar distance and
    ``z`` the signed area, the arc half-angle ``theta`` solves
    ``(2 theta - sin 2 theta) / sin^2 theta = 8 |z| / r^2`` and the
    distance is ``r theta / sin theta``.
    """
    g = heisenberg_inverse_mul(x, a)
    r = math.hypot(g[0], g[1])
    z = abs(g[2])
    if z == 0.0:
        return r
    if 8.0 * z > 1e24 * r * r:
        # theta -> pi: expansion in pi - theta, remainder O(r^2)
        return math.sqrt(4.0 * math.pi * z) - r
    target = 8.0 * z / r ** 2
    if target < 1e-4:
        # 4 theta / 3 + 8 theta^3 / 45 = target
        th = 0.75 * target
        th -= 2.0 * th ** 3 / 15.0
        return r * (1.0 + th * th / 6.0 + 7.0 * th ** 4 / 360.0)
    # solve for phi = pi - theta so that theta near pi keeps relative accuracy
    f = lambda phi: (2.0 * (math.pi - phi) + math.sin(2.0 * phi)) / math.sin(phi) ** 2 - target
    lo = min(1.0, 0.5 * math.sqrt(2.0 * math.pi / target))
    hi = math.pi - min(1e-3, 0.3 * target)
    phi = optimize.brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    return r * (math.pi - phi) / math.sin(phi)


def heisenberg_heat_kernel(t, x, a) -> float:
    """Density of the ``(Z_1^2 + Z_2^2)/2`` diffusion at time ``t`` (Lebesgue).

    Fourier inversion in the vertical variable of the conditional
    characteristic function of Levy's area.
    """
    g = heisenberg_inverse_mul(x, a)
    r2 = g[0] ** 2 + g[1] ** 2
    z = g[2]

    def integrand(lam):
        s = 0.5 * lam * t
        if s < 1e-8:
            return math.cos(lam * z)
        if s > 350:
            return 0.0
        return math.cos(lam * z) * (s / math.sinh(s)) * math.exp(-r2 / (2 * t) * (s / math.tanh(s) - 1.0))

    val, _ = integrate.quad(integrand, 0.0, np.inf, limit=800, epsabs=1e-13, epsrel=1e-11)
    return math.exp(-r2 / (2 * t)) / (2 * math.pi * t) * val / math.pi


def _heis_path_flow(x0, C):
    """Exact flow of piecewise-constant frame controls: ``C[b, k]`` is the
    increment of segment ``k`` in Z-coordinates."""
    x0 = np.asarray(x0, float)
    C = np.asarray(C, float)
    B, K, _ = C.shape
    out = np.empty((B, K + 1, 3))
    out[:, 0] = x0
    np.cumsum(C[:, :, 0], axis=1, out=out[:, 1:, 0])
    np.cumsum(C[:, :, 1], axis=1, out=out[:, 1:, 1])
    out[:, 1:, 0] += x0[:, None, 0]
    out[:, 1:, 1] += x0[:, None, 1]
    area = 0.5 * (out[:, :-1, 0] * C[:, :, 1] - out[:, :-1, 1] * C[:, :, 0])
    np.cumsum(area, axis=1, out=out[:, 1:, 2])
    out[:, 1:, 2] += x0[:, None, 2]
    return out


def _rotate_xy(theta, pts):
    pts = np.asarray(pts, float)
    c, s = math.cos(theta), math.sin(theta)
    out = pts.copy()
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
    return out


def heisenberg() -> ManifoldModel:
    """Heisenberg group R^3 with ``Z1 = (1, 0, -y/2)``, ``Z2 = (0, 1, x/2)``, ``Z3 = (0, 0, 1)``."""
    return ManifoldModel(
        name="heisenberg", dim_n=3, dim_d=2, frame=_heis_frame,
        exact_bracket=_heis_bracket, exact_divergence=_zero_divergence,
        distance_oracle=heisenberg_distance, heat_kernel_oracle=heisenberg_heat_kernel,
        path_flow=_heis_path_flow, symmetry=_rotate_xy, divergence_free=True,
    )


def nilmanifold() -> ManifoldModel:
    """Compact quotient of the Heisenberg group by its half-integer lattice."""
    return ManifoldModel(
        name="nilmanifold", dim_n=3, dim_d=2, frame=_heis_frame, lattice=HeisenbergLattice(),
        exact_bracket=_heis_bracket, exact_divergence=_zero_divergence,
        path_flow=_heis_path_flow, divergence_free=True,
    )


def _identity_frame(n):
    def frame(x):
        x = np.asarray(x, float)
        return np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)).copy()
    return frame


def _flat_path_flow(x0, C):
    x0 = np.asarray(x0, float)
    C = np.asarray(C, float)
    out = np.empty((C.shape[0], C.shape[1] + 1, C.shape[2]))
    out[:, 0] = x0
    np.cumsum(C, axis=1, out=out[:, 1:])
    out[:, 1:] += x0[:, None, :]
    return out


def _zero_bracket(i, j, x):
    return np.zeros(np.asarray(x).shape)


def flat_torus(n: int = 2, side: float = 10.0) -> ManifoldModel:
    """Flat torus of side ``side`` with the coordinate frame (d = n)."""
    lattice = BoxLattice([side] * n)

    def distance(x, a):
        return float(np.linalg.norm(lattice.displacement(x, a)))

    def heat_kernel(t, x, a):
        disp = lattice.displacement(np.asarray(x, float), np.asarray(a, float))
        m = np.arange(-3, 4)
        total = 1.0
        for k in range(n):
            total *= float(np.sum(np.exp(-(disp[k] + m * side) ** 2 / (2 * t)))) / math.sqrt(2 * math.pi * t)
        return total

    return ManifoldModel(
        name=f"flat{n}", dim_n=n, dim_d=n, frame=_identity_frame(n), lattice=lattice,
        exact_bracket=_zero_bracket, exact_divergence=_zero_divergence,
        distance_oracle=distance, heat_kernel_oracle=heat_kernel, path_flow=_flat_path_flow,
        divergence_free=True, params={"side": float(side)},
    )


def synthetic_connection(strength: float = 1.0) -> ManifoldModel:
    """Heisenberg frame with the nonzero metric connection
    ``gamma[0, 1, 0] = strength = -gamma[1, 0, 0]``.

    Exercises every connection-dependent code path; the projected diffusion
    has the same law as for the Heisenberg model.
    """
    def connection(x):
        x = np.asarray(x, float)
        G = np.zeros(x.shape[:-1] + (3, 3, 3))
        G[..., 0, 1, 0] = strength
        G[..., 1, 0, 0] = -strength
        return G

    return ManifoldModel(
        name="synthetic", dim_n=3, dim_d=2, frame=_heis_frame, connection=connection,
        exact_bracket=_heis_bracket, exact_divergence=_zero_divergence,
        distance_oracle=heisenberg_distance, heat_kernel_oracle=heisenberg_heat_kernel,
        symmetry=_rotate_xy, divergence_free=True, params={"strength": float(strength)},
    )


def weighted_plane() -> ManifoldModel:
    """Euclidean plane with volume density ``exp(x1)``; ``div Z1 = 1``."""
    return ManifoldModel(
        name="weighted_plane", dim_n=2, dim_d=2, frame=_identity_frame(2),
        vol_density=lambda x: np.exp(np.asarray(x, float)[..., 0]),
    )


def custom_model(name, dim_n, dim_d, frame, vol_density=None, connection=None, **kw) -> ManifoldModel:
    """Programmatic model from evaluator callbacks (vectorised over leading axes)."""
    return ManifoldModel(name=name, dim_n=dim_n, dim_d=dim_d, frame=frame,
                         vol_density=vol_density, connection=connection, **kw)


MODEL_REGISTRY = {
    "heisenberg": lambda **p: heisenberg(),
    "nilmanifold": lambda **p: nilmanifold(),
    "flat1": lambda side=20.0, **p: flat_torus(1, float(side)),
    "flat2": lambda side=10.0, **p: flat_torus(2, float(side)),
    "flat_torus": lambda n=2, side=10.0, **p: flat_torus(int(n), float(side)),
    "synthetic": lambda strength=1.0, **p: synthetic_connection(float(strength)),
    "weighted_plane": lambda **p: weighted_plane(),
}


def build_model(name: str, **params) -> ManifoldModel:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise ModelDefinitionError(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return factory(**params)


_KV = re.compile(r"^\s*([A-Za-z_][\w.-]*)\s*[=:]\s*(.*?)\s*$")


def parse_key_values(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _KV.match(line)
        if not m:
            raise ModelDefinitionError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[m.group(1)] = m.group(2)
    return out


def load_model(source) -> ManifoldModel:
    """Build a model from a key-value config (path or text) naming ``model``."""
    text = Path(source).read_text() if isinstance(source, Path) or (
        isinstance(source, str) and "\n" not in source and Path(source).exists()) else str(source)
    kv = parse_key_values(text)
    if "model" not in kv:
        raise ModelDefinitionError("config has no 'model' key")
    name = kv.pop("model")
    params = {k: _coerce(v) for k, v in kv.items()}
    return build_model(name, **params)


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def random_points(model: ManifoldModel, count: int, rng, scale: float = 1.0) -> np.ndarray:
    """Uniform points in the box ``[-scale, scale]^n`` (the fundamental cell on tori)."""
    rng = np.random.default_rng(rng)
    pts = rng.uniform(-scale, scale, size=(count, model.dim_n))
    return pts
