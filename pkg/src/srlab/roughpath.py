"""Level-2 geometric rough paths over piecewise-linear data.

A :class:`Level2Path` stores one increment and one second-order tensor per
grid cell.  Values over any pair of grid times are rebuilt from prefix
sums, which is the Chen relation applied left to right::

    w1[s, t] = X_t - X_s
    w2[s, t] = S_t - S_s - X_s (x) (X_t - X_s)

where ``X`` is the running level-one sum and ``S`` the running signature
from time 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .paths import PiecewiseLinearPath, dyadic_grid


@dataclass(frozen=True)
class BesovConfig:
    """Exponent pair ``(alpha, 4m)`` of the Besov rough-path norm."""

    alpha: float = 0.35
    m: int = 25

    def __post_init__(self):
        a, m = self.alpha, self.m
        if not isinstance(m, (int, np.integer)) or m < 1:
            raise ValueError(f"m must be a positive integer, got {m!r}")
        problems = []
        if not 1 / 3 < a < 1 / 2:
            problems.append("need 1/3 < alpha < 1/2")
        if not a - 1 / (4 * m) > 1 / 3:
            problems.append("need alpha - 1/(4m) > 1/3")
        if not 4 * m * (0.5 - a) > 1:
            problems.append("need 4m (1/2 - alpha) > 1")
        if problems:
            raise ValueError(f"invalid Besov pair alpha={a}, m={m}: " + "; ".join(problems))

    @property
    def weight_exponent(self) -> float:
        return 1.0 + 4 * self.m * self.alpha


@dataclass(frozen=True, eq=False)
class Level2Path:
    times: np.ndarray
    level1: np.ndarray
    level2: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        l1 = np.asarray(self.level1, float)
        l2 = np.asarray(self.level2, float)
        K = t.size - 1
        if K < 1 or np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if l1.ndim != 2 or l1.shape[0] != K or l2.shape != (K, l1.shape[1], l1.shape[1]):
            raise ValueError("level1 must be (K, d) and level2 (K, d, d)")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "level1", l1)
        object.__setattr__(self, "level2", l2)

    @property
    def dim(self) -> int:
        return self.level1.shape[1]

    @property
    def cells(self) -> int:
        return self.level1.shape[0]

    @classmethod
    def zero(cls, times, dim: int) -> "Level2Path":
        K = len(times) - 1
        return cls(times, np.zeros((K, dim)), np.zeros((K, dim, dim)))

    def prefix(self):
        """Running sums ``X`` (``(K+1, d)``) and ``S`` (``(K+1, d, d)``) from time 0."""
        K, d = self.level1.shape
        X = np.zeros((K + 1, d))
        np.cumsum(self.level1, axis=0, out=X[1:])
        S = np.zeros((K + 1, d, d))
        np.cumsum(self.level2 + X[:-1, :, None] * self.level1[:, None, :], axis=0, out=S[1:])
        return X, S

    def increment(self, i: int, j: int):
        """``(w1, w2)`` over ``[times[i], times[j]]``, ``i <= j``."""
        if not 0 <= i <= j <= self.cells:
            raise IndexError("need 0 <= i <= j <= K")
        X, S = self.prefix()
        d1 = X[j] - X[i]
        return d1, S[j] - S[i] - np.outer(X[i], d1)

    def all_pairs(self):
        """``(w1, w2)`` for every index pair, shapes ``(K+1, K+1, d)`` and
        ``(K+1, K+1, d, d)``; entry ``[i, j]`` is meaningful for ``i <= j``."""
        X, S = self.prefix()
        w1 = X[None, :, :] - X[:, None, :]
        w2 = S[None, :, :, :] - S[:, None, :, :] - X[:, None, :, None] * w1[:, :, None, :]
        return w1, w2

    def __sub__(self, other):
        raise TypeError("rough paths do not form a vector space; use rough_distance")

    def to_rows(self) -> np.ndarray:
        """Per-cell table ``t0, t1, w1..., w2 (row-major)...`` for debugging dumps."""
        K, d = self.level1.shape
        return np.column_stack([self.times[:-1], self.times[1:], self.level1, self.level2.reshape(K, d * d)])


def lift_dyadic(w: PiecewiseLinearPath) -> Level2Path:
    """Natural lift of a piecewise-linear path: per cell ``(dw, dw (x) dw / 2)``."""
    inc = w.increments
    return Level2Path(w.times, inc, 0.5 * inc[:, :, None] * inc[:, None, :])


def chen_combine(a, b):
    """Concatenate ``(w1, w2)`` over ``[s, u]`` with ``(w1, w2)`` over ``[u, t]``."""
    a1, a2 = (np.asarray(v, float) for v in a)
    b1, b2 = (np.asarray(v, float) for v in b)
    return a1 + b1, a2 + b2 + np.multiply.outer(a1, b1)


def chen_defect(p: Level2Path) -> float:
    """Largest violation of the Chen identity over all grid triples ``s < u < t``."""
    w1, w2 = p.all_pairs()
    K = p.cells
    worst = 0.0
    for u in range(1, K):
        left1, left2 = w1[:u, u], w2[:u, u]
        right1, right2 = w1[u, u + 1:], w2[u, u + 1:]
        comb2 = (left2[:, None] + right2[None, :]
                 + left1[:, None, :, None] * right1[None, :, None, :])
        comb1 = left1[:, None] + right1[None, :]
        worst = max(worst, float(np.abs(w2[:u, u + 1:] - comb2).max()),
                    float(np.abs(w1[:u, u + 1:] - comb1).max()))
    return worst


def geometricity_defect(p: Level2Path) -> float:
    """``max |Sym(w2) - w1 (x) w1 / 2|`` over all grid pairs."""
    w1, w2 = p.all_pairs()
    sym = 0.5 * (w2 + np.swapaxes(w2, -1, -2))
    return float(np.abs(sym - 0.5 * w1[..., :, None] * w1[..., None, :]).max())


# ---------------------------------------------------------------------------
# translation, dilation, refinement


def _on_grid(h: PiecewiseLinearPath, times) -> PiecewiseLinearPath:
    if h.times.size == times.size and np.allclose(h.times, times, rtol=0, atol=1e-14):
        return h
    try:
        return h.refine(times)
    except ValueError:
        raise ValueError("translation path grid is finer than the rough path grid; refine the rough path first") \
            from None


def translate(p: Level2Path, h: PiecewiseLinearPath) -> Level2Path:
    """Young translation by a piecewise-linear ``h``.

    Within a cell both ``h`` and the representative of ``p`` are linear, so
    the cross integrals are ``dw (x) dh / 2`` and ``dh (x) dw / 2``.
    """
    if h.dim != p.dim:
        raise ValueError("dimension mismatch")
    dh = _on_grid(h, p.times).increments
    dw = p.level1
    cross = 0.5 * (dw[:, :, None] * dh[:, None, :] + dh[:, :, None] * dw[:, None, :])
    return Level2Path(p.times, dw + dh, p.level2 + cross + 0.5 * dh[:, :, None] * dh[:, None, :])


def dilate(p: Level2Path, c: float) -> Level2Path:
    return Level2Path(p.times, c * p.level1, (c * c) * p.level2)


def refine(p: Level2Path, times) -> Level2Path:
    """Re-grid a lift whose cells are linear (symmetric level two) onto a finer grid."""
    times = np.asarray(times, float)
    anti = p.level2 - np.swapaxes(p.level2, 1, 2)
    if np.abs(anti).max(initial=0.0) > 1e-12:
        raise ValueError("only lifts of piecewise-linear paths can be refined")
    X, _ = p.prefix()
    path = PiecewiseLinearPath(p.times, X).refine(times)
    return lift_dyadic(path)


# ---------------------------------------------------------------------------
# Besov norms and distance


@dataclass(frozen=True)
class BesovNorms:
    nu1: float
    nu2: float
    log_raw1: float
    log_raw2: float

    @property
    def total(self) -> float:
        return self.nu1 + self.nu2


def _trapezoid_log_weights(times):
    dt = np.diff(times)
    w = np.zeros(times.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return np.log(w)


def _log_sums(X, S, times, cfg: BesovConfig, row_block: int = 256):
    """Log of the two Besov Riemann sums for prefix data ``(X, S)``.

    ``X`` may be a pair ``(X, Xhat)`` (and ``S`` likewise) to measure the
    distance between two rough paths; rows are streamed in blocks.
    """
    if isinstance(X, tuple):
        (Xa, Xb), (Sa, Sb) = X, S
    else:
        Xa, Sa, Xb, Sb = X, S, None, None
    logw = _trapezoid_log_weights(times)
    m = cfg.m
    parts1, parts2 = [], []
    size = times.size
    for lo in range(0, size - 1, row_block):
        hi = min(lo + row_block, size - 1)
        i = np.arange(lo, hi)

        def pairs(X, S):
            w1 = X[None, :, :] - X[i, None, :]
            w2 = S[None] - S[i, None] - X[i, None, :, None] * w1[:, :, None, :]
            return w1, w2

        w1, w2 = pairs(Xa, Sa)
        if Xb is not None:
            v1, v2 = pairs(Xb, Sb)
            w1, w2 = w1 - v1, w2 - v2
        jj, ii = np.meshgrid(np.arange(size), i)
        upper = jj > ii
        n1 = np.sqrt(np.sum(w1 ** 2, axis=-1))[upper]
        n2 = np.sqrt(np.sum(w2 ** 2, axis=(-2, -1)))[upper]
        base = logw[ii[upper]] + logw[jj[upper]] - cfg.weight_exponent * np.log(
            times[jj[upper]] - times[ii[upper]])
        with np.errstate(divide="ignore"):
            parts1.append(logsumexp(4 * m * np.log(n1) + base))
            parts2.append(logsumexp(2 * m * np.log(n2) + base))
    return float(logsumexp(parts1)), float(logsumexp(parts2))


def _norms(r1, r2, cfg):
    m = cfg.m
    return BesovNorms(float(np.exp(r1 / (4 * m))), float(np.exp(r2 / (2 * m))), r1, r2)


def besov_norms(p: Level2Path, cfg: BesovConfig | None = None) -> BesovNorms:
    """Grid Riemann sums of the ``(alpha, 4m)`` and ``(2 alpha, 2m)`` Besov integrals.

    Raw sums are returned as logarithms because the powers involved
    overflow double precision for the default exponents.
    """
    cfg = cfg or BesovConfig()
    X, S = p.prefix()
    return _norms(*_log_sums(X, S, p.times, cfg), cfg)


def rough_distance(p: Level2Path, q: Level2Path, cfg: BesovConfig | None = None) -> float:
    """Besov distance between two rough paths sharing a grid."""
    if p.times.size != q.times.size or not np.allclose(p.times, q.times, rtol=0, atol=1e-14):
        raise ValueError("rough paths must share a grid")
    cfg = cfg or BesovConfig()
    (Xa, Sa), (Xb, Sb) = p.prefix(), q.prefix()
    return _norms(*_log_sums((Xa, Xb), (Sa, Sb), p.times, cfg), cfg).total


@dataclass(frozen=True)
class CauchyRow:
    level: int
    median_distance: float


def dyadic_cauchy_check(levels=range(4, 10), n_seeds: int = 50, dim: int = 2, seed: int = 0,
                        cfg: BesovConfig | None = None, resolution: int = 1) -> list:
    """Median over Brownian samples of ``d(L(w(k)), L(w(k+1)))``.

    Both lifts are evaluated on the dyadic grid of level
    ``k + 1 + resolution``, so every comparison resolves the finer lift
    with the same number of sub-cells.
    """
    from .stochastics import brownian_increments

    levels = sorted(int(k) for k in levels)
    cfg = cfg or BesovConfig()
    finest = levels[-1] + 1
    inc = brownian_increments(seed, range(n_seeds), finest, dim)
    dists = {k: [] for k in levels}
    for s in range(n_seeds):
        values = np.zeros((2 ** finest + 1, dim))
        np.cumsum(inc[s], axis=0, out=values[1:])
        w = PiecewiseLinearPath(dyadic_grid(finest), values)
        for k in levels:
            grid = dyadic_grid(k + 1 + resolution)
            a = refine(lift_dyadic(w.coarsen(k)), grid)
            b = refine(lift_dyadic(w.coarsen(k + 1)), grid)
            dists[k].append(rough_distance(a, b, cfg))
    return [CauchyRow(k, float(np.median(dists[k]))) for k in levels]
