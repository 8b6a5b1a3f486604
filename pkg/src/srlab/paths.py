"""Piecewise-linear control paths on (dyadic) grids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PiecewiseLinearPath:
    """Path in R^d given by its values at grid times, linear in between.

    ``values[0]`` is the origin for Cameron-Martin and Brownian paths.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or v.shape[0] != t.shape[0]:
            raise ValueError("times and values must have matching first dimension")
        if t.size < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("grid times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def level(self) -> int | None:
        """Dyadic level ``k`` if the grid is ``j 2^-k`` on ``[0, T]``."""
        K = self.times.size - 1
        k = int(round(np.log2(K)))
        if 2 ** k != K or not np.allclose(self.times, np.linspace(self.times[0], self.times[-1], K + 1)):
            return None
        return k

    def energy(self) -> float:
        """``sum |dh|^2 / dt``, the Cameron-Martin norm squared."""
        return float(np.sum(self.increments ** 2 / self.dt[:, None]))

    def norm(self) -> float:
        return float(np.sqrt(self.energy()))

    def __call__(self, t):
        t = np.asarray(t, float)
        return np.stack([np.interp(t, self.times, self.values[:, i]) for i in range(self.dim)], axis=-1)

    def __add__(self, other: "PiecewiseLinearPath") -> "PiecewiseLinearPath":
        grid = np.union1d(self.times, other.times)
        return PiecewiseLinearPath(grid, self(grid) + other(grid))

    def __neg__(self):
        return PiecewiseLinearPath(self.times, -self.values)

    def scale(self, c: float) -> "PiecewiseLinearPath":
        return PiecewiseLinearPath(self.times, c * self.values)

    def refine(self, times) -> "PiecewiseLinearPath":
        """Same path sampled on a finer grid containing the current one."""
        times = np.asarray(times, float)
        if not np.all(np.isin(np.round(self.times, 14), np.round(times, 14))):
            raise ValueError("target grid does not contain the current grid")
        return PiecewiseLinearPath(times, self(times))

    def coarsen(self, level: int) -> "PiecewiseLinearPath":
        """Dyadic piecewise-linear approximation ``w(k)`` at a coarser level."""
        own = self.level
        if own is None or level > own:
            raise ValueError("coarsen needs a dyadic grid at least as fine as the target level")
        stride = 2 ** (own - level)
        return PiecewiseLinearPath(self.times[::stride], self.values[::stride])

    @classmethod
    def from_velocities(cls, velocities, horizon: float = 1.0, start=None) -> "PiecewiseLinearPath":
        """Path whose derivative is ``velocities[k]`` on the ``k``-th of equal segments."""
        vel = np.atleast_2d(np.asarray(velocities, float))
        m = vel.shape[0]
        dt = horizon / m
        vals = np.zeros((m + 1, vel.shape[1]))
        if start is not None:
            vals[0] = start
        vals[1:] = vals[0] + np.cumsum(vel * dt, axis=0)
        return cls(np.linspace(0.0, horizon, m + 1), vals)

    @classmethod
    def zero(cls, dim: int, segments: int = 1, horizon: float = 1.0) -> "PiecewiseLinearPath":
        return cls(np.linspace(0.0, horizon, segments + 1), np.zeros((segments + 1, dim)))

    @classmethod
    def linear(cls, end, horizon: float = 1.0) -> "PiecewiseLinearPath":
        end = np.atleast_1d(np.asarray(end, float))
        return cls(np.array([0.0, horizon]), np.stack([np.zeros_like(end), end]))


# Finite-energy control paths are the same objects.
CameronMartinPath = PiecewiseLinearPath


def dyadic_grid(level: int, horizon: float = 1.0) -> np.ndarray:
    return np.linspace(0.0, horizon, 2 ** level + 1)
