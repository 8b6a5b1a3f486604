"""Trivialised frame bundle P = M x G, G = O(d) x O(n-d).

A bundle point is ``(x, e)`` with ``e`` block-orthogonal; the frame
``u<e_i>`` equals ``sum_g e[g, i] Z_g(x)``.  Tangent vectors of P are
stored as pairs ``(dx, de)`` in chart coordinates.

The development engine works on batches: ``x`` of shape ``(B, n)`` and
``e`` of shape ``(B, n, n)`` are advanced together segment by segment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import (DEFAULT_FD_STEP, ManifoldModel, apply_sub_laplacian, directional,
                       drift_correction, drift_correction_coefficients, eval_frame, forbidden_block_mask)
from .paths import CameronMartinPath, PiecewiseLinearPath

ORTHO_TOL = 1e-8
RETRACTION_LIMIT = 1e-3
ADMISSIBILITY_TOL = 1e-6


class StepRejected(RuntimeError):
    """The polar retraction had to move ``e`` by more than the allowed amount."""


class AdmissibilityError(ValueError):
    """A base path has a velocity component outside the distribution."""

    def __init__(self, message, segment, ratio):
        super().__init__(message)
        self.segment = segment
        self.ratio = ratio


@dataclass(frozen=True, eq=False)
class FramePoint:
    x: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, float))
        object.__setattr__(self, "e", np.asarray(self.e, float))

    @classmethod
    def identity(cls, model: ManifoldModel, x) -> "FramePoint":
        return cls(np.asarray(x, float), np.eye(model.dim_n))

    def orthogonality_error(self) -> float:
        n = self.e.shape[0]
        return float(np.abs(self.e.T @ self.e - np.eye(n)).max())

    def block_error(self, d: int) -> float:
        mask = forbidden_block_mask(self.e.shape[0], d)
        return float(np.abs(self.e[mask]).max()) if mask.any() else 0.0

    def is_valid(self, d: int, tol: float = ORTHO_TOL) -> bool:
        return self.orthogonality_error() <= tol and self.block_error(d) <= tol

    def act(self, a) -> "FramePoint":
        """Right action ``u . a`` of a block-orthogonal matrix."""
        return FramePoint(self.x, self.e @ np.asarray(a, float))


@dataclass(frozen=True, eq=False)
class BundleTangent:
    dx: np.ndarray
    de: np.ndarray


@dataclass(frozen=True, eq=False)
class FrameTrajectory:
    """Frame path ``(x_t, e_t)`` on a grid; ``base`` is its projection to M."""

    times: np.ndarray
    x: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def base(self) -> np.ndarray:
        return self.x

    @property
    def points(self) -> list:
        return [FramePoint(x, e) for x, e in zip(self.x, self.e)]

    @property
    def end(self) -> FramePoint:
        return FramePoint(self.x[-1], self.e[-1])

    def orthogonality_drift(self) -> float:
        n = self.e.shape[-1]
        gram = np.einsum("tki,tkj->tij", self.e, self.e)
        return float(np.abs(gram - np.eye(n)).max())


@dataclass(frozen=True)
class Drift:
    """Drift term ``A_0 = l<V + correction>`` run at clock rate ``rate``.

    ``field`` maps chart points ``(..., n)`` to chart vectors; ``None``
    means ``V = 0``.  With ``corrected`` the sub-Laplacian drift correction
    is added, which is what the diffusion needs.
    """

    field: Callable | None = None
    rate: float = 1.0
    corrected: bool = True

    def vector(self, model: ManifoldModel, x):
        x = np.asarray(x, float)
        out = np.zeros(x.shape)
        if self.field is not None:
            out = out + np.asarray(self.field(x), float)
        if self.corrected and not model.zero_drift_correction:
            out = out + drift_correction(model, x)
        return out

    def coefficients(self, model: ManifoldModel, x, F):
        """Frame coordinates of ``V + correction`` at ``x`` (``F`` the frame there)."""
        out = np.zeros(np.shape(x))
        if self.field is not None:
            out = out + np.linalg.solve(F, np.asarray(self.field(x), float)[..., None])[..., 0]
        if self.corrected and not model.zero_drift_correction:
            out[..., :model.dim_d] += drift_correction_coefficients(model, x)
        return out

    def vanishes(self, model: ManifoldModel) -> bool:
        return self.rate == 0.0 or (self.field is None and (not self.corrected or model.zero_drift_correction))


# ---------------------------------------------------------------------------
# pointwise operations


def _lift(model: ManifoldModel, x, e, c, F=None):
    """Horizontal lift of ``sum_g c_g Z_g(x)`` at ``(x, e)``, batched."""
    if F is None:
        F = model.frame(x)
    dx = np.einsum("...kg,...g->...k", F, c)
    if model.has_connection:
        M = np.einsum("...abg,...g->...ab", model.gamma(x), c)
        de = -(M @ e)
    else:
        de = np.zeros(np.shape(e))
    return dx, de


def horizontal_lift(u: FramePoint, v, model: ManifoldModel) -> BundleTangent:
    """Lift the tangent vector ``v`` at ``pi(u)`` to the horizontal space at ``u``.

    ``dx = v`` and ``de[a, d] = -sum_{b, g} gamma[a, b, g] c_g e[b, d]`` where
    ``v = sum_g c_g Z_g``.
    """
    F = eval_frame(model, u.x)
    c = np.linalg.solve(F, np.asarray(v, float))
    dx, de = _lift(model, u.x, u.e, c, F)
    return BundleTangent(dx, de)


def canonical_fields(u: FramePoint, model: ManifoldModel) -> list:
    """``A_i(u) = l_u<u<e_i>>`` for ``i = 0 .. n-1``; the first ``d`` drive development."""
    F = eval_frame(model, u.x)
    out = []
    for i in range(model.dim_n):
        dx, de = _lift(model, u.x, u.e, u.e[:, i], F)
        out.append(BundleTangent(dx, de))
    return out


def canonical_field_arrays(model: ManifoldModel, x, e, i: int):
    """Batched ``A_i`` at arbitrary (not necessarily orthogonal) ``e``."""
    return _lift(model, x, e, e[..., :, i])


# ---------------------------------------------------------------------------
# retraction


def retract(model: ManifoldModel, e):
    """Polar projection of each diagonal block of ``e`` onto its orthogonal group.

    Returns the projected matrices and the largest entrywise correction.
    """
    n, d = model.dim_n, model.dim_d
    out = np.zeros_like(e)
    for lo, hi in ((0, d), (d, n)):
        if hi <= lo:
            continue
        block = e[..., lo:hi, lo:hi]
        if hi - lo == 1:
            out[..., lo:hi, lo:hi] = np.where(block >= 0, 1.0, -1.0)
        elif hi - lo == 2:
            out[..., lo:hi, lo:hi] = _polar2(block)
        else:
            U, _, Vt = np.linalg.svd(block)
            out[..., lo:hi, lo:hi] = U @ Vt
    corr = float(np.abs(out - e).max()) if e.size else 0.0
    return out, corr


def _polar2(m):
    """Closed-form orthogonal polar factor of 2x2 matrices."""
    a, b, c, d = m[..., 0, 0], m[..., 0, 1], m[..., 1, 0], m[..., 1, 1]
    rot = (a * d - b * c) >= 0
    phi = np.where(rot, np.arctan2(c - b, a + d), np.arctan2(b + c, a - d))
    cs, sn = np.cos(phi), np.sin(phi)
    sgn = np.where(rot, 1.0, -1.0)
    return np.stack([np.stack([cs, -sgn * sn], -1), np.stack([sn, sgn * cs], -1)], -2)


# ---------------------------------------------------------------------------
# development


def _stage(model, x, e, dh, drift, dt_rate, full):
    F = model.frame(x)
    if full:
        c = np.einsum("...gi,...i->...g", e, dh)
    else:
        d = model.dim_d
        c = np.einsum("...gi,...i->...g", e[..., :, :d], dh)
    if drift is not None:
        c = c + drift.coefficients(model, x, F) * dt_rate
    return _lift(model, x, e, c, F)


def develop_batch(model: ManifoldModel, x0, e0, increments, seg_dt, drift: Drift | None = None,
                  substeps=1, record: bool = False, record_stride: int = 1, full: bool = False,
                  method: str = "auto"):
    """Advance a batch of frame points along piecewise-linear controls.

    ``increments`` has shape ``(B, K, m)`` (or ``(K, m)``, shared by the
    batch) with ``m = d``, or ``m = n`` when ``full``.  ``seg_dt`` gives the
    ``K`` segment durations, used only by the drift.  Each segment is split
    into ``substeps`` equal pieces, each advanced by one classical
    four-stage step and followed by the polar retraction of ``e``.

    Returns ``(x, e, xs, es)``; ``xs``/``es`` hold every ``record_stride``-th
    recorded state (including the start) when ``record`` is set, else None.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    e = np.array(e0, dtype=float)
    if e.ndim == 2:
        e = np.broadcast_to(e, (x.shape[0],) + e.shape).copy()
    inc = np.asarray(increments, float)
    if inc.ndim == 2:
        inc = np.broadcast_to(inc, (x.shape[0],) + inc.shape)
    B, K, _ = inc.shape
    seg_dt = np.broadcast_to(np.asarray(seg_dt, float), (K,))
    subs = np.broadcast_to(np.asarray(substeps, int), (K,))
    if drift is not None and drift.vanishes(model):
        drift = None

    use_flow = (method in ("auto", "exact") and model.path_flow is not None
                and not model.has_connection and drift is None and not full)
    if method == "exact" and not use_flow:
        raise ValueError(f"{model.name}: no exact path flow for this configuration")
    if use_flow:
        return _develop_exact(model, x, e, inc, subs, record, record_stride)

    xs, es = ([x.copy()], [e.copy()]) if record else (None, None)
    moving_frame = model.has_connection
    count = 0
    for k in range(K):
        m = int(subs[k])
        dh = inc[:, k, :] / m
        dtr = 0.0 if drift is None else seg_dt[k] / m * drift.rate
        for _ in range(m):
            k1x, k1e = _stage(model, x, e, dh, drift, dtr, full)
            k2x, k2e = _stage(model, x + 0.5 * k1x, e + 0.5 * k1e, dh, drift, dtr, full)
            k3x, k3e = _stage(model, x + 0.5 * k2x, e + 0.5 * k2e, dh, drift, dtr, full)
            k4x, k4e = _stage(model, x + k3x, e + k3e, dh, drift, dtr, full)
            x = x + (k1x + 2 * k2x + 2 * k3x + k4x) / 6.0
            if moving_frame:
                e = e + (k1e + 2 * k2e + 2 * k3e + k4e) / 6.0
                e, corr = retract(model, e)
                if corr > RETRACTION_LIMIT:
                    raise StepRejected(f"retraction correction {corr:.2e} at segment {k}; use a smaller dt")
            count += 1
            if record and count % record_stride == 0:
                xs.append(x.copy())
                es.append(e.copy())
    if record:
        return x, e, np.stack(xs, axis=1), np.stack(es, axis=1)
    return x, e, None, None


def _develop_exact(model, x, e, inc, subs, record, stride):
    d = model.dim_d
    ed = e[:, :d, :d]
    if np.array_equal(ed, np.broadcast_to(np.eye(d), ed.shape)):
        C = inc
    else:
        C = inc @ np.swapaxes(ed, 1, 2)
    if np.any(subs > 1):
        C = np.repeat(C / subs[None, :, None], subs, axis=1)
    path = model.path_flow(x, C)
    xe = path[:, -1].copy()
    if not record:
        return xe, e, None, None
    xs = path[:, ::stride]
    es = np.broadcast_to(e[:, None], (e.shape[0], xs.shape[1]) + e.shape[1:])
    return xe, e, xs, es


def _substeps_for(h: PiecewiseLinearPath, dt):
    if dt is None:
        return np.ones(h.dt.size, dtype=int)
    ratio = h.dt / dt
    m = np.maximum(1, np.round(ratio).astype(int))
    if np.any(np.abs(ratio - m) > 1e-6 * np.maximum(1, ratio)):
        raise ValueError("control grid is not commensurate with dt")
    return m


def develop(u0: FramePoint, h: PiecewiseLinearPath, model: ManifoldModel, drift: Drift | None = None,
            dt: float | None = None, full: bool = False, method: str = "auto") -> FrameTrajectory:
    """Development of the control ``h``: solve ``dphi = sum_i A_i(phi) dh^i`` (+ drift).

    With ``full`` the control is n-dimensional and all canonical fields
    drive the equation.
    """
    m = _substeps_for(h, dt)
    _, _, xs, es = develop_batch(model, u0.x[None], u0.e[None], h.increments[None], h.dt,
                                 drift=drift, substeps=m, record=True, full=full, method=method)
    times = [h.times[:1]]
    for k in range(h.dt.size):
        times.append(h.times[k] + h.dt[k] * np.arange(1, m[k] + 1) / m[k])
    return FrameTrajectory(np.concatenate(times), xs[0], es[0])


# ---------------------------------------------------------------------------
# anti-development


def rounding_floor(gamma) -> float:
    """Chord length below which the sampled coordinates carry no direction information."""
    return 64 * np.finfo(float).eps * max(1.0, float(np.abs(gamma).max()))


def antidevelop(u0: FramePoint, times, gamma, model: ManifoldModel,
                tol: float = ADMISSIBILITY_TOL) -> CameronMartinPath:
    """Recover the control of an admissible base path by lifting it horizontally.

    Each chord is decomposed in the frame at its midpoint; its D-part gives
    the control increment read in the moving frame at mid-segment, and the
    frame is carried along the chord by the lift equation.
    """
    times = np.asarray(times, float)
    gamma = np.asarray(gamma, float)
    if np.linalg.norm(model.displacement(gamma[0], u0.x)) > 1e-9:
        raise ValueError("base path does not start at pi(u0)")
    n, d = model.dim_n, model.dim_d
    K = times.size - 1
    x0 = gamma[:-1]
    chord = np.diff(gamma, axis=0)
    F = model.frame(x0 + 0.5 * chord)
    c = np.linalg.solve(F, chord[..., None])[..., 0]
    speed = np.linalg.norm(c, axis=1)
    transverse = np.linalg.norm(c[:, d:], axis=1)
    ratios = np.divide(transverse, speed, out=np.zeros(K), where=speed > 0)
    bad = transverse > tol * speed + rounding_floor(gamma)
    worst = int(np.argmax(np.where(bad, ratios, -1.0))) if K else 0
    if K and bad[worst]:
        raise AdmissibilityError(
            f"segment {worst} has relative transverse velocity {ratios[worst]:.3e} > {tol:g}", worst, ratios[worst])
    h = np.zeros((K + 1, d))
    if not model.has_connection:
        h[1:] = np.cumsum(np.einsum("gi,kg->ki", u0.e[:d, :d], c[:, :d]), axis=0)
        return CameronMartinPath(times - times[0], h)
    first = _transport_propagator(model, x0, chord, c, 0.0, 0.5)
    second = _transport_propagator(model, x0, chord, c, 0.5, 1.0)
    e = u0.e.copy()
    for k in range(K):
        e_mid = first[k] @ e
        h[k + 1] = h[k] + e_mid[:d, :d].T @ c[k, :d]
        e, _ = retract(model, second[k] @ e_mid)
    return CameronMartinPath(times - times[0], h)


def _transport_propagator(model, x0, chord, c, s0, s1):
    """Four-stage propagator of ``de/ds = -gamma(x(s)) c e`` over ``[s0, s1]``
    along every chord at once; ``e(s1) = P e(s0)``."""
    def M(s):
        G = model.gamma(x0 + s * chord)
        return -np.einsum("kabg,kg->kab", G, c)

    hs = s1 - s0
    I = np.broadcast_to(np.eye(model.dim_n), (x0.shape[0],) + (model.dim_n,) * 2)
    M0, Mh, M1 = M(s0), M(s0 + hs / 2), M(s1)
    k1 = M0 @ I
    k2 = Mh @ (I + hs / 2 * k1)
    k3 = Mh @ (I + hs / 2 * k2)
    k4 = M1 @ (I + hs * k3)
    return I + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


# ---------------------------------------------------------------------------
# generator identity


def bundle_laplacian_of_pullback(model: ManifoldModel, u: FramePoint, f: Callable,
                                 fd_step: float = DEFAULT_FD_STEP) -> float:
    """``sum_{i<d} A_i^2 (f o pi)(u)`` by nested central differences on P."""
    n = model.dim_n

    def g(y):
        return f(y[:n])

    def field(i, y):
        dx, de = canonical_field_arrays(model, y[:n], y[n:].reshape(n, n), i)
        return np.concatenate([dx, de.ravel()])

    y0 = np.concatenate([u.x, u.e.ravel()])
    total = 0.0
    for i in range(model.dim_d):
        def Ag(y, i=i):
            return directional(g, y, field(i, y), fd_step)
        total += directional(Ag, y0, field(i, y0), fd_step)
    return float(total)


def verify_generator(u: FramePoint, f: Callable, model: ManifoldModel,
                     fd_step: float = DEFAULT_FD_STEP) -> float:
    """Residual ``|sum A_i^2 (f o pi)(u) - (Delta_sub f - 2 V_c f)(pi u)|``,
    ``V_c`` being the drift correction."""
    lhs = bundle_laplacian_of_pullback(model, u, f, fd_step)
    x = u.x
    Vc = drift_correction(model, x, fd_step)
    rhs = apply_sub_laplacian(model, f, x, fd_step) - 2.0 * directional(f, x, Vc, fd_step)
    return float(abs(lhs - rhs))


def random_frame_point(model: ManifoldModel, rng, scale: float = 1.0) -> FramePoint:
    """Uniform chart point in ``[-scale, scale]^n`` with a Haar-random block frame."""
    from scipy.stats import ortho_group

    rng = np.random.default_rng(rng)
    n, d = model.dim_n, model.dim_d
    e = np.zeros((n, n))
    for lo, hi in ((0, d), (d, n)):
        k = hi - lo
        if k == 1:
            e[lo, lo] = rng.choice([-1.0, 1.0])
        elif k > 1:
            e[lo:hi, lo:hi] = ortho_group.rvs(k, random_state=rng)
    return FramePoint(rng.uniform(-scale, scale, n), e)


def block_rotation(model: ManifoldModel, theta: float) -> np.ndarray:
    """Rotation by ``theta`` in the plane of the first two D-directions."""
    a = np.eye(model.dim_n)
    if model.dim_d >= 2:
        c, s = math.cos(theta), math.sin(theta)
        a[:2, :2] = [[c, -s], [s, c]]
    return a
