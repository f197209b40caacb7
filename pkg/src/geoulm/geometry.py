"""ToA ellipses and their closed-form pairwise intersection.

Every ellipse has the virtual source and one receiver as foci and the
measured round-trip path as the sum of focal distances. Two ellipses are
written as conics with a unit ``y**2`` coefficient, so their difference has
no ``y**2`` term. Substituting ``y = w - (a2 + a4 x) / 2`` turns the first conic
into ``w**2 + c(x) = 0`` and the difference into ``w (d2 + d4 x) + e(x) = 0``,
which leaves the quartic ``e(x)**2 + c(x) (d2 + d4 x)**2 = 0`` in ``x``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import (DegenerateEllipseError, IllConditionedError,
                         InfiniteIntersectionsError, ValidationError)
from .types import AcquisitionConfig, Region, TransducerGeometry


@dataclass(frozen=True)
class EllipseSpec:
    focus_a: np.ndarray
    focus_b: np.ndarray
    r_major: float
    r_minor: float
    center: np.ndarray
    axis_dir: np.ndarray

    @property
    def path_length(self) -> float:
        return 2.0 * self.r_major

    def focal_residual(self, point) -> float:
        """Sum of focal distances minus the path length, meters."""
        p = np.asarray(point, dtype=float)
        return float(np.hypot(*(p - self.focus_a)) + np.hypot(*(p - self.focus_b))
                     - self.path_length)

    def boundary(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        v = self.axis_dir
        vp = np.array([-v[1], v[0]])
        return (self.center + np.multiply.outer(self.r_major * np.cos(theta), v)
                + np.multiply.outer(self.r_minor * np.sin(theta), vp))


@dataclass(frozen=True)
class QuadraticCurve:
    """Conic ``b0 + b1 x + b2 y + b3 x^2 + b4 x y + b5 y^2 = 0``."""

    coefficients: np.ndarray

    def __post_init__(self):
        b = np.array(self.coefficients, dtype=float).reshape(6)
        if not np.all(np.isfinite(b)):
            raise ValidationError("conic coefficients must be finite")
        if not np.any(b[3:]):
            raise ValidationError("curve has no quadratic terms")
        b.setflags(write=False)
        object.__setattr__(self, "coefficients", b)

    def __iter__(self):
        return iter(self.coefficients)

    @property
    def matrix(self) -> np.ndarray:
        b = self.coefficients
        return np.array([[b[3], b[4] / 2], [b[4] / 2, b[5]]])

    def __call__(self, x, y):
        b0, b1, b2, b3, b4, b5 = self.coefficients
        return b0 + b1 * x + b2 * y + b3 * x * x + b4 * x * y + b5 * y * y

    def gradient(self, x, y) -> np.ndarray:
        b0, b1, b2, b3, b4, b5 = self.coefficients
        return np.array([b1 + 2 * b3 * x + b4 * y, b2 + b4 * x + 2 * b5 * y])

    def center(self) -> np.ndarray:
        b = self.coefficients
        return np.linalg.solve(2 * self.matrix, -b[1:3])

    def normalized(self) -> "QuadraticCurve":
        """Rescale to a unit ``y**2`` coefficient."""
        b5 = self.coefficients[5]
        if b5 == 0:
            raise ValidationError("curve has no y^2 term to normalise by")
        return QuadraticCurve(self.coefficients / b5)

    def residual(self, x, y):
        """Value of ``(s-c)^T M (s-c) - 1`` for an ellipse-shaped conic."""
        c = self.center()
        return self(x, y) / -self(*c)

    def transformed(self, origin, scale: float) -> "QuadraticCurve":
        """Conic in coordinates ``s' = (s - origin) / scale``."""
        m = self.matrix
        b = self.coefficients[1:3]
        o = np.asarray(origin, dtype=float)
        mq = scale * scale * m
        lin = scale * (2 * m @ o + b)
        const = o @ m @ o + b @ o + self.coefficients[0]
        return QuadraticCurve([const, lin[0], lin[1], mq[0, 0], 2 * mq[0, 1], mq[1, 1]])


@dataclass(frozen=True)
class LocalizationCandidate:
    position: np.ndarray
    channel_pair: tuple
    track_id: int = -1
    condition: float = 1.0


@dataclass(frozen=True)
class GeometryConfig:
    """Pairing and filtering knobs for turning tracks into candidates."""

    stride: int | None = None
    all_pairs: bool = False
    all_pairs_below: int = 0      # tracks with fewer observations use every pair
    field_of_view: Region = Region(-0.02, 0.02, 0.0, 0.03)
    check_focal_identity: bool = False
    focal_tolerance: float = 1e-7


def build_ellipse(toa: float, receiver, source, config: AcquisitionConfig) -> EllipseSpec:
    """ToA ellipse with foci at the virtual source and one receiver."""
    rx = np.asarray(receiver, dtype=float)
    src = np.asarray(source, dtype=float)
    path = toa * config.speed_of_sound
    sep = float(np.hypot(*(rx - src)))
    if not path > sep:
        raise DegenerateEllipseError(
            f"round-trip path {path:.6g} m does not exceed focal separation {sep:.6g} m")
    r_major = path / 2
    r_minor = 0.5 * math.sqrt(path * path - sep * sep)
    axis = np.array([1.0, 0.0])
    if sep > 0:
        d = (rx - src) / np.abs(rx - src).max()   # rescale first so tiny separations stay unit
        axis = d / np.hypot(*d)
    return EllipseSpec(src, rx, r_major, r_minor, (src + rx) / 2, axis)


def ellipse_to_quadratic(e: EllipseSpec) -> QuadraticCurve:
    v = np.asarray(e.axis_dir, dtype=float)
    vp = np.array([-v[1], v[0]])
    m = np.outer(v, v) / e.r_major ** 2 + np.outer(vp, vp) / e.r_minor ** 2
    c = np.asarray(e.center, dtype=float)
    mc = m @ c
    coeffs = np.array([c @ mc - 1, -2 * mc[0], -2 * mc[1], m[0, 0], 2 * m[0, 1], m[1, 1]])
    return QuadraticCurve(coeffs / m[1, 1])


# -- intersection ---------------------------------------------------------

_IMAG_REAL = 1e-10
_IMAG_AMBIGUOUS = 1e-5
_MAX_CONDITION = 1e6
_RESIDUAL_TOL = 1e-7


def _frame_for(curve: QuadraticCurve):
    """Origin and length scale that make ``curve`` roughly a unit circle."""
    m = curve.matrix
    eig = np.linalg.eigvalsh(m)
    if eig[0] <= 0:
        return np.zeros(2), 1.0
    c = curve.center()
    f0 = -curve(*c)
    if f0 <= 0:
        return c, 1.0
    return c, math.sqrt(f0 / eig[0])


def _crossing_condition(a: QuadraticCurve, b: QuadraticCurve, p) -> float:
    ga, gb = a.gradient(*p), b.gradient(*p)
    na, nb = np.hypot(*ga), np.hypot(*gb)
    if na == 0 or nb == 0:
        return math.inf
    sin = abs(ga[0] * gb[1] - ga[1] * gb[0]) / (na * nb)
    return math.inf if sin == 0 else 1.0 / sin


def _newton_polish(a: QuadraticCurve, b: QuadraticCurve, p, iters: int = 3) -> np.ndarray:
    p = np.array(p, dtype=float)
    best = max(abs(a(*p)), abs(b(*p)))
    for _ in range(iters):
        jac = np.vstack([a.gradient(*p), b.gradient(*p)])
        try:
            step = np.linalg.solve(jac, [a(*p), b(*p)])
        except np.linalg.LinAlgError:
            break
        trial = p - step
        err = max(abs(a(*trial)), abs(b(*trial)))
        if not err < best:
            break
        p, best = trial, err
    return p


def _solve_substitution(a: np.ndarray, d: np.ndarray):
    """Real roots in the normalised frame plus an ambiguity flag."""
    a0, a1, a2, a3, a4 = a[:5]
    c = np.array([a0 - a2 * a2 / 4, a1 - a2 * a4 / 2, a3 - a4 * a4 / 4])
    e = np.array([d[0] - d[2] * a2 / 2, d[1] - (d[2] * a4 + d[4] * a2) / 2, d[3] - d[4] * a4 / 2])
    g = np.array([d[2], d[4]])
    scale = max(np.abs(d).max(), 1e-300)
    poly = np.polynomial.polynomial
    pts = []
    ambiguous = False

    def shift(x):
        return (a2 + a4 * x) / 2

    def c_at(x):
        return c[0] + x * (c[1] + x * c[2])

    if np.abs(g).max() <= 1e-14 * scale:
        # d2 = d4 = 0: e(x) = 0 fixes x, then w^2 = -c(x)
        roots = _poly_roots(e)
        for x, imag in roots:
            if imag > _IMAG_REAL * (1 + abs(x)):
                ambiguous |= imag < _IMAG_AMBIGUOUS * (1 + abs(x))
                continue
            nc = -c_at(x)
            if nc < -1e-12:
                continue
            if nc <= 1e-12:
                pts.append((x, -shift(x)))
            else:
                w = math.sqrt(nc)
                pts.extend([(x, w - shift(x)), (x, -w - shift(x))])
        return pts, ambiguous

    quartic = poly.polyadd(poly.polymul(e, e), poly.polymul(c, poly.polymul(g, g)))
    for x, imag in _poly_roots(quartic):
        if imag > _IMAG_REAL * (1 + abs(x)):
            ambiguous |= imag < _IMAG_AMBIGUOUS * (1 + abs(x))
            continue
        den = g[0] + g[1] * x
        ex = e[0] + x * (e[1] + x * e[2])
        if abs(den) > 1e-8 * scale:
            pts.append((x, -ex / den - shift(x)))
        else:
            nc = max(-c_at(x), 0.0)
            w = math.sqrt(nc)
            pts.extend([(x, w - shift(x)), (x, -w - shift(x))])
    return pts, ambiguous


def _poly_roots(coeffs):
    """Roots of an ascending-order polynomial as (real part, |imag|) pairs.

    Leading coefficients that are negligible relative to the largest one are
    dropped before the companion-matrix eigenvalue solve.
    """
    c = np.array(coeffs, dtype=float)
    top = np.abs(c).max()
    if top == 0:
        return []
    while len(c) > 1 and abs(c[-1]) < 1e-12 * top:
        c = c[:-1]
    if len(c) <= 1:
        return []
    roots = np.polynomial.polynomial.polyroots(c)
    return [(float(r.real), float(abs(r.imag))) for r in np.atleast_1d(roots)]


def _intersect(a: QuadraticCurve, b: QuadraticCurve):
    """Intersection points with per-point condition scores."""
    a = a.normalized()
    b = b.normalized()
    if np.allclose(a.coefficients, b.coefficients, rtol=1e-14, atol=0):
        raise InfiniteIntersectionsError("curves coincide")
    origin, scale = _frame_for(a)
    an = a.transformed(origin, scale).normalized()
    bn = b.transformed(origin, scale).normalized()
    d = an.coefficients - bn.coefficients
    if np.abs(d).max() <= 1e-14 * np.abs(an.coefficients).max():
        raise InfiniteIntersectionsError("curves coincide")
    raw, ambiguous = _solve_substitution(an.coefficients, d)
    points, conds = [], []
    bad = ambiguous
    for p in raw:
        p = _newton_polish(an, bn, p)
        world = origin + scale * p
        res = max(abs(a.residual(*world)), abs(b.residual(*world)))
        cond = _crossing_condition(an, bn, p)
        if res > _RESIDUAL_TOL:
            bad = True
            continue
        if any(np.hypot(*(world - q)) <= 1e-9 * max(1.0, scale) for q in points):
            continue
        points.append(world)
        conds.append(cond)
        if cond > _MAX_CONDITION:
            bad = True
    pts = np.array(points).reshape(-1, 2)
    if len(pts) > 4:
        bad = True
    return pts, np.array(conds), bad


def intersect_ellipses(a: QuadraticCurve, b: QuadraticCurve) -> np.ndarray:
    """All real intersection points of two ellipse-shaped conics.

    Raises ``IllConditionedError`` (carrying the best-effort points) when the
    root count is numerically ambiguous, e.g. for near-tangent ellipses.
    """
    pts, conds, bad = _intersect(a, b)
    if bad:
        worst = float(conds.max()) if len(conds) else math.inf
        raise IllConditionedError("ill-conditioned ellipse intersection", pts, worst)
    return pts


def intersect_with_condition(a: QuadraticCurve, b: QuadraticCurve):
    """Like ``intersect_ellipses`` but returns ``(points, conditions)``.

    Ill-conditioned pairs are demoted rather than raised: their points keep
    an infinite condition score.
    """
    pts, conds, bad = _intersect(a, b)
    if bad:
        conds = np.where(conds > _MAX_CONDITION, conds, np.maximum(conds, _MAX_CONDITION))
    return pts, conds


# -- tracks to candidates -----------------------------------------------

def _focal_polish(p, e1: EllipseSpec, e2: EllipseSpec, iters: int = 3) -> np.ndarray:
    """Newton on the focal-sum equations of both ellipses."""
    p = np.array(p, dtype=float)
    for _ in range(iters):
        rows, res = [], []
        for e in (e1, e2):
            da, db = p - e.focus_a, p - e.focus_b
            na, nb = np.hypot(*da), np.hypot(*db)
            if na == 0 or nb == 0:
                return p
            rows.append(da / na + db / nb)
            res.append(na + nb - e.path_length)
        try:
            step = np.linalg.solve(np.array(rows), res)
        except np.linalg.LinAlgError:
            return p
        trial = p - step
        if max(abs(e1.focal_residual(trial)), abs(e2.focal_residual(trial))) >= max(map(abs, res)):
            return p
        p = trial
    return p


def channel_pairs(channels, stride: int | None = None, all_pairs: bool = False):
    """Channel pairs to intersect for one track, ordered by array position."""
    chans = list(channels)
    if all_pairs:
        return list(itertools.combinations(chans, 2))
    span = len(chans) - 1
    step = max(1, span // 8) if stride is None else max(1, int(stride))
    step = min(step, span) if span > 0 else 1
    return [(chans[i], chans[i + step]) for i in range(len(chans) - step)]


def localize_track(track, geometry: TransducerGeometry, config: AcquisitionConfig,
                   geo_config: GeometryConfig = GeometryConfig(), track_id: int = -1) -> list:
    """Intersect the ToA ellipses of one track and keep in-field points."""
    ellipses = {}
    for obs in track.observations:
        try:
            ellipses[obs.channel_index] = build_ellipse(
                obs.toa, geometry.receiver_positions[obs.channel_index],
                geometry.virtual_source, config)
        except DegenerateEllipseError:
            continue
    order = sorted(ellipses, key=lambda ch: tuple(geometry.receiver_positions[ch]))
    fov = geo_config.field_of_view
    out = []
    every = geo_config.all_pairs or len(order) < geo_config.all_pairs_below
    for n1, n2 in channel_pairs(order, geo_config.stride, every):
        e1, e2 = ellipses[n1], ellipses[n2]
        try:
            pts, conds = intersect_with_condition(ellipse_to_quadratic(e1), ellipse_to_quadratic(e2))
        except InfiniteIntersectionsError:
            continue
        for p, cond in zip(pts, conds):
            if not (p[1] > 0 and fov.contains(p)[0]):
                continue
            p = _focal_polish(p, e1, e2)
            err = max(abs(e1.focal_residual(p)), abs(e2.focal_residual(p)))
            if err >= geo_config.focal_tolerance:
                if geo_config.check_focal_identity and math.isfinite(cond) and cond <= _MAX_CONDITION:
                    raise AssertionError(
                        f"focal identity violated by {err:.3g} m for channels {(n1, n2)}")
                continue
            out.append(LocalizationCandidate(p, (n1, n2), track_id, float(cond)))
    return out
