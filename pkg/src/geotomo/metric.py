"""Conformal metrics on a flat chart and level-set domains with smooth boundary.

A metric is ``g = exp(2*lam) (dx^2 + dy^2)``.  Directions on the unit tangent
bundle are stored as the chart angle ``theta``; the g-unit vector is
``exp(-lam) (cos theta, sin theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
GradField = Callable[[np.ndarray, np.ndarray], tuple]

INCOMING = "incoming"
OUTGOING = "outgoing"
GLANCING = "glancing"


class ChartDomainError(ValueError):
    """Raised when a point lies outside the chart where the fields are valid."""


@dataclass(frozen=True)
class ConformalMetric:
    lam: Field
    grad_lam: GradField
    lap_lam: Field
    chart: tuple  # (xmin, xmax, ymin, ymax) where the fields are finite
    period_x: float | None = None
    name: str = "conformal"

    def check_chart(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        xmin, xmax, ymin, ymax = self.chart
        bad_y = (y < ymin) | (y > ymax)
        bad_x = np.zeros_like(bad_y) if self.period_x else (x < xmin) | (x > xmax)
        if np.any(bad_x | bad_y) or not np.all(np.isfinite(x + y)):
            raise ChartDomainError("point outside the ambient chart %s" % (self.chart,))

    def scale(self, x, y):
        """Length density exp(lam)."""
        return np.exp(self.lam(x, y))

    def hess_lam(self, x, y, eps=1e-5):
        gxp = self.grad_lam(x + eps, y)
        gxm = self.grad_lam(x - eps, y)
        gyp = self.grad_lam(x, y + eps)
        gym = self.grad_lam(x, y - eps)
        lxx = (gxp[0] - gxm[0]) / (2 * eps)
        lyy = (gyp[1] - gym[1]) / (2 * eps)
        lxy = 0.5 * ((gxp[1] - gxm[1]) + (gyp[0] - gym[0])) / (2 * eps)
        return lxx, lxy, lyy


def curvature(m: ConformalMetric, x, y):
    """Gaussian curvature ``-exp(-2 lam) * laplacian(lam)``."""
    m.check_chart(x, y)
    return -np.exp(-2.0 * m.lam(x, y)) * m.lap_lam(x, y)


def geodesic_rhs(m: ConformalMetric, x, y, theta, check=True):
    """Unit-speed geodesic vector field in (x, y, theta) coordinates."""
    if check:
        m.check_chart(x, y)
    e = np.exp(-m.lam(x, y))
    lx, ly = m.grad_lam(x, y)
    c, s = np.cos(theta), np.sin(theta)
    return e * c, e * s, e * (ly * c - lx * s)


# ---------------------------------------------------------------------------
# boundary curves


class BoundaryCurve:
    """Closed curve parametrized by Euclidean chart arclength ``s`` in [0, length).

    Orientation keeps the domain on the left of the direction of increasing s.
    """

    length: float
    periodic_chart = False

    def point(self, s):
        raise NotImplementedError

    def tangent(self, s):
        raise NotImplementedError

    def locate(self, x, y):
        raise NotImplementedError

    def wrap(self, s):
        return np.mod(s, self.length)


class CircleCurve(BoundaryCurve):
    def __init__(self, center=(0.0, 0.0), radius=1.0, outer=True):
        self.cx, self.cy = map(float, center)
        self.radius = float(radius)
        self.outer = outer
        self.length = 2 * np.pi * self.radius
        # outer boundary runs counterclockwise, holes clockwise
        self._sign = 1.0 if outer else -1.0

    def _phi(self, s):
        return self._sign * np.asarray(s, dtype=float) / self.radius

    def point(self, s):
        phi = self._phi(s)
        return self.cx + self.radius * np.cos(phi), self.cy + self.radius * np.sin(phi)

    def tangent(self, s):
        phi = self._phi(s)
        return -self._sign * np.sin(phi), self._sign * np.cos(phi)

    def locate(self, x, y):
        phi = np.arctan2(np.asarray(y) - self.cy, np.asarray(x) - self.cx)
        return np.mod(self._sign * phi * self.radius, self.length)


class LineCurve(BoundaryCurve):
    """Horizontal line ``y = level`` on a strip periodic in x with period ``length``."""

    periodic_chart = True

    def __init__(self, level, period, domain_above=True):
        self.level = float(level)
        self.length = float(period)
        self.domain_above = domain_above

    def point(self, s):
        s = np.asarray(s, dtype=float)
        if self.domain_above:
            return np.mod(s, self.length), np.full_like(s, self.level)
        return np.mod(-s, self.length), np.full_like(s, self.level)

    def tangent(self, s):
        s = np.asarray(s, dtype=float)
        sgn = 1.0 if self.domain_above else -1.0
        return np.full_like(s, sgn), np.zeros_like(s)

    def locate(self, x, y):
        x = np.asarray(x, dtype=float)
        return np.mod(x if self.domain_above else -x, self.length)


class LevelSetCurve(BoundaryCurve):
    """Numerically traced component of ``{rho = 0}``.

    Built from a rough closed polyline: vertices are projected onto the level
    set, the curve is reparametrized by arclength with a periodic spline, and
    every evaluation is projected back onto ``rho = 0``.
    """

    def __init__(self, rough_xy, rho, grad_rho, n_nodes=4096):
        self._rho = rho
        self._grad = grad_rho
        px, py = self._project(rough_xy[:, 0], rough_xy[:, 1])
        for _ in range(2):
            seg = np.hypot(np.diff(np.append(px, px[0])), np.diff(np.append(py, py[0])))
            s = np.concatenate([[0.0], np.cumsum(seg)])
            sx = CubicSpline(s, np.append(px, px[0]), bc_type="periodic")
            sy = CubicSpline(s, np.append(py, py[0]), bc_type="periodic")
            # true arclength of the spline by Gauss-Legendre per interval
            gx, gw = np.polynomial.legendre.leggauss(6)
            a, b = s[:-1, None], s[1:, None]
            tq = 0.5 * (b - a) * gx[None, :] + 0.5 * (a + b)
            speed = np.hypot(sx(tq, 1), sy(tq, 1))
            arc = np.concatenate([[0.0], np.cumsum((0.5 * (b - a) * speed * gw).sum(axis=1))])
            total = arc[-1]
            t_new = np.interp(np.linspace(0, total, n_nodes, endpoint=False), arc, s)
            px, py = self._project(sx(t_new), sy(t_new))
        self.length = float(total)
        knots = np.linspace(0, total, n_nodes + 1)
        self._sx = CubicSpline(knots, np.append(px, px[0]), bc_type="periodic")
        self._sy = CubicSpline(knots, np.append(py, py[0]), bc_type="periodic")
        self._dense_s = knots[:-1]
        self._dense = np.stack([px, py], axis=1)
        self._tree = None

    def _project(self, x, y, iters=6):
        x = np.array(x, dtype=float)
        y = np.array(y, dtype=float)
        for _ in range(iters):
            r = self._rho(x, y)
            gx, gy = self._grad(x, y)
            g2 = gx * gx + gy * gy
            x = x - r * gx / g2
            y = y - r * gy / g2
        return x, y

    def point(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        return self._project(self._sx(s), self._sy(s), iters=2)

    def tangent(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        tx, ty = self._sx(s, 1), self._sy(s, 1)
        n = np.hypot(tx, ty)
        return tx / n, ty / n

    def locate(self, x, y):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self._tree is None:
            self._tree = cKDTree(self._dense)
        _, idx = self._tree.query(np.stack([x, y], axis=1))
        s = self._dense_s[idx]
        for _ in range(4):
            px, py = self._sx(s), self._sy(s)
            tx, ty = self._sx(s, 1), self._sy(s, 1)
            s = s + ((x - px) * tx + (y - py) * ty) / (tx * tx + ty * ty)
        return np.mod(s, self.length)


# ---------------------------------------------------------------------------
# domains


@dataclass(frozen=True)
class Domain:
    rho: Field
    grad_rho: GradField
    components: Sequence[BoundaryCurve]
    bbox: tuple  # (xmin, xmax, ymin, ymax) of the closed domain in the chart
    ambient_margin: float = 0.05
    period_x: float | None = None
    name: str = "domain"
    boundary_tol: float = 1e-10

    def hess_rho(self, x, y, eps=1e-5):
        gxp = self.grad_rho(x + eps, y)
        gxm = self.grad_rho(x - eps, y)
        gyp = self.grad_rho(x, y + eps)
        gym = self.grad_rho(x, y - eps)
        rxx = (gxp[0] - gxm[0]) / (2 * eps)
        ryy = (gyp[1] - gym[1]) / (2 * eps)
        rxy = 0.5 * ((gxp[1] - gxm[1]) + (gyp[0] - gym[0])) / (2 * eps)
        return rxx, rxy, ryy

    def inward_normal(self, x, y):
        gx, gy = self.grad_rho(x, y)
        n = np.hypot(gx, gy)
        return gx / n, gy / n

    def boundary_point(self, comp, s):
        return self.components[comp].point(s)

    def locate(self, x, y):
        """Nearest boundary coordinates (component, s) of chart points."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        best = np.full(x.shape, np.inf)
        comp = np.zeros(x.shape, dtype=int)
        sval = np.zeros(x.shape)
        for k, c in enumerate(self.components):
            s = c.locate(x, y)
            px, py = c.point(s)
            dx = x - px
            if self.period_x:
                dx = dx - self.period_x * np.round(dx / self.period_x)
            d = np.hypot(dx, y - py)
            better = d < best
            best = np.where(better, d, best)
            comp = np.where(better, k, comp)
            sval = np.where(better, s, sval)
        return comp, sval



def boundary_g_length(m: ConformalMetric, d: Domain, comp, s0=0.0, s1=None, n=2048):
    """g-length of the boundary arc from s0 to s1 (the whole component by default)."""
    c = d.components[comp]
    if s1 is None:
        s1 = s0 + c.length
    gx, gw = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(s0, s1, n // 8 + 1)
    a, b = edges[:-1, None], edges[1:, None]
    sq = 0.5 * (b - a) * gx + 0.5 * (a + b)
    px, py = c.point(sq.ravel())
    dens = np.exp(m.lam(px, py)).reshape(sq.shape)
    return float((0.5 * (b - a) * dens * gw).sum())


def normalized_x_rho(d: Domain, x, y, theta):
    """g(nu, v): rate of change of rho along the flow, normalized by |grad rho|_g."""
    gx, gy = d.grad_rho(x, y)
    return (gx * np.cos(theta) + gy * np.sin(theta)) / np.hypot(gx, gy)


def classify_boundary_point(m: ConformalMetric, d: Domain, x, y, theta, eps_g=1e-7, tol=1e-8):
    """Return incoming / outgoing / glancing for a phase point on the boundary."""
    r = float(d.rho(np.float64(x), np.float64(y)))
    if abs(r) > tol:
        raise ValueError("point is not on the boundary (rho = %.3e)" % r)
    c = float(normalized_x_rho(d, np.float64(x), np.float64(y), np.float64(theta)))
    if c > eps_g:
        return INCOMING
    if c < -eps_g:
        return OUTGOING
    return GLANCING


def incidence_angle(d: Domain, x, y, theta):
    """Signed angle from the inward normal to the direction theta, in (-pi, pi]."""
    nx, ny = d.inward_normal(x, y)
    a = np.asarray(theta) - np.arctan2(ny, nx)
    return -(np.mod(-a + np.pi, 2 * np.pi) - np.pi)


def direction_from_angle(d: Domain, x, y, alpha):
    """Chart angle theta of the direction at signed angle alpha from the inward normal."""
    nx, ny = d.inward_normal(x, y)
    return np.mod(np.arctan2(ny, nx) + np.asarray(alpha), 2 * np.pi)
