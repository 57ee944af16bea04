"""Catalog of metrics and domains with known analytic facts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from skimage.measure import find_contours

from .metric import CircleCurve, ConformalMetric, Domain, LevelSetCurve, LineCurve


@dataclass(frozen=True)
class DeclaredFacts:
    simply_connected: bool
    conjugate_point_free: bool
    non_trapping: bool
    convex_boundary: bool
    known_area: float | None = None
    known_curvature: float | None = None
    # facts established by numerical scans rather than proof
    numerically_certified: tuple = ()


@dataclass(frozen=True)
class Scenario:
    name: str
    metric: ConformalMetric
    domain: Domain
    facts: DeclaredFacts
    diameter: float  # upper bound for the g-diameter, sets step caps and budgets
    params: dict = field(default_factory=dict)

    @property
    def t_budget(self):
        return 100.0 * self.diameter


# ---------------------------------------------------------------------------
# conformal factors


def _zero(x, y):
    return np.zeros_like(np.asarray(x, dtype=float) + np.asarray(y, dtype=float))


def flat_metric(chart=(-2.0, 2.0, -2.0, 2.0)):
    return ConformalMetric(_zero, lambda x, y: (_zero(x, y), _zero(x, y)), _zero, chart, name="flat")


def poincare_metric(chart=(-0.72, 0.72, -0.72, 0.72)):
    """lam = ln 2 - ln(1 - r^2): curvature -1."""
    def lam(x, y):
        return np.log(2.0) - np.log1p(-(x * x + y * y))

    def grad(x, y):
        q = 1.0 - x * x - y * y
        return 2 * x / q, 2 * y / q

    def lap(x, y):
        q = 1.0 - x * x - y * y
        return 4.0 / (q * q)

    return ConformalMetric(lam, grad, lap, chart, name="poincare")


def spherical_metric(chart=(-1.5, 1.5, -1.5, 1.5)):
    """lam = ln 2 - ln(1 + r^2): stereographic unit sphere, curvature +1."""
    def lam(x, y):
        return np.log(2.0) - np.log1p(x * x + y * y)

    def grad(x, y):
        q = 1.0 + x * x + y * y
        return -2 * x / q, -2 * y / q

    def lap(x, y):
        q = 1.0 + x * x + y * y
        return -4.0 / (q * q)

    return ConformalMetric(lam, grad, lap, chart, name="spherical")


def cylinder_metric(period, ylim=(-1.2, 1.2)):
    """lam = -ln cos y on a strip periodic in x: curvature -1, closed geodesic y = 0."""
    def lam(x, y):
        return -np.log(np.cos(y)) + 0.0 * x

    def grad(x, y):
        return 0.0 * x + 0.0 * y, np.tan(y) + 0.0 * x

    def lap(x, y):
        return 1.0 / np.cos(y) ** 2 + 0.0 * x

    return ConformalMetric(lam, grad, lap, (-np.inf, np.inf, ylim[0], ylim[1]),
                           period_x=period, name="hyperbolic_cylinder")


def bump_factor(amp=0.15, center=(0.15, -0.1), width=0.5, chart=(-1.5, 1.5, -1.5, 1.5)):
    """lam = amp * exp(1 - 1/(1 - q)), q = |p - c|^2 / w^2, compactly supported."""
    cx, cy = center
    w2 = width * width

    def _q(x, y):
        return ((x - cx) ** 2 + (y - cy) ** 2) / w2

    def _b(q):
        inside = q < 1.0
        qs = np.where(inside, q, 0.0)
        return np.where(inside, amp * np.exp(1.0 - 1.0 / (1.0 - qs)), 0.0), inside, qs

    def lam(x, y):
        return _b(_q(x, y))[0]

    def grad(x, y):
        b, inside, q = _b(_q(x, y))
        # d b / d q = -b / (1 - q)^2
        dbq = np.where(inside, -b / (1.0 - q) ** 2, 0.0)
        return dbq * 2 * (x - cx) / w2, dbq * 2 * (y - cy) / w2

    def lap(x, y):
        b, inside, q = _b(_q(x, y))
        om = 1.0 - q
        d1 = -b / om ** 2
        d2 = b * (2 * q - 1) / om ** 4
        # laplacian of b(q) = b''|grad q|^2 + b' lap q, |grad q|^2 = 4q/w^2, lap q = 4/w^2
        return np.where(inside, d2 * 4 * q / w2 + d1 * 4 / w2, 0.0)

    return ConformalMetric(lam, grad, lap, chart, name="bump")


# ---------------------------------------------------------------------------
# domains


def disk_domain(radius=1.0, center=(0.0, 0.0)):
    cx, cy = center
    R = float(radius)

    def rho(x, y):
        return (R * R - (x - cx) ** 2 - (y - cy) ** 2) / (2 * R)

    def grad(x, y):
        return -(x - cx) / R, -(y - cy) / R

    return Domain(rho, grad, [CircleCurve(center, R)], (cx - R, cx + R, cy - R, cy + R), name="disk")


def _smin(a, b, k):
    """Cubic smooth minimum (C2) and its partial derivatives."""
    h = np.maximum(k - np.abs(a - b), 0.0) / k
    m = np.minimum(a, b)
    val = m - k * h ** 3 / 6.0
    # derivative of -k h^3/6 w.r.t. (a - b) is h^2/2 * sign(a - b)
    s = np.sign(a - b)
    wa = np.where(a < b, 1.0, 0.0) + 0.5 * h * h * s
    wb = 1.0 - wa
    return val, wa, wb


def crescent_domain(hole_center=(0.9, 0.0), hole_radius=0.35, blend=0.05, n_grid=601):
    """Unit disk minus a disk that bites into its boundary, corners smoothed."""
    hx, hy = hole_center
    r = float(hole_radius)

    def parts(x, y):
        a = (1.0 - x * x - y * y) / 2.0
        b = ((x - hx) ** 2 + (y - hy) ** 2 - r * r) / (2 * r)
        return a, b

    def rho(x, y):
        a, b = parts(x, y)
        return _smin(a, b, blend)[0]

    def grad(x, y):
        a, b = parts(x, y)
        _, wa, wb = _smin(a, b, blend)
        return wa * (-x) + wb * (x - hx) / r, wa * (-y) + wb * (y - hy) / r

    g = np.linspace(-1.05, 1.05, n_grid)
    X, Y = np.meshgrid(g, g, indexing="ij")
    contours = find_contours(rho(X, Y), 0.0)
    c = max(contours, key=len)
    step = g[1] - g[0]
    xy = np.stack([g[0] + c[:, 0] * step, g[0] + c[:, 1] * step], axis=1)
    if np.allclose(xy[0], xy[-1]):
        xy = xy[:-1]
    # shoelace sign: counterclockwise keeps the domain on the left
    area = 0.5 * np.sum(xy[:, 0] * np.roll(xy[:, 1], -1) - np.roll(xy[:, 0], -1) * xy[:, 1])
    if area < 0:
        xy = xy[::-1]
    curve = LevelSetCurve(xy, rho, grad)
    return Domain(rho, grad, [curve], (-1.0, 1.0, -1.0, 1.0), name="crescent")


def strip_domain(y0, y1, period):
    w = y1 - y0

    def rho(x, y):
        return (y - y0) * (y1 - y) / w + 0.0 * x

    def grad(x, y):
        return 0.0 * x + 0.0 * y, (y1 + y0 - 2 * y) / w + 0.0 * x

    comps = [LineCurve(y0, period, domain_above=True), LineCurve(y1, period, domain_above=False)]
    return Domain(rho, grad, comps, (0.0, period, y0, y1), period_x=period, name="strip")


# ---------------------------------------------------------------------------
# catalog


def flat_disk(radius=1.0):
    R = float(radius)
    return Scenario("flat_disk", flat_metric((-1.5 * R, 1.5 * R, -1.5 * R, 1.5 * R)), disk_domain(R),
                    DeclaredFacts(True, True, True, True, known_area=np.pi * R * R, known_curvature=0.0),
                    diameter=2 * R, params={"radius": R})


def flat_crescent(hole_radius=0.35, hole_x=0.9, blend=0.05):
    d = crescent_domain((hole_x, 0.0), hole_radius, blend)
    return Scenario("flat_crescent", flat_metric(), d,
                    DeclaredFacts(True, True, True, False, known_curvature=0.0,
                                  numerically_certified=("conjugate_point_free",)),
                    diameter=2.0, params={"hole_radius": hole_radius, "hole_x": hole_x, "blend": blend})


def hyperbolic_patch(radius=0.5):
    R = float(radius)
    m = poincare_metric((-R - 0.2, R + 0.2, -R - 0.2, R + 0.2))
    return Scenario("hyperbolic_patch", m, disk_domain(R),
                    DeclaredFacts(True, True, True, True, known_area=4 * np.pi * R * R / (1 - R * R),
                                  known_curvature=-1.0),
                    diameter=4 * np.arctanh(R), params={"radius": R})


def spherical_cap(radius=1.2):
    R = float(radius)
    m = spherical_metric((-R - 0.3, R + 0.3, -R - 0.3, R + 0.3))
    # beyond the equator the boundary is concave and great circles are trapped
    return Scenario("spherical_cap", m, disk_domain(R),
                    DeclaredFacts(True, False, R < 1.0, R < 1.0, known_area=4 * np.pi * R * R / (1 + R * R),
                                  known_curvature=1.0),
                    diameter=np.pi, params={"radius": R})


def hyperbolic_cylinder_strip(period=2.0, half_width=0.6):
    y0, y1 = -half_width, half_width
    m = cylinder_metric(period, (y0 - 0.3, y1 + 0.3))
    area = period * (np.tan(y1) - np.tan(y0))
    return Scenario("hyperbolic_cylinder_strip", m, strip_domain(y0, y1, period),
                    DeclaredFacts(False, True, False, True, known_area=area, known_curvature=-1.0),
                    diameter=period + np.arctanh(np.sin(y1)) * 2, params={"period": period, "half_width": half_width})


def hyperbolic_cylinder_cut(period=2.0, cut=0.05, top=0.6):
    """The same cylinder cut just past the closed geodesic: concave lower boundary."""
    m = cylinder_metric(period, (cut - 0.3, top + 0.3))
    area = period * (np.tan(top) - np.tan(cut))
    return Scenario("hyperbolic_cylinder_cut", m, strip_domain(cut, top, period),
                    DeclaredFacts(False, True, True, False, known_area=area, known_curvature=-1.0,
                                  numerically_certified=("non_trapping",)),
                    diameter=period + 2 * (np.arctanh(np.sin(top)) - np.arctanh(np.sin(cut))),
                    params={"period": period, "cut": cut, "top": top})


def bump_metric(amp=0.15, width=0.5):
    return Scenario("bump_metric", bump_factor(amp, width=width), disk_domain(1.0),
                    DeclaredFacts(True, True, True, True,
                                  numerically_certified=("conjugate_point_free", "non_trapping", "convex_boundary")),
                    diameter=2.0 * np.exp(amp), params={"amp": amp, "width": width})


_BUILDERS = {
    "flat_disk": flat_disk,
    "flat_crescent": flat_crescent,
    "hyperbolic_patch": hyperbolic_patch,
    "spherical_cap": spherical_cap,
    "hyperbolic_cylinder_strip": hyperbolic_cylinder_strip,
    "hyperbolic_cylinder_cut": hyperbolic_cylinder_cut,
    "bump_metric": bump_metric,
}

_CACHE: dict = {}


def names():
    return list(_BUILDERS)


def get(name, **params) -> Scenario:
    """Build (and cache) a catalog scenario with optional numeric overrides."""
    if name not in _BUILDERS:
        raise KeyError("unknown scenario %r; choose from %s" % (name, ", ".join(_BUILDERS)))
    key = (name, tuple(sorted(params.items())))
    if key not in _CACHE:
        _CACHE[key] = _BUILDERS[name](**params)
    return _CACHE[key]


def catalog():
    return [get(n) for n in _BUILDERS]


# ---------------------------------------------------------------------------
# verification of declared facts


def _boundary_fan(d, n_points, n_angles, margin=0.02):
    from .lens import boundary_grid

    comp, s, _ = boundary_grid(d, n_points)
    x = np.empty(len(s))
    y = np.empty(len(s))
    for k in np.unique(comp):
        sel = comp == k
        x[sel], y[sel] = d.components[k].point(s[sel])
    nx, ny = d.inward_normal(x, y)
    a = np.linspace(-np.pi / 2 + margin, np.pi / 2 - margin, n_angles)
    th = np.mod(np.arctan2(ny, nx)[:, None] + a[None, :], 2 * np.pi)
    return np.repeat(x, n_angles), np.repeat(y, n_angles), th.ravel()


def _interior_fan(d, n_points, n_angles, seed=0):
    rng = np.random.default_rng(seed)
    xmin, xmax, ymin, ymax = d.bbox
    pts = []
    while len(pts) < n_points:
        p = rng.uniform([xmin, ymin], [xmax, ymax], size=(4 * n_points, 2))
        pts.extend(p[d.rho(p[:, 0], p[:, 1]) > 1e-3])
    pts = np.array(pts[:n_points])
    th = np.linspace(0, 2 * np.pi, n_angles, endpoint=False)
    return np.repeat(pts[:, 0], n_angles), np.repeat(pts[:, 1], n_angles), np.tile(th, n_points)


def verify_declared_facts(sc: Scenario, n_points=40, n_angles=25, solver=None):
    """Cross-check every declared fact numerically.

    Returns {fact: {"declared", "observed", "ok", "detail"}}.
    """
    from . import flow as F
    from .metric import curvature
    from .xray import domain_quadrature

    solver = solver or F.SolverConfig()
    m, d, f = sc.metric, sc.domain, sc.facts
    out = {}

    def put(name, declared, observed, detail):
        out[name] = {"declared": declared, "observed": observed, "ok": declared == observed
                     if isinstance(declared, bool) else bool(observed), "detail": detail}

    put("simply_connected", f.simply_connected, len(d.components) == 1 and not d.period_x,
        "%d boundary component(s), periodic=%s" % (len(d.components), bool(d.period_x)))

    # trapping: boundary fan for the non-trapping claim, interior fan to exhibit trapping
    x, y, th = _boundary_fan(d, n_points, n_angles)
    r = F.trace_batch(m, d, x, y, th, sc.t_budget, solver=solver, diameter=sc.diameter)
    n_trap = int(np.sum(r.status == F.BUDGET))
    if f.non_trapping:
        put("non_trapping", True, n_trap == 0, "%d of %d boundary rays trapped_budget" % (n_trap, x.size))
    else:
        xi, yi, ti = _interior_fan(d, 12, 16)
        core = d.period_x is not None
        if core:
            # the closed geodesic of the cylinder sits at y = 0
            xi, yi, ti = np.append(xi, 0.0), np.append(yi, 0.0), np.append(ti, 0.0)
        ri = F.trace_batch(m, d, xi, yi, ti, sc.t_budget, solver=solver, diameter=sc.diameter)
        n_in = int(np.sum(ri.status == F.BUDGET))
        put("non_trapping", False, n_in == 0 and n_trap == 0,
            "%d boundary and %d interior rays trapped_budget" % (n_trap, n_in))

    # conjugate points along the same boundary fan, capped in time for trapped rays
    t_cap = min(sc.t_budget, 10 * sc.diameter)
    wt, _ = F.first_conjugate_batch(m, d, x, y, th, t_cap, solver=solver, diameter=sc.diameter)
    n_conj = int(np.sum(np.isfinite(wt)))
    put("conjugate_point_free", f.conjugate_point_free, n_conj == 0,
        "%d of %d fan geodesics reach a conjugate point" % (n_conj, x.size))

    # convexity: glancing geodesics must leave the domain (X^2 rho < 0)
    from .lens import boundary_grid

    comp, s, _ = boundary_grid(d, 4 * n_points)
    worst = -np.inf
    for k in np.unique(comp):
        sel = comp == k
        bx, by = d.components[k].point(s[sel])
        tx, ty = d.components[k].tangent(s[sel])
        for sign in (1, -1):
            ang = np.arctan2(sign * ty, sign * tx)
            worst = max(worst, float(np.max(F.second_x_rho(m, d, bx, by, ang))))
    put("convex_boundary", f.convex_boundary, worst < 0, "max X^2 rho at glancing = %.3e" % worst)

    if f.known_area is not None:
        area = float(np.sum(domain_quadrature(m, d)[2]))
        rel = abs(area - f.known_area) / f.known_area
        put("known_area", None, rel < 1e-6, "quadrature %.12g vs %.12g (rel %.2e)" % (area, f.known_area, rel))
    if f.known_curvature is not None:
        xi, yi, _ = _interior_fan(d, 50, 1, seed=1)
        K = curvature(m, xi, yi)
        err = float(np.max(np.abs(K - f.known_curvature)))
        put("known_curvature", None, err < 1e-6, "max |K - %g| = %.2e" % (f.known_curvature, err))
    return out
