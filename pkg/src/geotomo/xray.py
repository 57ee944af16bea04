"""X-ray transforms of functions on SM and of symmetric tensor fields.

Path integrals are accumulated by augmenting the geodesic ODE with the
integrand, so they share the adaptive steps and the event location of the
exit-time computation.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.linalg import subspace_angles
from scipy.optimize import brentq, minimize_scalar

from . import flow as F
from .lens import LensTable, TRANSVERSAL


@dataclass(frozen=True)
class SymTensorField:
    """Symmetric m-tensor stored by its m+1 independent components.

    ``comps[j]`` is the component with j indices equal to y (and m - j equal
    to x).  ``grads[j]`` returns its chart gradient; it is only needed when
    the field is differentiated.
    """

    order: int
    comps: tuple
    grads: tuple | None = None
    # optional joint evaluators sharing work between components
    joint: object = None
    joint_jet: object = None

    def __post_init__(self):
        if len(self.comps) != self.order + 1:
            raise ValueError("a symmetric %d-tensor in 2D has %d components" % (self.order, self.order + 1))

    def values(self, x, y):
        """All components at once."""
        if self.joint is not None:
            return self.joint(x, y)
        return [c(x, y) for c in self.comps]

    def jet(self, x, y):
        """(values, gradients) of all components."""
        if self.joint_jet is not None:
            return self.joint_jet(x, y)
        return self.values(x, y), [g(x, y) for g in self.grads]

    def component(self, idx, x, y):
        """Value of a_{i1...im} for an index tuple of 0 (x) and 1 (y)."""
        return self.comps[sum(idx)](x, y)

    def scaled(self, c):
        g = None if self.grads is None else tuple(
            (lambda gf: (lambda x, y: tuple(c * v for v in gf(x, y))))(gf) for gf in self.grads)
        return SymTensorField(self.order, tuple((lambda f: (lambda x, y: c * f(x, y)))(f) for f in self.comps), g,
                              joint=lambda x, y: [c * a for a in self.values(x, y)])


def pullback_tensor(m, f: SymTensorField, x, y, theta):
    """f_x(v, ..., v) for the g-unit vector v = exp(-lam) (cos theta, sin theta)."""
    e = np.exp(-m.lam(x, y))
    v1, v2 = e * np.cos(theta), e * np.sin(theta)
    k = f.order
    out = 0.0
    for j, a in enumerate(f.values(x, y)):
        out = out + comb(k, j) * a * v1 ** (k - j) * v2 ** j
    return out + 0.0 * x


def christoffel(m, x, y):
    """Gamma[k][i][j] for the conformal metric (upper index first)."""
    lx, ly = m.grad_lam(x, y)
    L = (lx, ly)
    G = [[[None] * 2 for _ in range(2)] for _ in range(2)]
    for k, i, j in itertools.product(range(2), repeat=3):
        G[k][i][j] = (i == k) * L[j] + (j == k) * L[i] - (i == j) * L[k]
    return G


def sym_cov_derivative(m, p: SymTensorField) -> SymTensorField:
    """Symmetrized covariant derivative D p of a symmetric (m-1)-tensor."""
    if p.grads is None:
        raise ValueError("sym_cov_derivative needs the gradients of the components")
    r = p.order
    order = r + 1

    # index tuples of length r+1 grouped by their number of y entries
    groups = [[t for t in itertools.product(range(2), repeat=order) if sum(t) == j]
              for j in range(order + 1)]

    def joint(x, y):
        vals, grads = p.jet(x, y)
        G = christoffel(m, x, y) if r > 0 else None
        out = []
        for tuples in groups:
            acc = 0.0
            for t in tuples:
                kk, rest = t[0], t[1:]
                term = grads[sum(rest)][kk]
                for pos, ip in enumerate(rest):
                    for l in range(2):
                        swapped = rest[:pos] + (l,) + rest[pos + 1:]
                        term = term - G[l][kk][ip] * vals[sum(swapped)]
                acc = acc + term
            out.append(acc / len(tuples) + 0.0 * x)
        return out

    comps = tuple((lambda j: (lambda x, y: joint(x, y)[j]))(j) for j in range(order + 1))
    return SymTensorField(order, comps, joint=joint)


# ---------------------------------------------------------------------------
# transforms on lens tables


def _table_starts(table: LensTable):
    return table.x, table.y, table.theta


def xray_sm_functions(m, d, table: LensTable, funcs, *, solver=None):
    """I f on every table record for several integrands f(x, y, theta) at once.

    Returns an array (n_records, n_funcs); trapped or degenerate records are NaN.
    """
    funcs = list(funcs)
    k = len(funcs)
    solver = solver or table.solver

    def rhs(x, y, th, ext):
        return np.stack([np.broadcast_to(f(x, y, th), x.shape) for f in funcs], axis=1)

    x, y, th = _table_starts(table)
    r = F.trace_batch(m, d, x, y, th, table.t_budget, solver=solver, diameter=table.diameter,
                      extra_rhs=rhs, n_extra=k)
    out = r.extras.copy()
    bad = (r.status != F.EXITED) | r.degenerate
    out[bad] = np.nan
    return out


def xray_sm_function(m, d, table, f, *, solver=None):
    return xray_sm_functions(m, d, table, [f], solver=solver)[:, 0]


def xray_tensors(m, d, table, fields, *, solver=None):
    funcs = [(lambda fld: (lambda x, y, th: pullback_tensor(m, fld, x, y, th)))(fld) for fld in fields]
    return xray_sm_functions(m, d, table, funcs, solver=solver)


def xray_tensor(m, d, table, f: SymTensorField, *, solver=None):
    return xray_tensors(m, d, table, [f], solver=solver)[:, 0]


# ---------------------------------------------------------------------------
# Santalo balance


def _critical_x(d, n=20000):
    """Chart x of boundary points with vertical tangent (column topology changes)."""
    xs = []
    for c in d.components:
        if c.periodic_chart:
            continue
        s = np.linspace(0, c.length, n, endpoint=False)
        tx = c.tangent(s)[0]
        flips = np.nonzero(np.sign(tx) != np.sign(np.roll(tx, -1)))[0]
        for i in flips:
            a, b = s[i], s[i] + c.length / n
            try:
                r = brentq(lambda u: c.tangent(u)[0], a, b, xtol=1e-14)
            except ValueError:
                r = a
            xs.append(float(np.atleast_1d(c.point(r)[0])[0]))
    return np.unique(np.round(np.array(xs), 12))


def _column_intervals(d, x, ylo, yhi, n_scan=400):
    ys = np.linspace(ylo, yhi, n_scan)
    r = d.rho(np.full_like(ys, x), ys)

    def rho_y(v):
        return float(d.rho(np.float64(x), np.float64(v)))

    # short columns near tangencies can hide between scan nodes: refine local maxima
    extra = []
    for i in range(1, n_scan - 1):
        if r[i] <= 0 and r[i] >= r[i - 1] and r[i] >= r[i + 1]:
            res = minimize_scalar(lambda v: -rho_y(v), bounds=(ys[i - 1], ys[i + 1]), method="bounded",
                                  options={"xatol": 1e-15})
            if -res.fun > 0:
                extra.append((brentq(rho_y, ys[i - 1], res.x, xtol=1e-15), brentq(rho_y, res.x, ys[i + 1], xtol=1e-15)))
    out = []
    inside = r > 0
    start = ylo if inside[0] else None
    for i in range(n_scan - 1):
        if inside[i] != inside[i + 1]:
            root = brentq(rho_y, ys[i], ys[i + 1], xtol=1e-15)
            if inside[i]:
                out.append((start, root))
                start = None
            else:
                start = root
    if start is not None:
        out.append((start, yhi))
    return sorted(out + extra)


def domain_quadrature(m, d, n_x=200, n_y=48):
    """Nodes and weights for the g-area measure exp(2 lam) dx dy on the domain."""
    xmin, xmax, ymin, ymax = d.bbox
    pad = 0.02 * (ymax - ymin)
    gy, gwy = np.polynomial.legendre.leggauss(n_y)
    if d.period_x:
        xs = np.arange(n_x) * d.period_x / n_x
        wx = np.full(n_x, d.period_x / n_x)
    else:
        cuts = np.concatenate([[xmin], _critical_x(d), [xmax]])
        cuts = np.unique(np.clip(cuts, xmin, xmax))
        gu, gwu = np.polynomial.legendre.leggauss(n_x)
        u = 0.5 * (gu + 1)
        # cosine map clusters nodes at the piece ends, where column lengths have sqrt behaviour
        phi = 0.5 * (1 - np.cos(np.pi * u))
        dphi = 0.5 * np.pi * np.sin(np.pi * u) * 0.5 * gwu
        xs, wx = [], []
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b - a < 1e-12:
                continue
            xs.append(a + (b - a) * phi)
            wx.append((b - a) * dphi)
        xs, wx = np.concatenate(xs), np.concatenate(wx)
    X, Y, W = [], [], []
    for xi, wi in zip(xs, wx):
        for a, b in _column_intervals(d, xi, ymin - pad, ymax + pad):
            yy = 0.5 * (b - a) * gy + 0.5 * (a + b)
            X.append(np.full(n_y, xi))
            Y.append(yy)
            W.append(wi * 0.5 * (b - a) * gwy)
    X, Y, W = np.concatenate(X), np.concatenate(Y), np.concatenate(W)
    return X, Y, W * np.exp(2 * m.lam(X, Y))


def liouville_integral(m, d, f, n_x=200, n_y=48, n_theta=64):
    """Integral of f over SM against exp(2 lam) dx dy dtheta."""
    X, Y, W = domain_quadrature(m, d, n_x, n_y)
    th = np.arange(n_theta) * 2 * np.pi / n_theta
    tot = 0.0
    for t in th:
        tot += np.sum(W * f(X, Y, np.full_like(X, t)))
    return float(tot * 2 * np.pi / n_theta)


def santalo_check(m, d, table: LensTable, f, *, n_x=200, n_y=48, n_theta=64, If=None):
    """(lhs, rhs): phase-space integral of f versus sum of I f times boundary weights."""
    lhs = liouville_integral(m, d, f, n_x, n_y, n_theta)
    if If is None:
        If = xray_sm_function(m, d, table, f)
    sel = (table.cls == TRANSVERSAL) & (table.weight > 0)
    rhs = float(np.sum(If[sel] * table.weight[sel]))
    return lhs, rhs


# ---------------------------------------------------------------------------
# polynomial bases and potentials


def monomial_exponents(deg):
    return [(a, t - a) for t in range(deg + 1) for a in range(t, -1, -1)]


class _Scaling:
    def __init__(self, d):
        xmin, xmax, ymin, ymax = d.bbox
        self.cx, self.cy = 0.5 * (xmin + xmax), 0.5 * (ymin + ymax)
        self.sx, self.sy = 0.5 * (xmax - xmin), 0.5 * (ymax - ymin)

    def mono(self, a, b):
        cx, cy, sx, sy = self.cx, self.cy, self.sx, self.sy

        def f(x, y):
            return ((x - cx) / sx) ** a * ((y - cy) / sy) ** b

        def g(x, y):
            u, v = (x - cx) / sx, (y - cy) / sy
            dx = a * u ** max(a - 1, 0) * v ** b / sx if a else 0.0 * x
            dy = b * u ** a * v ** max(b - 1, 0) / sy if b else 0.0 * y
            return dx + 0.0 * x, dy + 0.0 * y

        return f, g


def tensor_basis(m, d, order, deg):
    """Scaled monomials of degree <= deg placed in one independent component."""
    sc = _Scaling(d)
    basis = []
    for j in range(order + 1):
        for a, b in monomial_exponents(deg):
            f, _ = sc.mono(a, b)
            comps = tuple(f if q == j else (lambda x, y: 0.0 * x) for q in range(order + 1))
            basis.append(SymTensorField(order, comps))
    return basis


def boundary_vanishing_potential(m, d, order, coeffs, weight_exp=0, scale=None):
    """Potential p of the given order with components rho * exp(k lam) * poly_j.

    ``coeffs[j]`` is a 2D coefficient array in the scaled monomials.
    """
    sc = scale or _Scaling(d)
    P = np.polynomial.polynomial

    def make(c):
        cdx = P.polyder(c, axis=0) / sc.sx
        cdy = P.polyder(c, axis=1) / sc.sy

        def f(x, y):
            u, v = (x - sc.cx) / sc.sx, (y - sc.cy) / sc.sy
            return d.rho(x, y) * np.exp(weight_exp * m.lam(x, y)) * P.polyval2d(u, v, c)

        def g(x, y):
            u, v = (x - sc.cx) / sc.sx, (y - sc.cy) / sc.sy
            r = d.rho(x, y)
            rx, ry = d.grad_rho(x, y)
            e = np.exp(weight_exp * m.lam(x, y))
            lx, ly = m.grad_lam(x, y)
            pv = P.polyval2d(u, v, c)
            px, py = P.polyval2d(u, v, cdx), P.polyval2d(u, v, cdy)
            return (e * (rx * pv + r * px + weight_exp * lx * r * pv),
                    e * (ry * pv + r * py + weight_exp * ly * r * pv))

        return f, g

    cs = [np.asarray(c, dtype=float) for c in coeffs]
    parts = [make(c) for c in cs]
    ders = [(P.polyder(c, axis=0) / sc.sx, P.polyder(c, axis=1) / sc.sy) for c in cs]

    def joint_jet(x, y):
        u, v = (x - sc.cx) / sc.sx, (y - sc.cy) / sc.sy
        r = d.rho(x, y)
        rx, ry = d.grad_rho(x, y)
        e = np.exp(weight_exp * m.lam(x, y))
        lx, ly = m.grad_lam(x, y)
        vals, grads = [], []
        for c, (cdx, cdy) in zip(cs, ders):
            pv = P.polyval2d(u, v, c)
            px, py = P.polyval2d(u, v, cdx), P.polyval2d(u, v, cdy)
            vals.append(r * e * pv)
            grads.append((e * (rx * pv + r * px + weight_exp * lx * r * pv),
                          e * (ry * pv + r * py + weight_exp * ly * r * pv)))
        return vals, grads

    return SymTensorField(order, tuple(p[0] for p in parts), tuple(p[1] for p in parts),
                          joint_jet=joint_jet)


def _sample_points(m, d, n=400, seed=0):
    X, Y, W = domain_quadrature(m, d, 60, 20)
    rng = np.random.default_rng(seed)
    idx = rng.choice(X.size, size=min(n, X.size), replace=False)
    return X[idx], Y[idx]


def _component_matrix(fields, x, y):
    cols = []
    for f in fields:
        cols.append(np.concatenate([np.broadcast_to(c(x, y), x.shape) for c in f.comps]))
    return np.stack(cols, axis=1)


class KernelTestError(RuntimeError):
    pass


def potential_image(m, d, order, deg, basis, exps=(-2, -1, 0, 1), tol=1e-6, rank_tol=1e-10, n_samples=800):
    """Orthonormal coefficient vectors (in ``basis``) spanning the basis elements
    that are symmetrized derivatives of boundary-vanishing potentials.

    Candidates are rho * exp(k lam) * monomial in each component; linear
    combinations whose derivative falls in the span of the basis are found
    from the principal angles between the two sampled ranges.
    """
    x, y = _sample_points(m, d, n_samples)
    B = _component_matrix(basis, x, y)
    sc = _Scaling(d)
    cands = []
    for k in exps:
        for j in range(order):
            for a, b in monomial_exponents(deg + 1):
                coeffs = [np.zeros((a + 1, b + 1)) for _ in range(order)]
                coeffs[j][a, b] = 1.0
                cands.append(boundary_vanishing_potential(m, d, order - 1, coeffs, weight_exp=k, scale=sc))
    DP = _component_matrix([sym_cov_derivative(m, p) for p in cands], x, y)
    DP = DP / np.linalg.norm(DP, axis=0)
    U, sd, _ = np.linalg.svd(DP, full_matrices=False)
    U = U[:, sd > rank_tol * sd[0]]
    Qb, Rb = np.linalg.qr(B)
    # principal directions of range(B) lying inside range(D candidates)
    Y, cosines, _ = np.linalg.svd(Qb.T @ U, full_matrices=False)
    Y = Y[:, np.arccos(np.clip(cosines, -1, 1)) < tol]
    if Y.shape[1] == 0:
        return np.zeros((len(basis), 0))
    coef = np.linalg.solve(Rb, Y)
    Uc, sv, _ = np.linalg.svd(coef, full_matrices=False)
    return Uc[:, sv > 1e-10 * sv[0]]


def potential_kernel_test(m, d, table: LensTable, order, deg=4, *, kernel_rel=1e-8, solver=None):
    """SVD of the weighted X-ray matrix on a tensor basis and comparison of its
    numerical kernel with the image of boundary-vanishing potentials."""
    basis = tensor_basis(m, d, order, deg)
    x, y = _sample_points(m, d)
    Bm = _component_matrix(basis, x, y)
    G = Bm.T @ Bm
    ev = np.linalg.eigvalsh(G)
    cond = float(ev[-1] / max(ev[0], 1e-300))
    if cond > 1e10:
        raise KernelTestError("basis Gram matrix condition %.3e exceeds 1e10" % cond)
    sel = (table.cls == TRANSVERSAL) & (table.weight > 0)
    I = xray_tensors(m, d, table, basis, solver=solver)
    keep = sel & np.all(np.isfinite(I), axis=1)
    A = I[keep] * np.sqrt(table.weight[keep])[:, None]
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    ker = Vt[s < kernel_rel * s[0]].T
    report = {
        "order": order, "degree": deg, "n_nodes": int(keep.sum()), "n_basis": len(basis),
        "singular_values": s.tolist(), "kernel_threshold": kernel_rel * float(s[0]),
        "kernel_dimension": int(ker.shape[1]), "sigma_ratio": float(s[-1] / s[0]),
        "gram_condition": cond, "kernel_basis": ker.T.tolist(),
    }
    if order >= 1:
        P = potential_image(m, d, order, deg, basis)
        report["potential_dimension"] = int(P.shape[1])
        if ker.shape[1] and P.shape[1]:
            ang = subspace_angles(ker, P)
            report["principal_angles"] = ang.tolist()
        else:
            report["principal_angles"] = []
        # smallest singular values on the potential image, relative
        report["potential_residual"] = float(np.linalg.norm(A @ P) / (s[0] * max(P.shape[1], 1) ** 0.5)) \
            if P.shape[1] else 0.0
    return report


def random_potentials(m, d, order, n, seed=0, deg=3):
    """Random boundary-vanishing potentials of the given order (rho times random polynomials)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        coeffs = []
        for _ in range(order + 1):
            c = rng.normal(size=(deg + 1, deg + 1))
            c[np.add.outer(np.arange(deg + 1), np.arange(deg + 1)) > deg] = 0.0
            coeffs.append(c)
        out.append(boundary_vanishing_potential(m, d, order, coeffs))
    return out
