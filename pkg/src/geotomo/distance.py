"""Boundary distance function, boundary length recovery and lens data from distances.

Shortest in-domain paths are found in two stages: a masked grid graph with a
16-neighbour stencil fixes the homotopy class (and any boundary arcs the
minimizer follows), then the polyline is shortened by projected Newton steps
on its discrete energy.  Lengths at two polyline resolutions are Richardson
extrapolated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from . import flow as F
from .lens import boundary_grid
from .metric import ConformalMetric, Domain

# half stencil; the undirected graph gives 8 king moves plus 8 knight moves
_STENCIL = ((1, 0), (0, 1), (1, 1), (1, -1), (1, 2), (2, 1), (1, -2), (2, -1))


class DistanceError(RuntimeError):
    """Raised when two boundary points are not connected inside the domain."""


def _wrap(a):
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# grid graph


class GridGraph:
    """Masked grid over the domain bounding box with metric edge weights."""

    def __init__(self, m: ConformalMetric, d: Domain, n=600):
        # n is a node count per axis or an (nx, ny) pair
        nx, ny = (int(n), int(n)) if np.ndim(n) == 0 else (int(n[0]), int(n[1]))
        self.m, self.d, self.n = m, d, (nx, ny)
        xmin, xmax, ymin, ymax = d.bbox
        self.period = d.period_x
        if self.period:
            xs = xmin + np.arange(nx) * self.period / nx
        else:
            xs = np.linspace(xmin, xmax, nx)
        ys = np.linspace(ymin, ymax, ny)
        self.hx, self.hy = xs[1] - xs[0], ys[1] - ys[0]
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        mask = d.rho(X, Y) >= 0
        idx = np.full(mask.shape, -1)
        idx[mask] = np.arange(mask.sum())
        self.xy = np.stack([X[mask], Y[mask]], axis=1)
        self.origin = (xmin, ymin)

        rows, cols, wts = [], [], []
        nx, ny = mask.shape
        for di, dj in _STENCIL:
            i0 = np.arange(nx)
            i1 = i0 + di
            if self.period:
                i1 = i1 % nx
                keep_i = np.ones(nx, bool)
            else:
                keep_i = i1 < nx
            j0 = np.arange(max(0, -dj), min(ny, ny - dj))
            I0, J0 = np.meshgrid(i0[keep_i], j0, indexing="ij")
            I1, J1 = np.meshgrid(i1[keep_i], j0 + dj, indexing="ij")
            ok = mask[I0, J0] & mask[I1, J1]
            a, b = idx[I0[ok], J0[ok]], idx[I1[ok], J1[ok]]
            xa, ya = X[I0[ok], J0[ok]], Y[I0[ok], J0[ok]]
            ex, ey = di * self.hx, dj * self.hy
            mx, my = xa + 0.5 * ex, ya + 0.5 * ey
            inside = d.rho(mx, my) >= 0
            w = np.exp(m.lam(mx, my)) * np.hypot(ex, ey)
            rows.append(a[inside])
            cols.append(b[inside])
            wts.append(w[inside])
        N = len(self.xy)
        self.graph = csr_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        if self.period:
            q = np.stack([np.mod(self.xy[:, 0] - xmin, self.period), self.xy[:, 1] - ymin], axis=1)
            self._tree = cKDTree(q, boxsize=[self.period, 1e6])
        else:
            self._tree = cKDTree(self.xy)

    def nearest(self, x, y):
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        if self.period:
            q = np.stack([np.mod(x - self.origin[0], self.period), y - self.origin[1]], axis=1)
        else:
            q = np.stack([x, y], axis=1)
        return self._tree.query(q)[1]

    def _unwrap(self, pts, x_start):
        """Lift a node sequence to a continuous chart path starting near x_start."""
        if not self.period:
            return pts
        P = self.period
        dx = np.diff(pts[:, 0])
        dx -= P * np.round(dx / P)
        x0 = pts[0, 0] + P * np.round((x_start - pts[0, 0]) / P)
        out = pts.copy()
        out[:, 0] = x0 + np.concatenate([[0.0], np.cumsum(dx)])
        return out

    def paths(self, src, dst):
        """Graph polylines from chart point ``src`` to each chart point in ``dst``."""
        s_node = int(self.nearest(src[0], src[1])[0])
        dist, pred = dijkstra(self.graph, directed=False, indices=s_node, return_predecessors=True)
        t_nodes = self.nearest(dst[:, 0], dst[:, 1])
        out = []
        for (tx, ty), t in zip(dst, t_nodes):
            if not np.isfinite(dist[t]):
                raise DistanceError("boundary points are not connected in the masked grid")
            chain = [t]
            while chain[-1] != s_node:
                chain.append(pred[chain[-1]])
            nodes = self.xy[chain[::-1]]
            nodes = self._unwrap(nodes, src[0])
            end = np.array([tx, ty])
            if self.period:
                end[0] += self.period * np.round((nodes[-1, 0] - tx) / self.period)
            out.append(np.vstack([np.asarray(src, float)[None], nodes, end[None]]))
        return out


# ---------------------------------------------------------------------------
# path shortening


def _resample(poly, n_seg):
    seg = np.hypot(*np.diff(poly, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    keep = np.concatenate([[True], seg > 0])
    s, poly = s[keep], poly[keep]
    if s[-1] == 0:
        return np.repeat(poly[:1], n_seg + 1, axis=0)
    t = np.linspace(0, s[-1], n_seg + 1)
    return np.stack([np.interp(t, s, poly[:, 0]), np.interp(t, s, poly[:, 1])], axis=1)


def _project(d, P, iters=4, onto=None):
    """Push interior polyline vertices with rho < 0 back onto the boundary;
    vertices flagged in ``onto`` are put on the boundary from either side."""
    Q = P.copy()
    inner = Q[:, 1:-1]
    for _ in range(iters):
        r = d.rho(inner[..., 0], inner[..., 1])
        bad = r < 0 if onto is None else (r < 0) | onto
        if not bad.any():
            break
        gx, gy = d.grad_rho(inner[..., 0], inner[..., 1])
        g2 = np.maximum(gx * gx + gy * gy, 1e-300)
        step = np.where(bad, -r / g2, 0.0)
        inner[..., 0] += step * gx
        inner[..., 1] += step * gy
    return Q


def path_length(m, P):
    """Midpoint-rule g-length of polylines of shape (..., K, 2)."""
    D = np.diff(P, axis=-2)
    M = 0.5 * (P[..., 1:, :] + P[..., :-1, :])
    return np.sum(np.exp(m.lam(M[..., 0], M[..., 1])) * np.hypot(D[..., 0], D[..., 1]), axis=-1)


def _energy(m, P):
    D = np.diff(P, axis=-2)
    M = 0.5 * (P[..., 1:, :] + P[..., :-1, :])
    return np.sum(np.exp(2 * m.lam(M[..., 0], M[..., 1])) * np.sum(D * D, axis=-1), axis=-1)


def _block_solve(Dg, C, r):
    """Solve block tridiagonal systems with 2x2 blocks, batched over the first axis.

    Dg: (B, n, 2, 2) diagonal blocks, C: (B, n-1, 2, 2) upper blocks (lower is C^T),
    r: (B, n, 2).
    """
    B, n = r.shape[:2]
    Dp = np.empty_like(Dg)
    rp = np.empty_like(r)
    Dp[:, 0], rp[:, 0] = Dg[:, 0], r[:, 0]
    for j in range(1, n):
        Lj = np.swapaxes(C[:, j - 1], 1, 2)
        W = Lj @ np.linalg.inv(Dp[:, j - 1])
        Dp[:, j] = Dg[:, j] - W @ C[:, j - 1]
        rp[:, j] = r[:, j] - (W @ rp[:, j - 1][..., None])[..., 0]
    x = np.empty_like(r)
    x[:, -1] = np.linalg.solve(Dp[:, -1], rp[:, -1][..., None])[..., 0]
    for j in range(n - 2, -1, -1):
        rhs = rp[:, j] - (C[:, j] @ x[:, j + 1][..., None])[..., 0]
        x[:, j] = np.linalg.solve(Dp[:, j], rhs[..., None])[..., 0]
    return x


def _newton_system(m, P, full=True):
    """Gradient and block Hessian of the discrete energy w.r.t. interior vertices."""
    D = np.diff(P, axis=1)
    M = 0.5 * (P[:, 1:] + P[:, :-1])
    mx, my = M[..., 0], M[..., 1]
    a = np.exp(2 * m.lam(mx, my))
    lx, ly = m.grad_lam(mx, my)
    gl = np.stack([lx, ly], axis=-1) * np.ones_like(D)
    q = np.sum(D * D, axis=-1)
    gm = a[..., None] * gl * q[..., None]
    g_minus = gm - 2 * a[..., None] * D
    g_plus = gm + 2 * a[..., None] * D
    grad = g_plus[:, :-1] + g_minus[:, 1:]
    eye = np.eye(2)
    if full:
        hxx, hxy, hyy = m.hess_lam(mx, my)
        H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2) * np.ones_like(a)[..., None, None]
        A2 = a[..., None, None] * (4 * gl[..., :, None] * gl[..., None, :] + 2 * H)
        ga = 2 * a[..., None] * gl
        gq = 2 * D
        sym = 0.5 * (ga[..., :, None] * gq[..., None, :] + gq[..., :, None] * ga[..., None, :])
        anti = 0.5 * (ga[..., :, None] * gq[..., None, :] - gq[..., :, None] * ga[..., None, :])
        base = 0.25 * q[..., None, None] * A2
        Hpp = base + sym + 2 * a[..., None, None] * eye
        Hmm = base - sym + 2 * a[..., None, None] * eye
        Hmp = base + anti - 2 * a[..., None, None] * eye  # row p_i, column p_{i+1}
    else:
        Hpp = Hmm = 2 * a[..., None, None] * eye
        Hmp = -2 * a[..., None, None] * eye
    Dg = Hpp[:, :-1] + Hmm[:, 1:]
    C = Hmp[:, 1:-1]
    return grad, Dg, C


def _advance(d, P0, P1, pinned, ctol=1e-9):
    """Move vertices from P0 toward P1; vertices leaving the domain from the
    interior stop where they meet the boundary, pinned vertices slide and are
    projected back onto it."""
    a, b = P0[:, 1:-1], P1[:, 1:-1]
    r1 = d.rho(b[..., 0], b[..., 1])
    out = r1 < 0
    if not (out.any() or pinned.any()):
        return P1
    r0 = d.rho(a[..., 0], a[..., 1])
    cross = out & (r0 > ctol) & ~pinned
    if cross.any():
        lo = np.zeros(r0.shape)
        hi = np.ones(r0.shape)
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            q = a + mid[..., None] * (b - a)
            inside = d.rho(q[..., 0], q[..., 1]) >= 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        stop = a + lo[..., None] * (b - a)
        b = np.where(cross[..., None], stop, b)
    Q = P1.copy()
    Q[:, 1:-1] = b
    return _project(d, Q, onto=pinned)


def _pin(d, P, grad, Dg, ctol=1e-9):
    """Active set: vertices on the boundary whose descent direction points
    outward may only slide along the boundary (stiff normal, zero normal force)."""
    inner = P[:, 1:-1]
    r = d.rho(inner[..., 0], inner[..., 1])
    gx, gy = d.grad_rho(inner[..., 0], inner[..., 1])
    nrm = np.maximum(np.hypot(gx, gy), 1e-300)  # grad rho may vanish deep inside
    n = np.stack([gx / nrm, gy / nrm], axis=-1)
    gn = np.sum(grad * n, axis=-1)
    pinned = (r <= ctol) & (gn >= 0)  # -grad points out of the domain
    if not pinned.any():
        return grad, Dg, pinned
    grad = np.where(pinned[..., None], grad - gn[..., None] * n, grad)
    stiff = 1e6 * np.max(np.abs(Dg), axis=(-2, -1))
    Dg = Dg + np.where(pinned, stiff, 0.0)[..., None, None] * n[..., :, None] * n[..., None, :]
    return grad, Dg, pinned


def _shorten(m, d, P, tol=1e-13, max_iter=200):
    """Projected Newton iterations on the discrete energy with fallback to
    Laplacian-preconditioned gradient steps when Newton fails to descend."""
    P = _project(d, P)
    E = _energy(m, P)
    active = np.ones(len(P), bool)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        Pa = P[idx]
        grad, Dg, C = _newton_system(m, Pa)
        _, Dl, Cl = _newton_system(m, Pa, full=False)
        grad0 = grad
        grad, Dg, pinned = _pin(d, Pa, grad0, Dg)
        _, Dl, _ = _pin(d, Pa, grad0, Dl)
        step_n = -_block_solve(Dg, C, grad)
        step_g = -_block_solve(Dl, Cl, grad)
        newP = Pa.copy()
        newE = E[idx].copy()
        moved = np.zeros(idx.size)
        todo = np.ones(idx.size, bool)
        for step, scales in ((step_n, (1.0, 0.5, 0.25, 0.125)), (step_g, (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125))):
            for t in scales:
                if not todo.any():
                    break
                T = Pa[todo].copy()
                T[:, 1:-1] += t * step[todo]
                T = _advance(d, Pa[todo], T, pinned[todo])
                Et = _energy(m, T)
                ok = Et <= E[idx][todo] * (1 + 1e-15)
                rows = np.nonzero(todo)[0][ok]
                newP[rows] = T[ok]
                newE[rows] = Et[ok]
                moved[rows] = np.max(np.abs(T[ok] - Pa[todo][ok]), axis=(1, 2))
                todo[rows] = False
        P[idx] = newP
        E[idx] = newE
        # converged when the accepted move is tiny or no descent step was found
        active[idx] = ~todo & (moved > tol)
    return P


def _refine(d, P):
    K = P.shape[1]
    Q = np.empty((P.shape[0], 2 * K - 1, 2))
    Q[:, ::2] = P
    Q[:, 1::2] = 0.5 * (P[:, 1:] + P[:, :-1])
    return _project(d, Q)


def shorten_paths(m, d, polylines, n_seg=64, chunk=2048):
    """g-lengths of locally shortest paths homotopic to the given polylines.

    Returns (lengths, paths) where lengths are Richardson extrapolated from
    n_seg and 2 n_seg segments and paths are the finer polylines.
    """
    lengths = np.empty(len(polylines))
    paths = []
    for c0 in range(0, len(polylines), chunk):
        block = polylines[c0:c0 + chunk]
        P = np.stack([_resample(p, n_seg) for p in block])
        P = _shorten(m, d, P)
        L1 = path_length(m, P)
        P2 = _shorten(m, d, _refine(d, P))
        L2 = path_length(m, P2)
        lengths[c0:c0 + len(block)] = (4 * L2 - L1) / 3
        paths.extend(P2)
    return lengths, paths


# ---------------------------------------------------------------------------
# boundary distance


def boundary_distance(m, d, x, x2, *, graph: GridGraph | None = None, grid_n=600, n_seg=64):
    """Shortest in-domain g-length between two boundary points and its polyline."""
    x, x2 = np.asarray(x, float), np.asarray(x2, float)
    if np.allclose(x, x2, rtol=0, atol=1e-14):
        return 0.0, x[None].copy()
    graph = graph or GridGraph(m, d, grid_n)
    poly = graph.paths(x, x2[None])
    L, P = shorten_paths(m, d, poly, n_seg)
    return float(L[0]), P[0]


def beta_many(m, d, src, dst, *, graph: GridGraph, n_seg=64):
    """beta from one boundary point to an array of boundary points."""
    src = np.asarray(src, float)
    dst = np.atleast_2d(np.asarray(dst, float))
    same = np.all(np.abs(dst - src) < 1e-14, axis=1)
    out = np.zeros(len(dst))
    if (~same).any():
        polys = graph.paths(src, dst[~same])
        out[~same] = shorten_paths(m, d, polys, n_seg)[0]
    return out


@dataclass
class BetaTable:
    """beta on all ordered pairs of a boundary grid, with tangential gradients."""

    comp: np.ndarray
    s: np.ndarray
    xy: np.ndarray
    beta: np.ndarray
    smooth: np.ndarray
    grad_a: np.ndarray  # tangential g-gradient in the first argument
    grad_b: np.ndarray  # tangential g-gradient in the second argument
    m: ConformalMetric | None = None
    d: Domain | None = None
    graph: GridGraph | None = None
    n_seg: int = 64
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.s)

    def distance(self, comp_a, s_a, comp_b, s_b):
        """beta between arbitrary boundary points, from the grid when possible."""
        i = self._find(comp_a, s_a)
        j = self._find(comp_b, s_b)
        if i is not None and j is not None:
            return float(self.beta[i, j])
        if self.m is None:
            raise KeyError("point not on the table grid and no metric attached")
        pa = np.array(self.d.boundary_point(comp_a, s_a), float)
        pb = np.array(self.d.boundary_point(comp_b, s_b), float)
        return float(beta_many(self.m, self.d, pa, pb, graph=self.graph, n_seg=self.n_seg)[0])

    def _find(self, comp, s):
        L = self.d.components[comp].length if self.d is not None else np.inf
        ds = np.abs(self.s - s)
        ds = np.minimum(ds, L - ds)
        k = np.nonzero((self.comp == comp) & (ds < 1e-12))[0]
        return int(k[0]) if k.size else None

    def csv_rows(self):
        n = len(self)
        for i in range(n):
            for j in range(n):
                yield (int(self.comp[i]), repr(float(self.s[i])), int(self.comp[j]), repr(float(self.s[j])),
                       repr(float(self.beta[i, j])), int(self.smooth[i, j]))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# units: s in chart arclength, beta in g-length\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["component_a", "s_a", "component_b", "s_b", "beta", "smooth_flag"])
            w.writerows(self.csv_rows())

    def symmetry_residual(self):
        return float(np.max(np.abs(self.beta - self.beta.T)))

    def triangle_violation(self):
        """max over triples of beta(i, j) - beta(i, k) - beta(k, j) (<= 0 when consistent)."""
        B = self.beta
        worst = -np.inf
        for i in range(len(B)):
            # [j, k] entry: beta(i, j) - beta(i, k) - beta(k, j)
            worst = max(worst, float(np.max(B[i][:, None] - B[i][None, :] - B.T)))
        return worst


def _neighbours(comp):
    """Previous and next grid index on the same (periodic) component."""
    n = len(comp)
    prev, nxt = np.empty(n, int), np.empty(n, int)
    for k in np.unique(comp):
        idx = np.nonzero(comp == k)[0]
        prev[idx] = np.roll(idx, 1)
        nxt[idx] = np.roll(idx, -1)
    return prev, nxt


def build_beta_table(m, d, n_boundary=64, *, grid_n=600, n_seg=64, graph: GridGraph | None = None,
                     smooth_ratio=10.0, grad_margin=1e-3):
    """beta on an n_boundary boundary grid, computed independently in both orders."""
    comp, s, ds = boundary_grid(d, n_boundary)
    xs = np.empty(len(s))
    ys = np.empty(len(s))
    for k in np.unique(comp):
        sel = comp == k
        xs[sel], ys[sel] = d.components[k].point(s[sel])
    xy = np.stack([xs, ys], axis=1)
    graph = graph or GridGraph(m, d, grid_n)
    n = len(s)
    polys, pairs = [], []
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        polys.extend(graph.paths(xy[i], xy[others]))
        pairs.extend((i, j) for j in others)
    L, _ = shorten_paths(m, d, polys, n_seg)
    beta = np.zeros((n, n))
    ii, jj = np.array(pairs).T
    beta[ii, jj] = L

    prev, nxt = _neighbours(comp)
    prev2, nxt2 = prev[prev], nxt[nxt]
    scale = np.exp(m.lam(xs, ys))
    hg = ds * scale  # g-arclength per grid step at each sample
    # fourth-order central differences in boundary arclength
    grad_a = (8 * (beta[nxt, :] - beta[prev, :]) - (beta[nxt2, :] - beta[prev2, :])) / (12 * hg[:, None])
    grad_b = (8 * (beta[:, nxt] - beta[:, prev]) - (beta[:, nxt2] - beta[:, prev2])) / (12 * hg[None, :])
    d2a = beta[nxt, :] - 2 * beta + beta[prev, :]
    d2b = beta[:, nxt] - 2 * beta + beta[:, prev]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok2 = (np.abs(d2a) <= smooth_ratio * hg[:, None] ** 2 / beta) & \
              (np.abs(d2b) <= smooth_ratio * hg[None, :] ** 2 / beta)
    ok1 = (np.abs(grad_a) <= 1 - grad_margin) & (np.abs(grad_b) <= 1 - grad_margin)
    near = np.zeros((n, n), bool)
    rows = np.arange(n)
    for nb in (rows, prev, nxt, prev2, nxt2):
        near[rows, nb] = True
        near[nb, rows] = True
    smooth = ok1 & ok2 & ~near & (beta > 0)
    return BetaTable(comp, s, xy, beta, smooth, grad_a, grad_b, m, d, graph, n_seg,
                     meta={"grid_n": list(graph.n), "n_seg": n_seg, "n_boundary": n})


# ---------------------------------------------------------------------------
# boundary metric from beta


@dataclass
class ArcLength:
    value: float
    error_estimate: float
    partial_sums: np.ndarray
    consistent: bool


def boundary_metric_from_beta(table: BetaTable, component, s0, s1, depth_cap=6, tol=1e-9) -> ArcLength:
    """g-length of a boundary arc as the limit of dyadic partition sums of beta."""
    if s1 == s0:
        return ArcLength(0.0, 0.0, np.zeros(1), True)
    sums = []
    cache: dict = {}
    for k in range(depth_cap + 1):
        pts = s0 + (s1 - s0) * np.arange(2 ** k + 1) / 2 ** k
        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            key = (round(a, 14), round(b, 14))
            if key not in cache:
                cache[key] = table.distance(component, a, component, b)
            total += cache[key]
        sums.append(total)
    sums = np.array(sums)
    consistent = bool(np.all(np.diff(sums) >= -tol))
    return ArcLength(float(sums[-1]), float(sums[-1] - sums[-2]) if len(sums) > 1 else 0.0, sums, consistent)


# ---------------------------------------------------------------------------
# lens data from beta


@dataclass
class BetaLens:
    """Scattering samples reconstructed from beta gradients."""

    i: np.ndarray
    j: np.ndarray
    xy: np.ndarray
    theta: np.ndarray  # chart angle of the inward velocity at x
    xy_out: np.ndarray
    theta_out: np.ndarray  # chart angle of the arriving velocity at x'
    t_plus: np.ndarray
    skipped: dict


def _frame(d, comp, s):
    tx = np.empty(len(s))
    ty = np.empty(len(s))
    for k in np.unique(comp):
        sel = comp == k
        tx[sel], ty[sel] = d.components[k].tangent(s[sel])
    return tx, ty


def lens_from_beta(m, d, table: BetaTable, tri_tol=1e-7) -> BetaLens:
    """v = -grad_x beta + sqrt(1 - |grad_x beta|^2) nu, v' = grad_x' beta - sqrt(...) nu'."""
    n = len(table)
    B = table.beta
    tx, ty = _frame(d, table.comp, table.s)
    nx, ny = d.inward_normal(table.xy[:, 0], table.xy[:, 1])
    strict = np.zeros((n, n), bool)
    for i in range(n):
        gap = B[i][:, None] + B - B[i][None, :]  # beta(i,k) + beta(k,j) - beta(i,j), indexed [k, j]
        gap[i, :] = np.inf
        gap[np.arange(n), np.arange(n)] = np.inf
        strict[i] = np.min(gap, axis=0) > tri_tol
    skipped = {
        "not_smooth": int(np.sum(~table.smooth & ~np.eye(n, dtype=bool))),
        "gradient_exceeds_one": int(np.sum(table.smooth & ((np.abs(table.grad_a) > 1) | (np.abs(table.grad_b) > 1)))),
        "triangle_not_strict": int(np.sum(table.smooth & ~strict)),
    }
    ok = table.smooth & strict & (np.abs(table.grad_a) < 1) & (np.abs(table.grad_b) < 1)
    i, j = np.nonzero(ok)
    ga, gb = table.grad_a[i, j], table.grad_b[i, j]
    ca, cb = np.sqrt(1 - ga * ga), np.sqrt(1 - gb * gb)
    vx = -ga * tx[i] + ca * nx[i]
    vy = -ga * ty[i] + ca * ny[i]
    wx = gb * tx[j] - cb * nx[j]
    wy = gb * ty[j] - cb * ny[j]
    return BetaLens(i, j, table.xy[i], np.mod(np.arctan2(vy, vx), 2 * np.pi), table.xy[j],
                    np.mod(np.arctan2(wy, wx), 2 * np.pi), B[i, j], skipped)


def compare_with_flow(m, d, table: BetaTable, rec: BetaLens, *, solver=F.SolverConfig(ode_tol=1e-11),
                      diameter=2.0, newton_iter=12):
    """Residuals of reconstructed samples against traced lens data.

    The true initial direction joining x to x' is found by shooting (Newton on
    the exit arclength), starting from the reconstructed direction.  Returns a
    dict of per-sample angle residuals (initial and final directions, radians)
    and exit time residuals.
    """
    t_budget = 100 * diameter
    comp_j = table.comp[rec.j]
    s_j = table.s[rec.j]
    L = np.array([c.length for c in d.components])[comp_j]
    x0, y0 = rec.xy[:, 0], rec.xy[:, 1]

    def shoot(theta):
        r = F.trace_batch(m, d, x0, y0, theta, t_budget, solver=solver, diameter=diameter)
        ex = r.z_end
        c, s = d.locate(ex[:, 0], ex[:, 1])
        ds = s - s_j
        ds = ds - L * np.round(ds / L)
        ds = np.where((c == comp_j) & (r.status == F.EXITED), ds, np.nan)
        return ds, r

    theta = rec.theta.copy()
    h = 1e-6
    for _ in range(newton_iter):
        f0, _ = shoot(theta)
        f1, _ = shoot(theta + h)
        step = -f0 * h / (f1 - f0)
        step = np.clip(np.nan_to_num(step), -0.05, 0.05)
        theta = theta + step
        if np.all(np.abs(step) < 1e-13):
            break
    f0, r = shoot(theta)
    ok = np.isfinite(f0) & (np.abs(f0) < 1e-8)
    ang_in = np.abs(_wrap(rec.theta - theta))
    ang_out = np.abs(_wrap(rec.theta_out - r.z_end[:, 2]))
    dt = np.abs(r.t_end - rec.t_plus)
    # residual of the reconstructed direction traced as is
    r_rec = F.trace_batch(m, d, x0, y0, rec.theta, t_budget, solver=solver, diameter=diameter)
    dt_rec = np.abs(r_rec.t_end - rec.t_plus)
    return {"converged": ok, "angle_in": ang_in, "angle_out": ang_out, "time": dt, "time_traced": dt_rec}


# ---------------------------------------------------------------------------
# minimizers


def minimizer_is_geodesic_check(m, d, fan, *, graph: GridGraph | None = None, grid_n=600, n_seg=64,
                                solver=F.SolverConfig(), diameter=2.0, tol=1e-3):
    """Compare fan geodesic lengths with beta between their endpoints.

    ``fan`` is an (n, 3) array of boundary phase points (x, y, theta).  Fan
    geodesics that exit transversally without touching the boundary are
    checked; a violation is a geodesic longer than beta by more than ``tol``.
    """
    fan = np.atleast_2d(np.asarray(fan, float))
    graph = graph or GridGraph(m, d, grid_n)
    r = F.trace_batch(m, d, fan[:, 0], fan[:, 1], fan[:, 2], 100 * diameter, solver=solver, diameter=diameter)
    use = (r.status == F.EXITED) & (r.exit_kind == F.TRANSVERSAL) & (r.n_touch == 0) & (r.t_end > 0)
    beta = np.full(len(fan), np.nan)
    for k in np.nonzero(use)[0]:
        beta[k] = beta_many(m, d, fan[k, :2], r.z_end[k, :2], graph=graph, n_seg=n_seg)[0]
    excess = r.t_end - beta
    viol = np.nonzero(use & (excess > tol))[0]
    return {
        "n_checked": int(use.sum()),
        "violations": [(int(k), float(r.t_end[k]), float(beta[k])) for k in viol],
        "max_excess": float(np.nanmax(np.where(use, excess, np.nan))) if use.any() else 0.0,
        "min_excess": float(np.nanmin(np.where(use, excess, np.nan))) if use.any() else 0.0,
        "tau": r.t_end,
        "beta": beta,
    }


def fan_from_boundary(d, comp, s, n_angle, margin=0.05):
    """Boundary fan of inward directions at one boundary point, avoiding glancing."""
    x, y = d.components[comp].point(np.float64(s))
    alpha = np.linspace(-np.pi / 2 + margin, np.pi / 2 - margin, n_angle)
    nx, ny = d.inward_normal(x, y)
    th = np.mod(np.arctan2(ny, nx) + alpha, 2 * np.pi)
    return np.stack([np.full(n_angle, x), np.full(n_angle, y), th], axis=1)


__all__ = [
    "GridGraph", "DistanceError", "BetaTable", "BetaLens", "ArcLength",
    "boundary_distance", "beta_many", "build_beta_table", "boundary_metric_from_beta",
    "lens_from_beta", "compare_with_flow", "minimizer_is_geodesic_check", "fan_from_boundary",
    "shorten_paths", "path_length",
]
