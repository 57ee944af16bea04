"""Discrete calculus on the unit tangent bundle of a conformal surface.

Functions are sampled on a uniform (x, y) grid covering the domain bounding
box plus a margin, times a uniform theta grid with a power-of-two count.
Differentiation is spectral in theta and fourth-order central in space.

Sign convention: X_perp is the commutator [X, V], which gives
X_perp = e^{-lam}(sin th d_x - cos th d_y + (lam_x cos th + lam_y sin th) d_th),
[V, X_perp] = X and [X, X_perp] = -K V.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve

from . import flow as F
from .metric import ChartDomainError, ConformalMetric, Domain, curvature, incidence_angle


class ConfigurationError(ValueError):
    """Bad sampling parameters (e.g. a theta count that is not a power of two)."""


class PreconditionError(ValueError):
    """Input violates an operator precondition."""


class SolverError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__("%s (residual %.3e)" % (msg, residual))
        self.residual = residual


_MIN_MARGIN = 4


def _is_pow2(n):
    return n >= 2 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class FiberGrid:
    xs: np.ndarray
    ys: np.ndarray
    n_theta: int
    mask: np.ndarray  # (nx, ny) True where rho > 0
    h: float

    @property
    def thetas(self):
        return 2 * np.pi * np.arange(self.n_theta) / self.n_theta

    @property
    def shape(self):
        return (len(self.xs), len(self.ys), self.n_theta)

    def mesh(self):
        """(X, Y, TH) arrays of shape (nx, ny, n_theta)."""
        return np.meshgrid(self.xs, self.ys, self.thetas, indexing="ij")

    def mesh2(self):
        return np.meshgrid(self.xs, self.ys, indexing="ij")

    def margin(self):
        """Smallest number of cells between the masked set and the array edge."""
        ii, jj = np.nonzero(self.mask)
        nx, ny = self.mask.shape
        return int(min(ii.min(), jj.min(), nx - 1 - ii.max(), ny - 1 - jj.max()))


def make_grid(d: Domain, n=64, n_theta=32, margin_cells=_MIN_MARGIN) -> FiberGrid:
    """Uniform grid with ``n`` cells across the larger bounding-box side."""
    if not _is_pow2(int(n_theta)):
        raise ConfigurationError("n_theta must be a power of 2, got %r" % (n_theta,))
    xmin, xmax, ymin, ymax = d.bbox
    h = max(xmax - xmin, ymax - ymin) / n
    pad = (margin_cells + 0.5) * h
    xs = np.arange(xmin - pad, xmax + pad + 0.5 * h, h)
    ys = np.arange(ymin - pad, ymax + pad + 0.5 * h, h)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    return FiberGrid(xs, ys, int(n_theta), d.rho(X, Y) > 0, h)


@dataclass
class FiberFunction:
    grid: FiberGrid
    values: np.ndarray  # (nx, ny, n_theta), real or complex

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError("values shape %s does not match grid %s" % (self.values.shape, self.grid.shape))

    @classmethod
    def from_function(cls, grid: FiberGrid, f):
        X, Y, TH = grid.mesh()
        return cls(grid, np.asarray(f(X, Y, TH)) * np.ones(grid.shape))

    @property
    def is_real(self):
        return not np.iscomplexobj(self.values)

    def _new(self, values):
        return FiberFunction(self.grid, values)

    def __add__(self, o):
        return self._new(self.values + (o.values if isinstance(o, FiberFunction) else o))

    def __sub__(self, o):
        return self._new(self.values - (o.values if isinstance(o, FiberFunction) else o))

    def __mul__(self, c):
        return self._new(self.values * (c.values if isinstance(c, FiberFunction) else c))

    __rmul__ = __mul__

    def __neg__(self):
        return self._new(-self.values)


def _realify(values, was_real, tol=1e-12):
    """Drop an imaginary part that is round-off only."""
    if was_real and np.iscomplexobj(values):
        scale = max(1.0, float(np.nanmax(np.abs(values))) if values.size else 1.0)
        if np.nanmax(np.abs(values.imag), initial=0.0) <= tol * scale:
            return values.real.copy()
    return values


# ---------------------------------------------------------------------------
# Fourier modes


@dataclass
class FourierModes:
    grid: FiberGrid
    coeffs: np.ndarray  # (nx, ny, n_theta) in numpy FFT order
    real_source: bool = False

    @property
    def ks(self):
        return np.fft.fftfreq(self.grid.n_theta, 1.0 / self.grid.n_theta).astype(int)

    @property
    def k_max(self):
        return self.grid.n_theta // 2 - 1

    def mode(self, k):
        n = self.grid.n_theta
        if abs(k) > n // 2:
            raise KeyError(k)
        return self.coeffs[..., k % n]

    def as_dict(self):
        return {int(k): self.coeffs[..., i] for i, k in enumerate(self.ks) if abs(k) <= self.k_max}


def fourier_decompose(u: FiberFunction) -> FourierModes:
    if not _is_pow2(u.grid.n_theta):
        raise ConfigurationError("theta count must be a power of 2")
    return FourierModes(u.grid, np.fft.fft(u.values, axis=-1) / u.grid.n_theta, u.is_real)


def fourier_resum(modes: FourierModes) -> FiberFunction:
    vals = np.fft.ifft(modes.coeffs * modes.grid.n_theta, axis=-1)
    return FiberFunction(modes.grid, _realify(vals, modes.real_source))


def _mode_multiply(u: FiberFunction, mult):
    """Apply a Fourier multiplier in theta; the Nyquist mode is treated as
    unresolved and annihilated so that real inputs stay real."""
    n = u.grid.n_theta
    mult = np.array(mult, dtype=complex)
    mult[n // 2] = 0.0
    vals = np.fft.ifft(np.fft.fft(u.values, axis=-1) * mult, axis=-1)
    return u._new(_realify(vals, u.is_real))


def zero_mode(u: FiberFunction):
    """The fiber average u_0 as an (nx, ny) field."""
    return u.values.mean(axis=-1)


def hilbert_transform(u: FiberFunction, parity="full") -> FiberFunction:
    """Multiply mode k by -i sign(k); ``parity`` keeps only even or odd k."""
    n = u.grid.n_theta
    k = np.fft.fftfreq(n, 1.0 / n)
    mult = -1j * np.sign(k)
    if parity == "even":
        mult = np.where(k % 2 == 0, mult, 0)
    elif parity == "odd":
        mult = np.where(k % 2 != 0, mult, 0)
    elif parity != "full":
        raise ValueError("parity must be full, even or odd")
    return _mode_multiply(u, mult)


def parity_part(u: FiberFunction, parity):
    n = u.grid.n_theta
    k = np.fft.fftfreq(n, 1.0 / n)
    keep = (k % 2 == 0) if parity == "even" else (k % 2 != 0)
    mult = keep.astype(complex)
    return _mode_multiply(u, mult)


# ---------------------------------------------------------------------------
# vector fields


def _dx4(a, h, axis):
    """Fourth-order central difference; NaN on the two-cell rim."""
    out = np.full(a.shape, np.nan, dtype=np.result_type(a, float))
    sl = [slice(None)] * a.ndim

    def s(lo, hi):
        sl2 = list(sl)
        sl2[axis] = slice(lo, hi if hi != 0 else None)
        return tuple(sl2)

    inner = s(2, -2)
    out[inner] = (a[s(0, -4)] - 8 * a[s(1, -3)] + 8 * a[s(3, -1)] - a[s(4, 0)]) / (12 * h)
    return out


def _check_margin(grid: FiberGrid):
    if grid.margin() < _MIN_MARGIN:
        raise ChartDomainError("fiber grid needs at least %d cells of margin around the domain" % _MIN_MARGIN)


def _fields(m: ConformalMetric, grid: FiberGrid):
    X, Y = grid.mesh2()
    m.check_chart(X, Y)
    lam = m.lam(X, Y) * np.ones(X.shape)
    lx, ly = m.grad_lam(X, Y)
    return (np.exp(-lam)[..., None], (lx * np.ones(X.shape))[..., None], (ly * np.ones(X.shape))[..., None])


def apply_V(u: FiberFunction) -> FiberFunction:
    n = u.grid.n_theta
    return _mode_multiply(u, 1j * np.fft.fftfreq(n, 1.0 / n))


def _grad_parts(u):
    h = u.grid.h
    return _dx4(u.values, h, 0), _dx4(u.values, h, 1), apply_V(u).values


def apply_X(m: ConformalMetric, u: FiberFunction) -> FiberFunction:
    _check_margin(u.grid)
    em, lx, ly = _fields(m, u.grid)
    th = u.grid.thetas
    c, s = np.cos(th), np.sin(th)
    ux, uy, ut = _grad_parts(u)
    return u._new(em * (c * ux + s * uy + (ly * c - lx * s) * ut))


def apply_Xperp(m: ConformalMetric, u: FiberFunction) -> FiberFunction:
    _check_margin(u.grid)
    em, lx, ly = _fields(m, u.grid)
    th = u.grid.thetas
    c, s = np.cos(th), np.sin(th)
    ux, uy, ut = _grad_parts(u)
    return u._new(em * (s * ux - c * uy + (lx * c + ly * s) * ut))


def _xperp_scalar(m, grid, a):
    """X_perp of a theta-independent field a(x, y)."""
    em, _, _ = _fields(m, grid)
    th = grid.thetas
    ax = _dx4(a, grid.h, 0)[..., None]
    ay = _dx4(a, grid.h, 1)[..., None]
    return em * (np.sin(th) * ax - np.cos(th) * ay)


# ---------------------------------------------------------------------------
# norms and residuals


def _interior(grid: FiberGrid, arr):
    """Mask of domain nodes where ``arr`` is finite for every theta."""
    return grid.mask & np.all(np.isfinite(arr), axis=-1)


def _norms(grid, arr, weight=None):
    sel = _interior(grid, arr)
    vals = np.abs(arr[sel])
    if vals.size == 0:
        return 0.0, 0.0
    w = np.ones(vals.shape[0]) if weight is None else weight[sel]
    dv = grid.h * grid.h * 2 * np.pi / grid.n_theta
    return float(vals.max()), float(np.sqrt(np.sum(w[:, None] * vals ** 2) * dv))


@dataclass
class Residual:
    field: FiberFunction
    sup: float
    l2: float


def pestov_uhlmann_residual(m: ConformalMetric, d: Domain, w: FiberFunction) -> Residual:
    """H_od X w - X H_ev w - X_perp w_0 on interior nodes."""
    lhs = hilbert_transform(apply_X(m, w), "odd").values - apply_X(m, hilbert_transform(w, "even")).values
    r = lhs - _xperp_scalar(m, w.grid, zero_mode(w))
    sup, l2 = _norms(w.grid, r)
    return Residual(w._new(r), sup, l2)


def interior_cutoff(d: Domain, x, y, delta):
    """Smooth function equal to 0 where rho <= delta and 1 where rho >= 2 delta."""
    t = (d.rho(x, y) - delta) / delta

    def f(z):
        zc = np.clip(z, 1e-300, None)
        return np.where(z > 0, np.exp(-1.0 / zc), 0.0)

    a, b = f(t), f(1 - t)
    return a / (a + b)


def pestov_identity_residual(m: ConformalMetric, d: Domain, u: FiberFunction, support_tol=1e-14):
    """(|VXu|^2 - |XVu|^2 - |Xu|^2 + (K Vu, Vu)) / (|Xu|^2 + |XVu|^2), Liouville density e^{2 lam}."""
    g = u.grid
    X, Y = g.mesh2()
    scale = float(np.max(np.abs(u.values))) or 1.0
    outside = ~g.mask
    # support must stay off the boundary: zero outside and on nodes next to it
    near = outside.copy()
    for ax in (0, 1):
        for sh in (1, 2, -1, -2):
            near |= np.roll(outside, sh, axis=ax)
    if np.max(np.abs(u.values[near]), initial=0.0) > support_tol * scale:
        raise PreconditionError("u does not vanish near the boundary of SM")
    Xu = apply_X(m, u)
    Vu = apply_V(u)
    VXu = apply_V(Xu)
    XVu = apply_X(m, Vu)
    K = curvature(m, X, Y) * np.ones(X.shape)
    dens = np.exp(2 * m.lam(X, Y)) * np.ones(X.shape)
    dv = g.h * g.h * 2 * np.pi / g.n_theta

    def sq(a):
        a = np.nan_to_num(a)  # the rim lies outside the support
        return float(np.sum(dens[..., None] * np.abs(a) ** 2) * dv)

    kv = float(np.sum((dens * K)[..., None] * np.abs(np.nan_to_num(Vu.values)) ** 2) * dv)
    nx, nxv = sq(Xu.values), sq(XVu.values)
    total = sq(VXu.values) - nxv - nx + kv
    return total / (nx + nxv + 1e-300)


def structure_residuals(m: ConformalMetric, u: FiberFunction):
    """Norms of ([V, X_perp] - X) u and ([X, X_perp] + K V) u.

    Returned as a dict with sup and L2 norms over domain nodes where the
    composed stencils are defined.
    """
    Xu, Pu, Vu = apply_X(m, u), apply_Xperp(m, u), apply_V(u)
    r1 = apply_V(Pu).values - apply_Xperp(m, Vu).values - Xu.values
    X2, Y2 = u.grid.mesh2()
    K = (curvature(m, X2, Y2) * np.ones(X2.shape))[..., None]
    r2 = apply_X(m, Pu).values - apply_Xperp(m, Xu).values + K * Vu.values
    s1, l1 = _norms(u.grid, r1)
    s2, l2 = _norms(u.grid, r2)
    return {"r1_sup": s1, "r1_l2": l1, "r2_sup": s2, "r2_l2": l2}


# ---------------------------------------------------------------------------
# harmonic extension


def _crossing(d, x0, y0, x1, y1, iters=60):
    """Fraction t in (0, 1] where rho vanishes on the segment from an inside point."""
    lo = np.zeros(np.shape(x0))
    hi = np.ones(np.shape(x0))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = d.rho(x0 + mid * (x1 - x0), y0 + mid * (y1 - y0)) > 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


def harmonic_extension(m: ConformalMetric, d: Domain, f_star, grid: FiberGrid, tol=1e-10):
    """Solve the Euclidean Laplace equation on the masked grid with Dirichlet
    data f_star(x, y) at boundary crossings (Shortley-Weller stencil).

    The Laplace equation is conformally invariant in 2D, so the metric does
    not enter.  Returns an (nx, ny) array, NaN outside the domain.
    """
    mask = grid.mask
    h = grid.h
    X, Y = grid.mesh2()
    idx = np.full(mask.shape, -1)
    idx[mask] = np.arange(mask.sum())
    n = int(mask.sum())
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    diag = np.zeros(n)
    I, J = np.nonzero(mask)
    me = idx[I, J]
    # arm lengths and neighbour handling per axis
    arms = {}
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        I2, J2 = I + di, J + dj
        nb_in = mask[I2, J2]
        t = np.ones(n)
        out = ~nb_in
        if out.any():
            t[out] = _crossing(d, X[I[out], J[out]], Y[I[out], J[out]], X[I2[out], J2[out]], Y[I2[out], J2[out]])
        arms[(di, dj)] = (t * h, nb_in, I2, J2)
    for pair in (((1, 0), (-1, 0)), ((0, 1), (0, -1))):
        (hp, inp, Ip, Jp), (hm, inm, Im, Jm) = arms[pair[0]], arms[pair[1]]
        cp = 2.0 / (hp * (hp + hm))
        cm = 2.0 / (hm * (hp + hm))
        diag -= cp + cm
        for c, inside, I2, J2, hh, (di, dj) in ((cp, inp, Ip, Jp, hp, pair[0]), (cm, inm, Im, Jm, hm, pair[1])):
            rows.append(me[inside])
            cols.append(idx[I2[inside], J2[inside]])
            vals.append(c[inside])
            o = ~inside
            if o.any():
                bx = X[I[o], J[o]] + di * hh[o]
                by = Y[I[o], J[o]] + dj * hh[o]
                rhs[me[o]] -= c[o] * np.asarray(f_star(bx, by), float)
    rows.append(me)
    cols.append(me)
    vals.append(diag)
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    sol = spsolve(A, rhs)
    res = float(np.linalg.norm(A @ sol - rhs) / max(np.linalg.norm(rhs), 1e-300))
    if not np.isfinite(res) or res > tol:
        raise SolverError("harmonic extension did not converge", res)
    out = np.full(mask.shape, np.nan)
    out[mask] = sol
    return out


def boundary_samples_function(d: Domain, comp, s, values):
    """Periodic linear interpolation of boundary samples as a function of (x, y)."""
    comp = np.asarray(comp)
    s = np.asarray(s, float)
    values = np.asarray(values, float)

    def f(x, y):
        c, sq = d.locate(x, y)
        out = np.empty(np.shape(sq))
        for k in np.unique(c):
            sel = c == k
            mine = comp == k
            L = d.components[k].length
            out[sel] = np.interp(sq[sel], s[mine], values[mine], period=L)
        return out

    return f


def holomorphic_residual(m: ConformalMetric, d: Domain, w0, f_star, grid: FiberGrid):
    """Cauchy-Riemann defect of a + ib = w0 - i P(f_star), where P is the
    harmonic extension, normalized by the gradient norms of a and b."""
    X, Y = grid.mesh2()
    a = np.asarray(w0(X, Y), float) * np.ones(X.shape) if callable(w0) else np.asarray(w0, float)
    b = -harmonic_extension(m, d, f_star, grid)
    h = grid.h
    # second-order central differences restricted to nodes with all neighbours inside
    inner = grid.mask.copy()
    for ax in (0, 1):
        for sh in (1, -1):
            inner &= np.roll(grid.mask, sh, axis=ax)
    ax_ = (np.roll(a, -1, 0) - np.roll(a, 1, 0)) / (2 * h)
    ay_ = (np.roll(a, -1, 1) - np.roll(a, 1, 1)) / (2 * h)
    bx_ = (np.roll(b, -1, 0) - np.roll(b, 1, 0)) / (2 * h)
    by_ = (np.roll(b, -1, 1) - np.roll(b, 1, 1)) / (2 * h)

    def nrm(f):
        return float(np.sqrt(np.sum(f[inner] ** 2) * h * h))

    cr = nrm(ax_ - by_) + nrm(ay_ + bx_)
    scale = np.sqrt(nrm(ax_) ** 2 + nrm(ay_) ** 2 + nrm(bx_) ** 2 + nrm(by_) ** 2)
    return cr / (scale + 1e-300)


# ---------------------------------------------------------------------------
# probes and transport


def random_probe(grid: FiberGrid, seed, k_max=3, n_terms=4, freq=3.0, cutoff=None):
    """Seeded smooth real probe: sum of plane waves times low theta modes."""
    rng = np.random.default_rng(seed)
    X, Y, TH = grid.mesh()
    vals = np.zeros(grid.shape)
    for k in range(k_max + 1):
        for _ in range(n_terms):
            p, q = rng.uniform(-freq, freq, 2)
            ph, ps = rng.uniform(0, 2 * np.pi, 2)
            amp = rng.normal()
            vals += amp * np.cos(p * X + q * Y + ph) * np.cos(k * TH + ps)
    if cutoff is not None:
        vals = vals * cutoff[..., None]
    return FiberFunction(grid, vals)


def transport_first_integral(m: ConformalMetric, d: Domain, grid: FiberGrid, psi, *,
                             solver=F.SolverConfig(), diameter=2.0):
    """w(x, th) = psi(comp, s, alpha) at the exit point of the forward geodesic.

    Xw = 0 away from the glancing flowouts; nodes whose geodesic does not exit
    transversally are NaN.
    """
    X, Y, TH = grid.mesh()
    sel = np.broadcast_to(grid.mask[..., None], grid.shape)
    x, y, th = X[sel], Y[sel], TH[sel]
    r = F.trace_batch(m, d, x, y, th, 100 * diameter, solver=solver, diameter=diameter)
    z = r.z_end
    comp, s = d.locate(z[:, 0], z[:, 1])
    alpha = incidence_angle(d, z[:, 0], z[:, 1], z[:, 2])
    good = (r.status == F.EXITED) & (r.exit_kind == F.TRANSVERSAL)
    vals = np.where(good, psi(comp, s, alpha), np.nan)
    out = np.full(grid.shape, np.nan)
    out[sel] = vals
    return FiberFunction(grid, out)


# ---------------------------------------------------------------------------
# serialization


def save_fiber(path, u: FiberFunction):
    """Binary layout: one JSON header line, then values (little-endian) and the mask."""
    g = u.grid
    dtype = "<c16" if np.iscomplexobj(u.values) else "<f8"
    header = {
        "format": "geotomo-fiber",
        "version": 1,
        "dtype": dtype,
        "nx": len(g.xs), "ny": len(g.ys), "n_theta": g.n_theta,
        "x0": float(g.xs[0]), "y0": float(g.ys[0]), "h": float(g.h),
        "layout": "C order (x, y, theta), then uint8 mask (x, y)",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(u.values, dtype=dtype).tobytes())
        fh.write(np.ascontiguousarray(g.mask, dtype=np.uint8).tobytes())


def load_fiber(path) -> FiberFunction:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        nx, ny, nt = header["nx"], header["ny"], header["n_theta"]
        vals = np.frombuffer(fh.read(nx * ny * nt * np.dtype(header["dtype"]).itemsize), dtype=header["dtype"])
        mask = np.frombuffer(fh.read(nx * ny), dtype=np.uint8).astype(bool)
    h = header["h"]
    xs = header["x0"] + h * np.arange(nx)
    ys = header["y0"] + h * np.arange(ny)
    grid = FiberGrid(xs, ys, nt, mask.reshape(nx, ny), h)
    return FiberFunction(grid, vals.reshape(nx, ny, nt).astype(vals.dtype.newbyteorder("=")))
