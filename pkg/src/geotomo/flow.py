"""Geodesic flow: adaptive integration, exit and hitting times, Jacobi fields.

The core routine :func:`trace_batch` advances many phase points at once with a
Dormand-Prince 5(4) pair (one step size per ray) and locates boundary events
on each accepted step:

* a sign change of ``rho`` is an exit, unless the crossing is so shallow that
  the trajectory turns back within ``touch_tol`` (then it is a touch);
* a local minimum of ``rho`` with ``|rho_min| <= touch_tol`` is a glancing
  touch, which never terminates the exit time but is the first contact for
  the hitting time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metric import ConformalMetric, Domain, curvature, normalized_x_rho

# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

RUNNING, EXITED, BUDGET, FAILED, DEGENERATE = 0, 1, 2, 3, 4
STATUS_NAMES = {RUNNING: "running", EXITED: "exited", BUDGET: "trapped_budget",
                FAILED: "failed", DEGENERATE: "degenerate"}
NO_CONTACT, TOUCH, EXIT = 0, 1, 2
TRANSVERSAL, GLANCING = 0, 1


class IntegrationError(RuntimeError):
    """Step-size underflow near a degenerate contact."""


@dataclass(frozen=True)
class SolverConfig:
    ode_tol: float = 1e-9
    boundary_tol: float = 1e-10
    glancing_eps: float = 1e-7
    touch_tol: float = 1e-8
    degenerate_eps: float = 1e-6
    max_step: float | None = None
    t_budget_factor: float = 100.0
    min_step: float = 1e-12

    def step_cap(self, diameter):
        return self.max_step if self.max_step else diameter / 32.0


@dataclass(frozen=True)
class UnitTangent:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(np.mod(self.theta, 2 * np.pi)))

    def reverse(self):
        return UnitTangent(self.x, self.y, self.theta + np.pi)


@dataclass
class GeodesicPath:
    times: np.ndarray
    states: np.ndarray  # (n, 3) x, y, theta
    boundary_events: list
    terminal: str

    @property
    def samples(self):
        return [(float(t), UnitTangent(*z)) for t, z in zip(self.times, self.states)]


@dataclass(frozen=True)
class ExitResult:
    status: str
    tau_plus: float | None
    exit_point: UnitTangent | None
    exit_kind: str | None
    touches: int = 0


@dataclass
class TraceBatch:
    status: np.ndarray
    t_end: np.ndarray
    z_end: np.ndarray  # (n, 3 + n_extra)
    exit_kind: np.ndarray
    contact_t: np.ndarray
    contact_z: np.ndarray  # (n, 3)
    contact_kind: np.ndarray
    n_touch: np.ndarray
    degenerate: np.ndarray
    watch_t: np.ndarray | None = None
    paths: list | None = None
    events: list | None = None

    @property
    def extras(self):
        return self.z_end[:, 3:]


# ---------------------------------------------------------------------------
# vectorized pieces


def _rhs(m, Z, extra_rhs):
    x, y, th = Z[:, 0], Z[:, 1], Z[:, 2]
    e = np.exp(-m.lam(x, y))
    lx, ly = m.grad_lam(x, y)
    c, s = np.cos(th), np.sin(th)
    out = np.empty_like(Z)
    out[:, 0] = e * c
    out[:, 1] = e * s
    out[:, 2] = e * (ly * c - lx * s)
    if extra_rhs is not None:
        out[:, 3:] = extra_rhs(x, y, th, Z[:, 3:])
    return out


def _stages(m, Z, k1, h, extra_rhs):
    K = [k1]
    hh = h[:, None]
    for i in range(1, 7):
        acc = Z.copy()
        for j, a in enumerate(_A[i]):
            if a != 0.0:
                acc += hh * a * K[j]
        K.append(_rhs(m, acc, extra_rhs))
    return K


def _dp_step(m, Z, k1, h, extra_rhs, tol):
    K = _stages(m, Z, k1, h, extra_rhs)
    hh = h[:, None]
    Z1 = Z + hh * sum(b * k for b, k in zip(_B, K) if b != 0.0)
    err = hh * sum(e * k for e, k in zip(_E, K) if e != 0.0)
    scale = tol + tol * np.maximum(np.abs(Z), np.abs(Z1))
    en = np.max(np.abs(err) / scale, axis=1)
    return Z1, en, K[6]


def _substep(m, Z, k1, s, extra_rhs):
    """Fifth-order state after a sub-step of size s (< accepted step) from Z."""
    K = _stages(m, Z, k1, s, extra_rhs)
    return Z + s[:, None] * sum(b * k for b, k in zip(_B, K) if b != 0.0)


def _x_rho(m, d, Z):
    x, y, th = Z[:, 0], Z[:, 1], Z[:, 2]
    gx, gy = d.grad_rho(x, y)
    return np.exp(-m.lam(x, y)) * (gx * np.cos(th) + gy * np.sin(th))


def second_x_rho(m, d, x, y, th):
    """Second derivative of rho along the flow."""
    e = np.exp(-m.lam(x, y))
    lx, ly = m.grad_lam(x, y)
    gx, gy = d.grad_rho(x, y)
    rxx, rxy, ryy = d.hess_rho(x, y)
    c, s = np.cos(th), np.sin(th)
    xd, yd = e * c, e * s
    thd = e * (ly * c - lx * s)
    return e * (-(lx * xd + ly * yd) * (gx * c + gy * s)
                + (rxx * xd + rxy * yd) * c + (rxy * xd + ryy * yd) * s
                + (-gx * s + gy * c) * thd)


def _g_normalizer(m, d, x, y):
    gx, gy = d.grad_rho(x, y)
    return np.exp(-m.lam(x, y)) * np.hypot(gx, gy)


def _illinois(fun, lo, hi, flo, fhi, ftol, xtol, maxit=80):
    """Vectorized regula falsi (Illinois variant) for brackets with flo*fhi <= 0."""
    lo, hi, flo, fhi = (np.array(a, dtype=float) for a in (lo, hi, flo, fhi))
    x = 0.5 * (lo + hi)
    fx = np.full_like(lo, np.inf)
    side = np.zeros(lo.shape, dtype=int)
    todo = np.ones(lo.shape, dtype=bool)
    for _ in range(maxit):
        if not todo.any():
            break
        idx = np.nonzero(todo)[0]
        l, hgh, fl, fh = lo[idx], hi[idx], flo[idx], fhi[idx]
        denom = fh - fl
        xn = np.where(denom != 0, (l * fh - hgh * fl) / np.where(denom != 0, denom, 1.0), 0.5 * (l + hgh))
        bad = ~np.isfinite(xn) | (xn <= l) | (xn >= hgh)
        xn = np.where(bad, 0.5 * (l + hgh), xn)
        fn = fun(idx, xn)
        x[idx], fx[idx] = xn, fn
        same_lo = np.sign(fn) == np.sign(fl)
        # move the bracket end that shares the sign
        lo[idx] = np.where(same_lo, xn, l)
        flo[idx] = np.where(same_lo, fn, fl)
        hi[idx] = np.where(same_lo, hgh, xn)
        fhi[idx] = np.where(same_lo, fh, fn)
        sd = side[idx]
        # Illinois halving of the stale end
        fhi[idx] = np.where(same_lo & (sd == 1), fhi[idx] * 0.5, fhi[idx])
        flo[idx] = np.where(~same_lo & (sd == -1), flo[idx] * 0.5, flo[idx])
        side[idx] = np.where(same_lo, 1, -1)
        done = (np.abs(fn) <= ftol) | ((hi[idx] - lo[idx]) <= xtol)
        todo[idx] = ~done
    return x, fx



_NS = 4  # interior samples per step used to screen for boundary events
_FR = np.linspace(0.0, 1.0, _NS + 2)


def _hermite(Z0, K0, Z1, K1, h, fr):
    """Cubic Hermite states at fractions fr of each step: (n, len(fr), dim)."""
    u = fr[None, :, None]
    hh = h[:, None, None]
    h00 = 2 * u ** 3 - 3 * u ** 2 + 1
    h10 = u ** 3 - 2 * u ** 2 + u
    h01 = -2 * u ** 3 + 3 * u ** 2
    h11 = u ** 3 - u ** 2
    return h00 * Z0[:, None] + h10 * hh * K0[:, None] + h01 * Z1[:, None] + h11 * hh * K1[:, None]


def _screen_step(m, d, solver, extra_rhs, Z0, K0, Z1, K1, h, r0, x0, early,
                 pending, pend_t, pend_z, ia, t0):
    """First boundary event inside each accepted step.

    Returns (kind, s, z) with kind in {NO_CONTACT, TOUCH, EXIT} and s the
    offset from the step start.  ``pending`` marks shallow crossings waiting
    for their minimum; it is updated in place for the rows ``ia``.
    """
    btol, ttol, eps_g = solver.boundary_tol, solver.touch_tol, solver.glancing_eps
    n, dim = Z0.shape
    S = _FR[None, :] * h[:, None]
    Zs = _hermite(Z0, K0, Z1, K1, h, _FR)
    Zs[:, -1] = Z1
    flat = Zs.reshape(-1, dim)
    R = d.rho(flat[:, 0], flat[:, 1]).reshape(n, -1)
    XR = _x_rho(m, d, flat).reshape(n, -1)
    R[:, 0], XR[:, 0] = r0, x0
    # right after a touch or a glancing start rho rises; ignore the spurious minimum
    XR[early, 0] = np.maximum(XR[early, 0], 0.0)

    kind = np.full(n, NO_CONTACT)
    s_ev = np.zeros(n)
    z_ev = np.zeros((n, dim))
    undecided = np.ones(n, dtype=bool)
    # rows whose event state still lacks the extras (filled in once at the end)
    need_full = np.zeros(n, dtype=bool)

    def sub(rows, s):
        return _substep(m, Z0[rows], K0[rows], s, extra_rhs)

    def geo(rows, s):
        # extras never feed back into (x, y, theta): root finding skips them
        return _substep(m, Z0[rows, :3], K0[rows, :3], s, None)

    def rho_fun(rows):
        def f(j, s):
            z = geo(rows[j], s)
            return d.rho(z[:, 0], z[:, 1])
        return f

    def xr_fun(rows):
        def f(j, s):
            return _x_rho(m, d, geo(rows[j], s))
        return f

    def locate_min(rows, lo, flo, hi, fhi):
        sm, _ = _illinois(xr_fun(rows), lo, hi, flo, fhi, 0.0, 1e-12 * max(1.0, float(h.max())))
        zm = geo(rows, sm)
        return sm, zm, d.rho(zm[:, 0], zm[:, 1])

    def resolve_pending(rows, lo, flo, hi, fhi):
        sm, zm, rm = locate_min(rows, lo, flo, hi, fhi)
        ok = rm >= -ttol
        kind[rows] = np.where(ok, TOUCH, EXIT)
        g = ia[rows]
        tp = pend_t[g] - t0[rows]
        s_ev[rows] = np.where(ok, sm, tp)
        z_ev[rows] = pend_z[g]
        z_ev[rows[ok], :3] = zm[ok]
        need_full[rows] = ok
        pending[g] = False
        undecided[rows] = False

    def crossing(rows, lo, flo, hi, fhi):
        sc, _ = _illinois(rho_fun(rows), lo, hi, np.maximum(flo, 0.0), fhi, 0.5 * btol, 1e-15)
        zc = geo(rows, sc)
        gn = _g_normalizer(m, d, zc[:, 0], zc[:, 1])
        a = _x_rho(m, d, zc)
        b = second_x_rho(m, d, zc[:, 0], zc[:, 1], zc[:, 2])
        # a crossing shallower than touch_tol is a grazing contact
        shallow = (b > 0) & (a * a <= 2.0 * b * ttol) & (np.abs(a) <= eps_g * 1e3 * gn)
        ex = rows[~shallow]
        kind[ex] = EXIT
        s_ev[ex] = sc[~shallow]
        z_ev[ex, :3] = zc[~shallow]
        need_full[ex] = True
        undecided[ex] = False
        sh = rows[shallow]
        if sh.size:
            g = ia[sh]
            pending[g] = True
            pend_t[g] = t0[sh] + sc[shallow]
            pend_z[g] = sub(sh, sc[shallow])
        return sh, sc[shallow], a[shallow]

    for k in range(1, _NS + 2):
        lo, hi = S[:, k - 1], S[:, k]
        pend = pending[ia]
        # pending shallow crossings: wait for the minimum
        P = np.nonzero(undecided & pend)[0]
        if P.size:
            turn = (XR[P, k - 1] < 0) & (XR[P, k] >= 0)
            if turn.any():
                rows = P[turn]
                resolve_pending(rows, lo[rows], XR[rows, k - 1], hi[rows], XR[rows, k])
            gone = P[~turn & (R[P, k] < -ttol)]
            if gone.size:
                g = ia[gone]
                kind[gone] = EXIT
                s_ev[gone] = pend_t[g] - t0[gone]
                z_ev[gone] = pend_z[g]
                pending[g] = False
                undecided[gone] = False
        N = undecided & ~pend
        cross = N & (R[:, k] < -btol)
        mins = N & ~cross & (XR[:, k - 1] < 0) & (XR[:, k] > 0)
        c_lo, c_flo = lo.copy(), R[:, k - 1].copy()
        c_hi, c_fhi = hi.copy(), R[:, k].copy()
        if mins.any():
            rows = np.nonzero(mins)[0]
            sm, zm, rm = locate_min(rows, lo[rows], XR[rows, k - 1], hi[rows], XR[rows, k])
            touch = np.abs(rm) <= ttol
            tr = rows[touch]
            kind[tr] = TOUCH
            s_ev[tr] = sm[touch]
            z_ev[tr, :3] = zm[touch]
            need_full[tr] = True
            undecided[tr] = False
            deep = rm < -ttol
            dr = rows[deep]
            cross[dr] = True
            c_hi[dr], c_fhi[dr] = sm[deep], rm[deep]
        if cross.any():
            rows = np.nonzero(cross)[0]
            gn0 = _g_normalizer(m, d, Z0[rows, 0], Z0[rows, 1])
            flo = c_flo[rows]
            clo = c_lo[rows]
            if k == 1:
                # already leaving at the step start
                leaving = (R[rows, 0] <= 0) & (XR[rows, 0] < -eps_g * gn0)
                lr = rows[leaving]
                kind[lr] = EXIT
                s_ev[lr] = 0.0
                z_ev[lr] = Z0[lr]
                undecided[lr] = False
                # a step starting on the boundary: bracket from the interior maximum
                rise = ~leaving & (np.abs(R[rows, 0]) <= ttol) & (XR[rows, 0] >= -eps_g * gn0) \
                    & (_x_rho(m, d, geo(rows, c_hi[rows])) < 0)
                if rise.any():
                    ri = rows[rise]
                    lx = np.where(XR[ri, 0] > eps_g * gn0[rise], 0.0, np.minimum(1e-7, 0.5 * c_hi[ri]))
                    fx = np.where(lx > 0, xr_fun(ri)(np.arange(ri.size), lx), XR[ri, 0])
                    fxe = _x_rho(m, d, geo(ri, c_hi[ri]))
                    smx, _ = _illinois(xr_fun(ri), lx, c_hi[ri], np.maximum(fx, 1e-300), fxe, 0.0, 1e-14)
                    zmx = geo(ri, smx)
                    clo[rise] = smx
                    flo[rise] = d.rho(zmx[:, 0], zmx[:, 1])
                keep = ~leaving
                rows, clo, flo = rows[keep], clo[keep], flo[keep]
            if rows.size:
                sh, sc, a = crossing(rows, clo, flo, c_hi[rows], c_fhi[rows])
                # the minimum of a shallow crossing may lie in the same interval
                if sh.size:
                    same = XR[sh, k] >= 0
                    if same.any():
                        rr = sh[same]
                        resolve_pending(rr, sc[same], a[same], hi[rr], XR[rr, k])
        if not undecided.any():
            break
    rows = np.nonzero(need_full)[0]
    if rows.size:
        z_ev[rows] = sub(rows, s_ev[rows])
    return kind, s_ev, z_ev


# ---------------------------------------------------------------------------
# batched tracing


def trace_batch(m: ConformalMetric, d: Domain, x, y, theta, t_max, *,
                solver: SolverConfig = SolverConfig(), diameter=2.0, mode="exit",
                extra_rhs=None, n_extra=0, extra0=None, watch=None, record=False):
    """Trace geodesics from many phase points at once.

    mode "exit" stops when the trajectory leaves the closed domain; mode
    "hit" stops at the first boundary contact at positive time (touch or
    exit); mode "free" ignores the boundary entirely.  ``extra_rhs(x, y,
    theta, extras)`` augments the state with ``n_extra`` integrated
    quantities (path integrals, Jacobi fields).  ``watch`` is the index of an
    extra component whose first sign change time is reported.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    n = x.size
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), (n,)).copy()
    m.check_chart(x, y)
    tol = solver.ode_tol
    btol, ttol, eps_g = solver.boundary_tol, solver.touch_tol, solver.glancing_eps
    hmax = solver.step_cap(diameter)
    dim = 3 + n_extra

    Z = np.zeros((n, dim))
    Z[:, 0], Z[:, 1], Z[:, 2] = x, y, theta
    if n_extra:
        Z[:, 3:] = 0.0 if extra0 is None else extra0
    t = np.zeros(n)
    status = np.full(n, RUNNING)
    t_end = np.zeros(n)
    z_end = Z.copy()
    exit_kind = np.full(n, -1)
    contact_t = np.full(n, np.nan)
    contact_z = np.full((n, 3), np.nan)
    contact_kind = np.full(n, NO_CONTACT)
    n_touch = np.zeros(n, dtype=int)
    degenerate = np.zeros(n, dtype=bool)
    watch_t = np.full(n, np.nan) if watch is not None else None
    pending = np.zeros(n, dtype=bool)
    pend_t = np.zeros(n)
    pend_z = np.zeros((n, dim))
    skip_until = np.zeros(n)
    paths = [[(0.0, Z[i, :3].copy())] for i in range(n)] if record else None
    events = [[] for _ in range(n)] if record else None

    def finish(idx, st, tt, zz):
        status[idx] = st
        t_end[idx] = tt
        z_end[idx] = zz

    def contact(idx, tt, zz, kind):
        first = contact_kind[idx] == NO_CONTACT
        i2 = idx[first]
        contact_t[i2] = tt[first]
        contact_z[i2] = zz[first, :3]
        contact_kind[i2] = kind

    # phase points starting on the boundary
    if mode != "free":
        rho0 = d.rho(x, y)
        if np.any(rho0 < -ttol):
            raise ValueError("start point outside the closed domain (min rho %.3e)" % rho0.min())
        on = np.abs(rho0) <= ttol
        if on.any():
            cn = normalized_x_rho(d, x, y, theta)
            out = on & (cn < -eps_g)
            gl = on & (np.abs(cn) <= eps_g)
            idx = np.nonzero(out)[0]
            finish(idx, EXITED, 0.0, Z[idx])
            exit_kind[idx] = TRANSVERSAL
            contact(idx, np.zeros(idx.size), Z[idx], EXIT)
            if gl.any():
                gi = np.nonzero(gl)[0]
                b = second_x_rho(m, d, x[gi], y[gi], theta[gi]) / _g_normalizer(m, d, x[gi], y[gi])
                leave = b < -solver.degenerate_eps
                flat = np.abs(b) <= solver.degenerate_eps
                li = gi[leave]
                finish(li, EXITED, 0.0, Z[li])
                exit_kind[li] = GLANCING
                contact(li, np.zeros(li.size), Z[li], EXIT)
                fi = gi[flat]
                finish(fi, DEGENERATE, 0.0, Z[fi])
                degenerate[fi] = True
                skip_until[gi[~leave & ~flat]] = 1e-7
            if record:
                for i in np.nonzero(on & (cn > eps_g))[0]:
                    events[i].append((0.0, "transversal_entry"))
                for i in np.nonzero(status == EXITED)[0]:
                    events[i].append((0.0, "transversal_exit" if exit_kind[i] == TRANSVERSAL else "glancing_exit"))
    zero_budget = (status == RUNNING) & (t_max <= 0)
    finish(np.nonzero(zero_budget)[0], BUDGET, 0.0, Z[zero_budget])

    act = np.nonzero(status == RUNNING)[0]
    h = np.full(n, min(hmax, 0.05 * diameter))
    if mode != "free":
        # incoming boundary starts: first step stops near the parabolic apex of rho
        on = (status == RUNNING) & (np.abs(d.rho(x, y)) <= ttol)
        if on.any():
            oi = np.nonzero(on)[0]
            a = _x_rho(m, d, Z[oi])
            b = second_x_rho(m, d, x[oi], y[oi], theta[oi])
            apex = np.where((a > 0) & (b < 0), -a / np.where(b < 0, b, -1.0), np.inf)
            h[oi] = np.maximum(np.minimum(h[oi], apex), 1e-6)
    k1 = np.zeros((n, dim))
    if act.size:
        k1[act] = _rhs(m, Z[act], extra_rhs)
    rho_prev = d.rho(x, y) if mode != "free" else np.zeros(n)
    xr_prev = _x_rho(m, d, Z) if mode != "free" else np.zeros(n)

    while act.size:
        Za, ka, ta = Z[act], k1[act], t[act]
        hs = np.minimum(np.minimum(h[act], hmax), t_max[act] - ta)
        Z1, en, k7 = _dp_step(m, Za, ka, hs, extra_rhs, tol)
        ok = en <= 1.0
        fac = np.clip(0.9 * np.where(en > 0, en, 1e-10) ** -0.2, 0.2, 5.0)
        h[act] = np.where(ok, hs * fac, hs * np.minimum(fac, 0.9))
        tiny = (~ok) & (h[act] < solver.min_step)
        if tiny.any():
            fi = act[tiny]
            finish(fi, FAILED, ta[tiny], Za[tiny])
        sel = np.nonzero(ok)[0]
        if sel.size == 0:
            act = np.nonzero(status == RUNNING)[0]
            continue
        ia = act[sel]
        Z0, K0, t0, hh = Za[sel], ka[sel], ta[sel], hs[sel]
        Z1, k7 = Z1[sel], k7[sel]
        t1 = t0 + hh
        stop = np.zeros(ia.size, dtype=bool)

        if watch is not None:
            w0, w1 = Z0[:, 3 + watch], Z1[:, 3 + watch]
            flip = np.isnan(watch_t[ia]) & (w0 * w1 < 0) & (t0 > 0)
            if flip.any():
                fidx = np.nonzero(flip)[0]

                def wfun(j, s, fidx=fidx):
                    jj = fidx[j]
                    return _substep(m, Z0[jj], K0[jj], s, extra_rhs)[:, 3 + watch]

                sw, _ = _illinois(wfun, np.zeros(fidx.size), hh[fidx], w0[fidx], w1[fidx], 0.0, 1e-10)
                watch_t[ia[fidx]] = t0[fidx] + sw

        if mode != "free":
            ev, ev_s, ev_z = _screen_step(m, d, solver, extra_rhs, Z0, K0, Z1, k7, hh,
                                          rho_prev[ia], xr_prev[ia], t0 < skip_until[ia],
                                          pending, pend_t, pend_z, ia, t0)
            ev_t = t0 + ev_s
            ti = np.nonzero(ev == TOUCH)[0]
            if ti.size:
                gi = ia[ti]
                zt = ev_z[ti]
                bt = second_x_rho(m, d, zt[:, 0], zt[:, 1], zt[:, 2]) / _g_normalizer(m, d, zt[:, 0], zt[:, 1])
                degenerate[gi] |= np.abs(bt) <= solver.degenerate_eps
                n_touch[gi] += 1
                contact(gi, ev_t[ti], zt, TOUCH)
                if record:
                    for j, g in enumerate(gi):
                        events[g].append((ev_t[ti[j]], "glancing_touch"))
                if mode == "hit":
                    finish(gi, EXITED, ev_t[ti], zt)
                    exit_kind[gi] = GLANCING
                    stop[ti] = True
                else:
                    # continue from the touch point
                    t1[ti] = ev_t[ti]
                    Z1[ti] = zt
                    k7[ti] = _rhs(m, zt, extra_rhs)
                    skip_until[gi] = ev_t[ti] + 1e-7
            ei = np.nonzero(ev == EXIT)[0]
            if ei.size:
                gi = ia[ei]
                ze = ev_z[ei]
                cn = normalized_x_rho(d, ze[:, 0], ze[:, 1], ze[:, 2])
                kind = np.where(np.abs(cn) <= eps_g, GLANCING, TRANSVERSAL)
                exit_kind[gi] = kind
                contact(gi, ev_t[ei], ze, EXIT)
                finish(gi, EXITED, ev_t[ei], ze)
                stop[ei] = True
                if record:
                    for j, g in enumerate(gi):
                        paths[g].append((ev_t[ei[j]], ze[j, :3].copy()))
                        events[g].append((ev_t[ei[j]], "transversal_exit" if kind[j] == TRANSVERSAL
                                          else "glancing_exit"))
            rho_prev[ia] = d.rho(Z1[:, 0], Z1[:, 1])
            xr_prev[ia] = _x_rho(m, d, Z1)

        cont = ~stop
        ic = ia[cont]
        Z[ic] = Z1[cont]
        t[ic] = t1[cont]
        k1[ic] = k7[cont]
        if record:
            for j in np.nonzero(cont)[0]:
                paths[ia[j]].append((t1[j], Z1[j, :3].copy()))
        over = cont & (t1 >= t_max[ia] - 1e-13)
        if over.any():
            oi = ia[over]
            finish(oi, BUDGET, t1[over], Z1[over])
        act = np.nonzero(status == RUNNING)[0]

    return TraceBatch(status, t_end, z_end, exit_kind, contact_t, contact_z, contact_kind,
                      n_touch, degenerate, watch_t, paths, events)


# ---------------------------------------------------------------------------
# single-ray API


def _budget(solver, diameter):
    return solver.t_budget_factor * diameter


def integrate_geodesic(m, d, y0: UnitTangent, t_max, tol=None, *, solver=SolverConfig(), diameter=2.0):
    """Integrate one geodesic until it leaves the closed domain or t_max elapses."""
    if tol is not None:
        solver = SolverConfig(**{**solver.__dict__, "ode_tol": tol})
    r = trace_batch(m, d, [y0.x], [y0.y], [y0.theta], t_max, solver=solver,
                    diameter=diameter, mode="exit", record=True)
    if r.status[0] == FAILED:
        raise IntegrationError("step-size underflow at t=%.6g, point %s" % (r.t_end[0], r.z_end[0, :3]))
    pts = r.paths[0]
    times = np.array([p[0] for p in pts])
    states = np.array([p[1] for p in pts])
    # drop duplicate event samples that coincide with a step end
    keep = np.concatenate([[True], np.diff(times) > 0])
    terminal = "exited" if r.status[0] == EXITED else "budget_exhausted"
    return GeodesicPath(times[keep], states[keep], r.events[0], terminal)


def _exit_result(r, i):
    st = r.status[i]
    if st == EXITED:
        z = r.z_end[i]
        return ExitResult("exited", float(r.t_end[i]), UnitTangent(*z[:3]),
                          "glancing" if r.exit_kind[i] == GLANCING else "transversal", int(r.n_touch[i]))
    if st == BUDGET:
        return ExitResult("trapped_budget", None, None, None, int(r.n_touch[i]))
    if st == DEGENERATE:
        return ExitResult("degenerate", None, None, None, 0)
    raise IntegrationError("integration failed at t=%.6g, point %s" % (r.t_end[i], r.z_end[i, :3]))


def exit_time(m, d, y: UnitTangent, t_budget, *, solver=SolverConfig(), diameter=2.0) -> ExitResult:
    """Forward exit time of the closed domain."""
    r = trace_batch(m, d, [y.x], [y.y], [y.theta], t_budget, solver=solver, diameter=diameter)
    return _exit_result(r, 0)


def hitting_time(m, d, y: UnitTangent, t_budget=None, *, solver=SolverConfig(), diameter=2.0):
    """First boundary contact at positive time: (t_plus, hit_point, kind)."""
    if t_budget is None:
        t_budget = _budget(solver, diameter)
    r = trace_batch(m, d, [y.x], [y.y], [y.theta], t_budget, solver=solver, diameter=diameter, mode="hit")
    if r.status[0] == BUDGET:
        raise IntegrationError("trapped within the budget before any boundary contact")
    if r.status[0] == FAILED:
        raise IntegrationError("integration failed at t=%.6g" % r.t_end[0])
    kind = "glancing_touch" if r.contact_kind[0] == TOUCH else (
        "glancing_exit" if r.exit_kind[0] == GLANCING else "transversal_exit")
    return float(r.t_end[0]), UnitTangent(*r.z_end[0, :3]), kind


def is_trapped(m, d, y: UnitTangent, t_budget, *, solver=SolverConfig(), diameter=2.0):
    """("trapped_budget", None) or ("escapes", tau_plus)."""
    res = exit_time(m, d, y, t_budget, solver=solver, diameter=diameter)
    if res.status == "trapped_budget":
        return "trapped_budget", None
    return "escapes", res.tau_plus


def _jacobi_rhs(m):
    def f(x, y, th, ext):
        out = np.empty_like(ext)
        out[:, 0] = ext[:, 1]
        out[:, 1] = -curvature(m, x, y) * ext[:, 0]
        return out
    return f


def _integrate_to_times(m, z0, times, extra_rhs, tol, hmax):
    """Integrate one augmented state, landing exactly on each requested time."""
    z = np.array(z0, dtype=float)[None, :]
    k = _rhs(m, z, extra_rhs)
    out = [z[0].copy()]
    t = times[0]
    h = np.array([min(hmax, 0.01)])
    for target in times[1:]:
        while t < target - 1e-15:
            hs = np.minimum(h, target - t)
            z1, en, k7 = _dp_step(m, z, k, hs, extra_rhs, tol)
            fac = float(np.clip(0.9 * max(en[0], 1e-10) ** -0.2, 0.2, 5.0))
            if en[0] <= 1.0:
                z, k, t = z1, k7, t + hs[0]
                h = hs * fac
            else:
                h = hs * min(fac, 0.9)
                if h[0] < 1e-13:
                    raise IntegrationError("step-size underflow in Jacobi integration")
        t = target
        out.append(z[0].copy())
    return np.array(out)


def jacobi_field(m, path: GeodesicPath, J0=0.0, dJ0=1.0, tol=1e-11):
    """Normal Jacobi field J'' + K J = 0 along a geodesic path, on the path's time grid."""
    z0 = np.concatenate([path.states[0], [J0, dJ0]])
    hmax = float(np.max(np.diff(path.times))) if path.times.size > 1 else 0.05
    zs = _integrate_to_times(m, z0, path.times, _jacobi_rhs(m), tol, hmax)
    return zs[:, 3]


def conjugate_points(m, path: GeodesicPath, tol=1e-11, xtol=1e-9):
    """Times in (0, T] where the Jacobi field with J(0)=0, J'(0)=1 vanishes."""
    z0 = np.concatenate([path.states[0], [0.0, 1.0]])
    times = path.times
    if times.size < 2:
        return []
    hmax = float(np.max(np.diff(times)))
    rhs = _jacobi_rhs(m)
    zs = _integrate_to_times(m, z0, times, rhs, tol, hmax)
    J = zs[:, 3]
    found = []
    for i in range(1, len(times)):
        if J[i - 1] * J[i] < 0:
            a, b = times[i - 1], times[i]
            za, fa = zs[i - 1], J[i - 1]
            while b - a > xtol:
                mid = 0.5 * (a + b)
                zm = _integrate_to_times(m, za, np.array([a, mid]), rhs, tol, hmax)[-1]
                if np.sign(zm[3]) == np.sign(fa):
                    a, za, fa = mid, zm, zm[3]
                else:
                    b = mid
            found.append(0.5 * (a + b))
    return found


def first_conjugate_batch(m, d, x, y, theta, t_max, *, solver=SolverConfig(), diameter=2.0, mode="exit"):
    """First zero of J (J(0)=0, J'(0)=1) along many geodesics; NaN where none."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    ext0 = np.zeros((n, 2))
    ext0[:, 1] = 1.0
    r = trace_batch(m, d, x, y, theta, t_max, solver=solver, diameter=diameter, mode=mode,
                    extra_rhs=_jacobi_rhs(m), n_extra=2, extra0=ext0, watch=0)
    return r.watch_t, r
