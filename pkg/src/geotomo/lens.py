"""Exit and hitting lens data on the incoming and glancing boundary.

Boundary phase points are stored as ``(component, s, alpha)`` with ``s`` the
chart arclength of the component and ``alpha`` the signed angle from the
inward normal (counterclockwise positive).  Incoming points have
``|alpha| <= pi/2``; outgoing ones have ``|alpha| >= pi/2``.  In CSV output the
exit and hit angles are reported from the outward normal instead, so they lie
in ``[-pi/2, pi/2]`` as well.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import flow as F
from .metric import direction_from_angle, incidence_angle

CLASSES = ("transversal", "glancing_entry", "glancing_exit", "degenerate", "trapped_budget")
TRANSVERSAL, GLANCING_ENTRY, GLANCING_EXIT, DEGENERATE, TRAPPED = range(5)


def _wrap(a):
    return np.mod(np.asarray(a) + np.pi, 2 * np.pi) - np.pi


@dataclass(frozen=True)
class LensRecord:
    entry: F.UnitTangent
    boundary_coord: tuple
    alpha: float
    tau_plus: float | None
    t_plus: float | None
    sigma_exit: F.UnitTangent | None
    s_exit: F.UnitTangent | None
    classification: str
    grid_node: bool = True


class LensTable:
    """Lens data on a tensor grid over (boundary arclength, incidence angle).

    All per-record quantities are numpy arrays of length ``n``.  Grid nodes
    come first; supplementary records (``grid_node == False``) follow and
    carry zero quadrature weight.
    """

    def __init__(self, m, d, *, comp, s, alpha, x, y, theta, weight, grid_node, cls,
                 tau, exit_phase, exit_xyt, t_hit, hit_phase, hit_xyt, hit_touch,
                 n_boundary, n_angle, solver, diameter, t_budget):
        self.m, self.d = m, d
        self.comp, self.s, self.alpha = comp, s, alpha
        self.x, self.y, self.theta = x, y, theta
        self.weight, self.grid_node, self.cls = weight, grid_node, cls
        self.tau, self.exit_phase, self.exit_xyt = tau, exit_phase, exit_xyt
        self.t_hit, self.hit_phase, self.hit_xyt, self.hit_touch = t_hit, hit_phase, hit_xyt, hit_touch
        self.n_boundary, self.n_angle = n_boundary, n_angle
        self.solver, self.diameter, self.t_budget = solver, diameter, t_budget

    def __len__(self):
        return self.comp.size

    @property
    def transversal(self):
        return self.cls == TRANSVERSAL

    def classification(self, i):
        return CLASSES[self.cls[i]]

    def record(self, i) -> LensRecord:
        ok = self.cls[i] not in (DEGENERATE, TRAPPED)
        return LensRecord(
            F.UnitTangent(self.x[i], self.y[i], self.theta[i]),
            (int(self.comp[i]), float(self.s[i])), float(self.alpha[i]),
            float(self.tau[i]) if ok else None,
            float(self.t_hit[i]) if ok else None,
            F.UnitTangent(*self.exit_xyt[i]) if ok else None,
            F.UnitTangent(*self.hit_xyt[i]) if ok else None,
            CLASSES[self.cls[i]], bool(self.grid_node[i]))

    @property
    def records(self):
        return [self.record(i) for i in range(len(self))]

    def trapped_fraction(self):
        w = self.weight
        bad = (self.cls == TRAPPED) | (self.cls == DEGENERATE)
        tot = w.sum()
        return float(w[bad].sum() / tot) if tot > 0 else 0.0

    # serialization -----------------------------------------------------

    def csv_rows(self):
        ea = _wrap(self.exit_phase[:, 2] - np.pi)
        ha = _wrap(self.hit_phase[:, 2] - np.pi)
        for i in range(len(self)):
            ok = self.cls[i] not in (DEGENERATE, TRAPPED)
            f = (lambda v: "%.12g" % v) if ok else (lambda v: "")
            yield [int(self.comp[i]), "%.12g" % self.s[i], "%.12g" % self.alpha[i],
                   f(self.tau[i]), f(self.t_hit[i]), f(self.exit_phase[i, 1]), f(ea[i]),
                   f(self.hit_phase[i, 1]), f(ha[i]), CLASSES[self.cls[i]]]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write("# units: s chart-arclength, alpha radians from inward normal, exit/hit alpha radians "
                     "from outward normal, times g-arclength\n")
            w.writerow(["component", "s", "alpha", "tau_plus", "t_plus", "exit_s", "exit_alpha",
                        "hit_s", "hit_alpha", "classification"])
            w.writerows(self.csv_rows())

    def to_json(self):
        def col(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]
        return {
            "grid": {"n_boundary": self.n_boundary, "n_angle": self.n_angle,
                     "components": [float(c.length) for c in self.d.components],
                     "t_budget": self.t_budget},
            "records": {
                "component": self.comp.tolist(), "s": col(self.s), "alpha": col(self.alpha),
                "weight": col(self.weight), "grid_node": self.grid_node.tolist(),
                "tau_plus": col(self.tau), "t_plus": col(self.t_hit),
                "exit_component": self.exit_phase[:, 0].astype(int).tolist(),
                "exit_s": col(self.exit_phase[:, 1]), "exit_alpha": col(self.exit_phase[:, 2]),
                "hit_component": self.hit_phase[:, 0].astype(int).tolist(),
                "hit_s": col(self.hit_phase[:, 1]), "hit_alpha": col(self.hit_phase[:, 2]),
                "classification": [CLASSES[c] for c in self.cls],
            },
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)


# ---------------------------------------------------------------------------


def boundary_phase(d, x, y, theta):
    """(component, s, alpha) of chart phase points lying on the boundary."""
    comp, s = d.locate(x, y)
    return np.stack([comp.astype(float), s, incidence_angle(d, x, y, theta)], axis=1)


def boundary_grid(d, n_boundary):
    """Boundary samples spread over the components in proportion to chart length."""
    lengths = np.array([c.length for c in d.components])
    counts = np.maximum(8, np.round(n_boundary * lengths / lengths.sum()).astype(int))
    comp, s, ds = [], [], []
    for k, (c, n) in enumerate(zip(d.components, counts)):
        comp.append(np.full(n, k))
        s.append(np.arange(n) * c.length / n)
        ds.append(np.full(n, c.length / n))
    return np.concatenate(comp), np.concatenate(s), np.concatenate(ds)


def angle_grid(n_angle):
    """Trapezoid nodes on [-pi/2, pi/2] including both glancing endpoints."""
    a = np.linspace(-np.pi / 2, np.pi / 2, n_angle)
    w = np.full(n_angle, np.pi / (n_angle - 1))
    w[[0, -1]] *= 0.5
    a[[0, -1]] = [-np.pi / 2, np.pi / 2]
    return a, w


def _trace_records(m, d, x, y, theta, solver, diameter, t_budget):
    r = F.trace_batch(m, d, x, y, theta, t_budget, solver=solver, diameter=diameter)
    ex = r.z_end[:, :3]
    exit_phase = np.full((x.size, 3), np.nan)
    hit_phase = np.full((x.size, 3), np.nan)
    done = r.status == F.EXITED
    if done.any():
        exit_phase[done] = boundary_phase(d, ex[done, 0], ex[done, 1], ex[done, 2])
        hc = r.contact_z[done]
        hit_phase[done] = boundary_phase(d, hc[:, 0], hc[:, 1], hc[:, 2])
    return r, exit_phase, hit_phase


def build_lens_table(m, d, n_boundary=256, n_angle=129, *, solver=F.SolverConfig(), diameter=2.0,
                     t_budget=None, flowout=True) -> LensTable:
    """Trace every grid node of the incoming/glancing boundary and record lens data."""
    if n_boundary < 8 or n_angle < 8:
        raise ValueError("lens table resolutions must be at least 8")
    if t_budget is None:
        t_budget = solver.t_budget_factor * diameter
    bc, bs, bds = boundary_grid(d, n_boundary)
    aa, aw = angle_grid(n_angle)
    comp = np.repeat(bc, n_angle)
    s = np.repeat(bs, n_angle)
    alpha = np.tile(aa, bc.size)
    bx = np.concatenate([np.atleast_1d(d.components[k].point(bs[bc == k])[0]) for k in range(len(d.components))])
    by = np.concatenate([np.atleast_1d(d.components[k].point(bs[bc == k])[1]) for k in range(len(d.components))])
    x, y = np.repeat(bx, n_angle), np.repeat(by, n_angle)
    theta = direction_from_angle(d, x, y, alpha)
    dens = np.exp(m.lam(bx, by))
    weight = (np.repeat(bds * dens, n_angle) * np.tile(aw * np.cos(aa), bc.size))
    glance = np.tile(np.abs(aa) >= np.pi / 2, bc.size)
    weight[glance] = 0.0
    grid_node = np.ones(x.size, dtype=bool)

    if flowout:
        extra = _flowout_starts(m, d, x[glance], y[glance], theta[glance], solver, diameter, t_budget)
        if extra is not None:
            ex_x, ex_y, ex_t = extra
            ph = boundary_phase(d, ex_x, ex_y, ex_t)
            comp = np.concatenate([comp, ph[:, 0].astype(int)])
            s = np.concatenate([s, ph[:, 1]])
            alpha = np.concatenate([alpha, ph[:, 2]])
            x, y, theta = np.concatenate([x, ex_x]), np.concatenate([y, ex_y]), np.concatenate([theta, ex_t])
            weight = np.concatenate([weight, np.zeros(ex_x.size)])
            grid_node = np.concatenate([grid_node, np.zeros(ex_x.size, dtype=bool)])

    r, exit_phase, hit_phase = _trace_records(m, d, x, y, theta, solver, diameter, t_budget)
    cls = np.full(x.size, TRANSVERSAL)
    cls[r.exit_kind == F.GLANCING] = GLANCING_EXIT
    cls[np.abs(alpha) >= np.pi / 2 - 1e-12] = GLANCING_ENTRY
    cls[r.status == F.BUDGET] = TRAPPED
    cls[r.degenerate | (r.status == F.DEGENERATE) | (r.status == F.FAILED)] = DEGENERATE

    keep = np.ones(x.size, dtype=bool)
    if not grid_node.all():
        # supplementary records must actually graze the boundary
        sup = ~grid_node
        keep[sup] = (r.contact_kind[sup] == F.TOUCH) & (r.status[sup] == F.EXITED)
    sel = np.nonzero(keep)[0]
    tau = np.where(r.status == F.EXITED, r.t_end, np.nan)
    t_hit = np.where(r.status == F.EXITED, r.contact_t, np.nan)
    return LensTable(m, d, comp=comp[sel], s=s[sel], alpha=alpha[sel], x=x[sel], y=y[sel], theta=theta[sel],
                     weight=weight[sel], grid_node=grid_node[sel], cls=cls[sel], tau=tau[sel],
                     exit_phase=exit_phase[sel], exit_xyt=r.z_end[sel, :3], t_hit=t_hit[sel],
                     hit_phase=hit_phase[sel], hit_xyt=r.contact_z[sel],
                     hit_touch=(r.contact_kind[sel] == F.TOUCH),
                     n_boundary=n_boundary, n_angle=n_angle, solver=solver, diameter=diameter, t_budget=t_budget)


def _flowout_starts(m, d, x, y, theta, solver, diameter, t_budget):
    """Incoming boundary points whose geodesic grazes a concave glancing node.

    Each concave glancing node is traced backwards to the boundary; the
    reversed exit point is an incoming start on the flowout of that node.
    """
    if x.size == 0:
        return None
    b = F.second_x_rho(m, d, x, y, theta)
    conc = b > solver.degenerate_eps
    if not conc.any():
        return None
    tight = F.SolverConfig(**{**solver.__dict__, "ode_tol": min(solver.ode_tol, 1e-12)})
    r = F.trace_batch(m, d, x[conc], y[conc], theta[conc] + np.pi, t_budget, solver=tight,
                      diameter=diameter)
    ok = (r.status == F.EXITED) & (r.exit_kind == F.TRANSVERSAL) & (r.n_touch == 0) & (r.t_end > 1e-6)
    if not ok.any():
        return None
    z = r.z_end[ok]
    return z[:, 0], z[:, 1], np.mod(z[:, 2] + np.pi, 2 * np.pi)


# ---------------------------------------------------------------------------
# conversions


def _embed(d, phase):
    """Embed boundary phase points in R^5 so that chord distance ~ (s, alpha) distance."""
    lengths = np.array([c.length for c in d.components])
    comp = phase[:, 0].astype(int)
    L = lengths[comp]
    ang = 2 * np.pi * phase[:, 1] / L
    R = L / (2 * np.pi)
    return np.stack([1e3 * comp, R * np.cos(ang), R * np.sin(ang),
                     np.cos(phase[:, 2]), np.sin(phase[:, 2])], axis=1)


@dataclass
class HittingData:
    t_plus: np.ndarray
    hit_phase: np.ndarray  # (n, 3)
    next_index: np.ndarray  # record index continuing the chain, or -1 for a final exit
    degenerate: np.ndarray


@dataclass
class ExitData:
    tau_plus: np.ndarray
    exit_phase: np.ndarray
    chain_length: np.ndarray
    degenerate: np.ndarray


def _usable(table):
    return (table.cls != DEGENERATE) & (table.cls != TRAPPED)


def exit_to_hitting(table: LensTable, delta_match=1e-4) -> HittingData:
    """Recover first-contact data from exit data through the exit fibres.

    For each record y, the candidates are records z whose exit point lies
    within ``delta_match`` of the exit point of y and with a strictly shorter
    exit time; the one with the largest exit time is the first contact.
    """
    n = len(table)
    use = _usable(table)
    idx = np.nonzero(use)[0]
    tau = table.tau
    t_plus = np.where(use, tau, np.nan)
    hit = table.exit_phase.copy()
    nxt = np.full(n, -1)
    degen = ~use
    if idx.size == 0:
        return HittingData(t_plus, hit, nxt, degen)
    emb = _embed(table.d, table.exit_phase[idx])
    tree = cKDTree(emb)
    pairs = tree.query_ball_point(emb, delta_match)
    for a, cand in enumerate(pairs):
        i = idx[a]
        if tau[i] <= 0 or len(cand) < 2:
            continue
        c = idx[np.asarray(cand)]
        c = c[tau[c] < tau[i] - delta_match]
        if c.size == 0:
            continue
        best = c[np.argmax(tau[c])]
        near = c[tau[c] >= tau[best] - delta_match]
        if near.size > 1:
            degen[i] = True
            continue
        t_plus[i] = tau[i] - tau[best]
        hit[i] = np.array([table.comp[best], table.s[best], table.alpha[best]])
        nxt[i] = best if tau[best] > 0 else -1
        if nxt[i] < 0:
            t_plus[i] = tau[i]
            hit[i] = table.exit_phase[i]
    return HittingData(t_plus, hit, nxt, degen)


def direct_hitting(table: LensTable, delta_match=1e-4) -> HittingData:
    """Hitting data straight from the traced first contacts.

    The chain continues at a touch point when that phase point is itself a
    record of the table.
    """
    n = len(table)
    use = _usable(table)
    nxt = np.full(n, -1)
    degen = ~use
    touch = use & table.hit_touch
    if touch.any():
        entries = np.stack([table.comp, table.s, table.alpha], axis=1).astype(float)
        tree = cKDTree(_embed(table.d, entries))
        ti = np.nonzero(touch)[0]
        dist, j = tree.query(_embed(table.d, table.hit_phase[ti]))
        found = dist <= delta_match
        nxt[ti[found]] = j[found]
        degen[ti[~found]] = True
    return HittingData(np.where(use, table.t_hit, np.nan), table.hit_phase.copy(), nxt, degen)


def hitting_to_exit(table: LensTable, hitting: HittingData, cap=64) -> ExitData:
    """Chain first contacts until a final exit, summing the segment times."""
    n = len(table)
    tau = np.full(n, np.nan)
    phase = np.full((n, 3), np.nan)
    length = np.zeros(n, dtype=int)
    degen = hitting.degenerate.copy()
    for i in range(n):
        if degen[i]:
            continue
        j, total, k = i, 0.0, 0
        while True:
            total += hitting.t_plus[j]
            k += 1
            if hitting.degenerate[j] or k > cap:
                degen[i] = True
                break
            if hitting.next_index[j] < 0:
                tau[i], phase[i] = total, hitting.hit_phase[j]
                length[i] = k
                break
            j = hitting.next_index[j]
    return ExitData(tau, phase, length, degen)


def phase_distance(d, a, b):
    """Max of periodic arclength and angle differences between boundary phase points."""
    lengths = np.array([c.length for c in d.components])
    same = a[:, 0] == b[:, 0]
    L = lengths[a[:, 0].astype(int)]
    ds = np.abs(a[:, 1] - b[:, 1])
    ds = np.minimum(ds, L - ds)
    da = np.abs(_wrap(a[:, 2] - b[:, 2]))
    return np.where(same, np.maximum(ds, da), np.inf)


def volume_from_lens(table: LensTable, cap=0.01):
    """Area from exit times: (1/2pi) sum tau+ * weight over transversal records.

    Returns (volume, reliable) where ``reliable`` is False when the weighted
    fraction of trapped or degenerate records exceeds ``cap``.
    """
    frac = table.trapped_fraction()
    sel = table.transversal & (table.weight > 0)
    vol = float(np.sum(table.tau[sel] * table.weight[sel]) / (2 * np.pi))
    reliable = frac <= cap
    if not reliable:
        warnings.warn("trapped/degenerate weight fraction %.3g exceeds cap %.3g" % (frac, cap))
    return vol, reliable


def reversal_residuals(table: LensTable):
    """Phase distance between reverse(y) and sigma(reverse(sigma(y))) on transversal records."""
    sel = np.nonzero(table.transversal)[0]
    z = table.exit_xyt[sel]
    r, exit_phase, _ = _trace_records(table.m, table.d, z[:, 0], z[:, 1], np.mod(z[:, 2] + np.pi, 2 * np.pi),
                                      table.solver, table.diameter, table.t_budget)
    back = np.stack([table.comp[sel], table.s[sel], _wrap(table.alpha[sel] + np.pi)], axis=1).astype(float)
    res = phase_distance(table.d, exit_phase, back)
    dt = np.abs(r.t_end - table.tau[sel])
    res = np.where(r.status == F.EXITED, res, np.inf)
    return sel, res, dt
