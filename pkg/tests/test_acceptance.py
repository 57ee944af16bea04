"""Acceptance suite: twelve criteria at their stated tolerances.

Each test carries a ``criterion`` marker; the conftest prints one PASS/FAIL
line per criterion in the terminal summary.
"""

import functools

import numpy as np
import pytest

from geotomo import distance as D
from geotomo import fiberspace as FS
from geotomo import flow as F
from geotomo import lens as L
from geotomo import scenarios as S
from geotomo import xray as XR

TIGHT = F.SolverConfig(ode_tol=1e-11)
DEFAULT_LENS = (256, 129)
DEFAULT_QUAD = (200, 48, 64)


@functools.lru_cache(maxsize=None)
def lens_table(name, nb=DEFAULT_LENS[0], na=DEFAULT_LENS[1], tight=False, budget_factor=None):
    sc = S.get(name)
    t_budget = None if budget_factor is None else budget_factor * sc.diameter
    return L.build_lens_table(sc.metric, sc.domain, nb, na, diameter=sc.diameter,
                              solver=TIGHT if tight else F.SolverConfig(), t_budget=t_budget)


@functools.lru_cache(maxsize=None)
def beta_table(name):
    sc = S.get(name)
    return D.build_beta_table(sc.metric, sc.domain, 64, grid_n=200, n_seg=64)


SANTALO_FUNCS = {
    "one": lambda x, y, t: np.ones_like(x),
    "radial_cos2": lambda x, y, t: (1 - x * x - y * y) * np.cos(t) ** 2,
    "exp_sin": lambda x, y, t: np.exp(0.5 * x - 0.3 * y) * (1 + 0.4 * np.sin(t)),
}


def santalo_residuals(name, nb, na, quad):
    sc = S.get(name)
    T = lens_table(name, nb, na)
    If = XR.xray_sm_functions(sc.metric, sc.domain, T, list(SANTALO_FUNCS.values()))
    out = {}
    for k, (key, f) in enumerate(SANTALO_FUNCS.items()):
        lhs, rhs = XR.santalo_check(sc.metric, sc.domain, T, f, If=If[:, k],
                                    n_x=quad[0], n_y=quad[1], n_theta=quad[2])
        out[key] = abs(lhs - rhs) / abs(lhs)
    return out


# residuals this small are at the integrator/quadrature floor and cannot shrink further
SANTALO_FLOOR = 1e-10


@pytest.mark.criterion(1, "Santalo balance")
@pytest.mark.parametrize("name", ["flat_disk", "flat_crescent", "hyperbolic_patch"])
def test_santalo_balance(name, detail):
    coarse = santalo_residuals(name, *DEFAULT_LENS, DEFAULT_QUAD)
    fine = santalo_residuals(name, 2 * DEFAULT_LENS[0], 2 * DEFAULT_LENS[1] - 1,
                             tuple(2 * q for q in DEFAULT_QUAD))
    detail("%s max rel %.2e -> %.2e" % (name, max(coarse.values()), max(fine.values())))
    for key in SANTALO_FUNCS:
        assert coarse[key] <= 1e-3, (key, coarse[key])
        assert fine[key] < coarse[key] or fine[key] <= SANTALO_FLOOR, (key, coarse[key], fine[key])


@pytest.mark.criterion(2, "volume from lens data")
def test_volume_flat_disk(detail):
    vol, reliable = L.volume_from_lens(lens_table("flat_disk"))
    # closed form: (1/2pi) * int_0^{2pi} int 2cos(a) cos(a) da ds = pi
    err = abs(vol - np.pi) / np.pi
    detail("disk rel %.2e" % err)
    assert reliable and err <= 1e-3


@pytest.mark.criterion(2, "volume from lens data")
def test_volume_hyperbolic_patch(detail):
    sc = S.get("hyperbolic_patch")
    vol, reliable = L.volume_from_lens(lens_table("hyperbolic_patch"))
    area = float(np.sum(XR.domain_quadrature(sc.metric, sc.domain)[2]))
    err = abs(vol - area) / area
    detail("hyperbolic rel %.2e" % err)
    assert reliable and err <= 1e-3


@pytest.mark.criterion(3, "potential annihilation")
@pytest.mark.parametrize("name", ["flat_disk", "flat_crescent", "hyperbolic_patch", "bump_metric"])
@pytest.mark.parametrize("order", [1, 2])
def test_potential_annihilation(name, order, detail):
    sc = S.get(name)
    m, d = sc.metric, sc.domain
    T = lens_table(name, 48, 25)  # 1200 grid nodes
    pots = XR.random_potentials(m, d, order - 1, 20, seed=100 + order)
    fields = [XR.sym_cov_derivative(m, p) for p in pots]
    I = XR.xray_tensors(m, d, T, fields, solver=TIGHT)
    v = float(np.nanmax(np.abs(I[T.transversal])))
    detail("%s m=%d max|I(Dp)| %.1e" % (name, order, v))
    assert v <= 1e-6


@functools.lru_cache(maxsize=None)
def kernel_report(name, order):
    sc = S.get(name)
    return XR.potential_kernel_test(sc.metric, sc.domain, lens_table(name, 64, 33), order, 4, solver=TIGHT)


@pytest.mark.criterion(4, "discrete injectivity")
@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch"])
def test_injectivity_functions(name, detail):
    rep = kernel_report(name, 0)
    detail("%s m=0 ratio %.2e" % (name, rep["sigma_ratio"]))
    assert rep["kernel_dimension"] == 0
    assert rep["sigma_ratio"] >= 1e-4


@pytest.mark.criterion(4, "discrete injectivity")
@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch"])
def test_injectivity_one_forms(name, detail):
    rep = kernel_report(name, 1)
    ang = max(rep["principal_angles"]) if rep["principal_angles"] else np.inf
    detail("%s m=1 ker %d pot %d angle %.1e" % (name, rep["kernel_dimension"], rep["potential_dimension"], ang))
    assert rep["kernel_dimension"] == rep["potential_dimension"] > 0
    assert ang <= 1e-3


@pytest.mark.criterion(4, "discrete injectivity")
def test_injectivity_two_tensors_hyperbolic(detail):
    rep = kernel_report("hyperbolic_patch", 2)
    ang = max(rep["principal_angles"]) if rep["principal_angles"] else np.inf
    detail("hyperbolic m=2 ker %d pot %d angle %.1e" % (rep["kernel_dimension"], rep["potential_dimension"], ang))
    assert rep["kernel_dimension"] == rep["potential_dimension"] > 0
    assert ang <= 1e-2


@pytest.mark.criterion(5, "lens equivalence")
def test_lens_equivalence_crescent(detail):
    T = lens_table("flat_crescent")
    use = T.transversal
    conv = L.exit_to_hitting(T)
    direct = L.direct_hitting(T)
    back = L.hitting_to_exit(T, conv)
    ok = use & ~conv.degenerate
    hit_ok = ok & (np.abs(conv.t_plus - direct.t_plus) <= 1e-4)
    rt_ok = ok & (np.abs(back.tau_plus - T.tau) <= 1e-4)
    band = use & (T.t_hit < T.tau - 1e-6)
    frac_hit, frac_rt = hit_ok.sum() / use.sum(), rt_ok.sum() / use.sum()
    detail("crescent hit %.4f roundtrip %.4f band records %d" % (frac_hit, frac_rt, band.sum()))
    assert band.sum() > 0  # the conversion is exercised on records with t+ < tau+
    assert np.all(hit_ok[band])
    assert frac_hit >= 0.99 and frac_rt >= 0.99


@pytest.mark.criterion(5, "lens equivalence")
@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch"])
def test_lens_equivalence_convex(name):
    T = lens_table(name)
    use = T.transversal
    conv = L.exit_to_hitting(T)
    direct = L.direct_hitting(T)
    assert not conv.degenerate[use].any()
    np.testing.assert_array_equal(conv.t_plus[use], direct.t_plus[use])
    np.testing.assert_array_equal(conv.t_plus[use], T.tau[use])


@pytest.mark.criterion(6, "beta to lens reconstruction")
@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch"])
def test_beta_lens_reconstruction(name, detail):
    sc = S.get(name)
    bt = beta_table(name)
    rec = D.lens_from_beta(sc.metric, sc.domain, bt)
    cmp = D.compare_with_flow(sc.metric, sc.domain, bt, rec, diameter=sc.diameter)
    ang = np.maximum(cmp["angle_in"], cmp["angle_out"])
    detail("%s %d pairs angle %.1e time %.1e" % (name, rec.i.size, ang.max(), cmp["time"].max()))
    assert rec.i.size > 1000
    assert cmp["converged"].all()
    assert ang.max() <= 1e-3
    assert cmp["time"].max() <= 1e-3


@pytest.mark.criterion(7, "boundary metric from beta")
def test_boundary_arc_from_beta(detail):
    bt = beta_table("flat_disk")
    arc = D.boundary_metric_from_beta(bt, 0, 0.3, 1.3)
    detail("arc %.6f" % arc.value)
    assert abs(arc.value - 1.0) <= 1e-3
    assert np.all(np.diff(arc.partial_sums) >= 0)


def _order_ok(coarse, fine, floor):
    return fine <= floor or fine <= coarse / 8.0


@pytest.mark.criterion(8, "identity residuals")
@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch", "flat_crescent"])
def test_identity_residual_orders(name, detail):
    sc = S.get(name)
    m, d = sc.metric, sc.domain
    grids = [FS.make_grid(d, n, 32) for n in (32, 64)]
    worst = 0.0
    for seed in range(10):
        res = []
        for g in grids:
            u = FS.random_probe(g, seed)
            r = FS.structure_residuals(m, u)
            p = FS.pestov_uhlmann_residual(m, d, u)
            res.append((r["r1_l2"], r["r2_l2"], p.l2, np.max(np.abs(u.values))))
        floor = 1e-9 * res[1][3]
        for k in range(3):
            assert _order_ok(res[0][k], res[1][k], floor), (seed, k, res[0][k], res[1][k])
            if res[1][k] > floor:
                worst = max(worst, np.log2(res[0][k] / res[1][k]))
    detail("%s worst above-floor order %s" % (name, "%.2f" % worst if worst else "n/a (round-off)"))


@pytest.mark.criterion(8, "identity residuals")
def test_identity_residual_orders_curved_rate(detail):
    # a curved scenario keeps [X, X_perp] = -K V above round-off: check the empirical order
    sc = S.get("hyperbolic_patch")
    rates = []
    for seed in range(10):
        r = [FS.structure_residuals(sc.metric, FS.random_probe(FS.make_grid(sc.domain, n, 32), seed))["r2_l2"]
             for n in (32, 64)]
        rates.append(np.log2(r[0] / r[1]))
    detail("hyperbolic [X,Xperp] orders %.2f..%.2f" % (min(rates), max(rates)))
    assert min(rates) >= 3.0


@pytest.mark.criterion(8, "identity residuals")
@pytest.mark.parametrize("name", ["hyperbolic_patch", "flat_disk"])
def test_pestov_identity(name, detail):
    sc = S.get(name)
    m, d = sc.metric, sc.domain
    vals = []
    for n in (32, 64, 128):
        g = FS.make_grid(d, n, 32)
        X, Y = g.mesh2()
        u = FS.random_probe(g, 7, cutoff=FS.interior_cutoff(d, X, Y, 0.15))
        vals.append(abs(FS.pestov_identity_residual(m, d, u)))
    detail("%s pestov %s" % (name, " ".join("%.1e" % v for v in vals)))
    assert vals[1] <= 1e-3  # default grid n = 64
    assert vals[2] < vals[1] or vals[2] <= 1e-12


@pytest.mark.criterion(9, "conjugate point detection")
def test_conjugate_sphere(detail):
    sc = S.get("spherical_cap")
    # the chart circle r = 1 is a great circle (equator) lying inside the cap
    t, _ = F.first_conjugate_batch(sc.metric, sc.domain, [1.0], [0.0], [np.pi / 2], 3.5,
                                   solver=TIGHT, diameter=sc.diameter)
    detail("sphere conj %.6f" % t[0])
    assert abs(t[0] - np.pi) <= 1e-3


@pytest.mark.criterion(9, "conjugate point detection")
@pytest.mark.parametrize("name", ["flat_disk", "flat_crescent", "hyperbolic_patch",
                                  "hyperbolic_cylinder_strip", "hyperbolic_cylinder_cut"])
def test_no_conjugate_points_nonpositive(name):
    sc = S.get(name)
    m, d = sc.metric, sc.domain
    rng = np.random.default_rng(9)
    xmin, xmax, ymin, ymax = d.bbox
    pts = rng.uniform([xmin, ymin], [xmax, ymax], size=(4000, 2))
    pts = pts[d.rho(pts[:, 0], pts[:, 1]) > 0][:1000]
    assert len(pts) == 1000
    th = rng.uniform(0, 2 * np.pi, 1000)
    t_cap = 10 * sc.diameter
    t, r = F.first_conjugate_batch(m, d, pts[:, 0], pts[:, 1], th, t_cap, solver=F.SolverConfig(),
                                   diameter=sc.diameter)
    assert np.all(np.isnan(t))


@pytest.mark.criterion(10, "non-trapping sanity")
@pytest.mark.parametrize("name", ["flat_disk", "flat_crescent", "hyperbolic_patch", "bump_metric"])
def test_non_trapping_fans(name):
    sc = S.get(name)
    m, d = sc.metric, sc.domain
    comp, s, _ = L.boundary_grid(d, 100)
    x, y = d.components[0].point(s)
    nx, ny = d.inward_normal(x, y)
    a = np.linspace(-np.pi / 2, np.pi / 2, 100)
    th = np.mod(np.arctan2(ny, nx)[:, None] + a[None, :], 2 * np.pi).ravel()
    r = F.trace_batch(m, d, np.repeat(x, 100), np.repeat(y, 100), th, sc.t_budget, diameter=sc.diameter)
    assert r.status.size == 10 ** 4
    assert not np.any(r.status == F.BUDGET)


@pytest.mark.criterion(10, "non-trapping sanity")
def test_cylinder_trapped_band(detail):
    sc = S.get("hyperbolic_cylinder_strip")
    m, d = sc.metric, sc.domain
    rng = np.random.default_rng(10)
    n = 10 ** 4 - 200
    x = rng.uniform(0, 2.0, n)
    y = rng.uniform(-0.59, 0.59, n)
    th = rng.uniform(0, 2 * np.pi, n)
    # add the core geodesic and points just off its invariant level set
    xc = np.linspace(0, 2.0, 100, endpoint=False)
    x = np.concatenate([x, xc, xc])
    y = np.concatenate([y, np.zeros(100), np.full(100, 0.01)])
    th = np.concatenate([th, np.where(np.arange(100) % 2, 0.0, np.pi), np.zeros(100)])
    r = F.trace_batch(m, d, x, y, th, sc.t_budget, diameter=sc.diameter)
    # Clairaut integral: e^lam cos(theta) is conserved; trapped orbits sit on |c| = 1
    c = np.abs(np.cos(th) / np.cos(y))
    trapped = r.status == F.BUDGET
    detail("cylinder trapped %d of %d, max ||c|-1| on trapped %.1e" % (
        trapped.sum(), x.size, np.max(np.abs(c[trapped] - 1)) if trapped.any() else np.nan))
    assert trapped[n:n + 100].all()  # the core closed geodesic
    assert np.all(np.abs(c[trapped] - 1) <= 1e-6)  # only on a thin band around it
    assert np.all(r.status[~trapped] == F.EXITED)
    assert not trapped[n + 100:].any()  # |c| - 1 = 5e-5 off the band: escapes


@pytest.mark.criterion(11, "time-reversal symmetry")
@pytest.mark.parametrize("name", sorted(S.names()))
def test_time_reversal(name, detail):
    # only transversal records enter the residual; a short budget keeps the
    # genuinely trapped glancing records of the cap from dominating the run time
    T = lens_table(name, 64, 33, budget_factor=10.0)
    _, res, _ = L.reversal_residuals(T)
    detail("%s %.1e" % (name, res.max()))
    assert res.size > 0
    assert res.max() <= 1e-5


@pytest.mark.criterion(12, "holomorphicity bridge")
def test_holomorphic_bridge(detail):
    sc = S.get("flat_disk")
    g = FS.make_grid(sc.domain, 64, 32)
    r = FS.holomorphic_residual(sc.metric, sc.domain, lambda x, y: x, lambda x, y: -y, g)
    c = FS.holomorphic_residual(sc.metric, sc.domain, lambda x, y: x, lambda x, y: y, g)
    detail("pair %.1e control %.3f" % (r, c))
    assert r <= 1e-2
    assert c > 0.5
