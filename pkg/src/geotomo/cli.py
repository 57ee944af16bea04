"""Command line front end: config parsing, subcommands and output files.

Every subcommand reads an INI config (``--config``), applies command line
overrides, echoes the resolved config to ``<out>/config.ini`` and writes CSV
(one units line, one header line) or JSON (sorted keys) files.  Numerical
work happens in the library modules; this file only wires them together.

Exit codes: 0 success, 1 configuration error, 2 failures reported.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import dataclass, field

SECTIONS = {
    "scenario": {"name": "flat_disk"},
    "solver": {"ode_tol": "1e-9", "boundary_tol": "1e-10", "glancing_eps": "1e-7", "t_budget_factor": "100"},
    "resolution": {"n_boundary": "256", "n_angle": "129", "grid_nx": "200", "grid_ny": "200", "n_theta": "32"},
    "output": {"dir": "geotomo_out"},
    "run": {"seed": "0", "threads": "1"},
    "trace": {"x": "0.0", "y": "0.0", "theta": "0.0", "t_max": ""},
    "xray": {"fields": "one, bump, wave"},
    "beta": {"n_boundary": "64", "n_seg": "64", "max_pairs": "400"},
    "verify": {"n_probes": "3", "n_potentials": "4", "beta_n_boundary": "32", "max_pairs": "60"},
}

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 1, 2


class ConfigError(ValueError):
    pass


def _is_pow2(n):
    return n >= 2 and (n & (n - 1)) == 0


@dataclass
class RunConfig:
    scenario: str = "flat_disk"
    params: dict = field(default_factory=dict)
    ode_tol: float = 1e-9
    boundary_tol: float = 1e-10
    glancing_eps: float = 1e-7
    t_budget_factor: float = 100.0
    n_boundary: int = 256
    n_angle: int = 129
    grid_nx: int = 200
    grid_ny: int = 200
    n_theta: int = 32
    out: str = "geotomo_out"
    seed: int = 0
    threads: int = 1
    sections: dict = field(default_factory=dict)  # per-command sections as strings

    def validate(self):
        from . import scenarios

        if self.scenario not in scenarios.names():
            raise ConfigError("unknown scenario %r; choose from %s" % (self.scenario, ", ".join(scenarios.names())))
        for k in ("ode_tol", "boundary_tol", "glancing_eps"):
            if not getattr(self, k) > 0:
                raise ConfigError("solver.%s must be positive, got %r" % (k, getattr(self, k)))
        if not self.t_budget_factor >= 0:
            raise ConfigError("solver.t_budget_factor must be non-negative")
        if not _is_pow2(self.n_theta):
            raise ConfigError("resolution.n_theta must be a power of 2, got %d" % self.n_theta)
        for k, lo in (("n_boundary", 8), ("n_angle", 8), ("grid_nx", 16), ("grid_ny", 16)):
            if getattr(self, k) < lo:
                raise ConfigError("resolution.%s must be at least %d" % (k, lo))
        if self.threads < 1:
            raise ConfigError("run.threads must be at least 1")
        return self

    def solver(self):
        from .flow import SolverConfig

        return SolverConfig(ode_tol=self.ode_tol, boundary_tol=self.boundary_tol,
                            glancing_eps=self.glancing_eps, t_budget_factor=self.t_budget_factor)

    def get(self, section, key, cast=str):
        raw = self.sections.get(section, {}).get(key, SECTIONS[section][key])
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError("%s.%s: cannot parse %r" % (section, key, raw)) from None

    def build_scenario(self):
        from . import scenarios

        try:
            return scenarios.get(self.scenario, **self.params)
        except TypeError as exc:
            raise ConfigError("bad parameter override for %s: %s" % (self.scenario, exc)) from None

    def to_parser(self):
        cp = configparser.ConfigParser()
        cp["scenario"] = {"name": self.scenario, **{k: repr(v) for k, v in sorted(self.params.items())}}
        cp["solver"] = {k: repr(getattr(self, k)) for k in ("ode_tol", "boundary_tol", "glancing_eps",
                                                             "t_budget_factor")}
        cp["resolution"] = {k: str(getattr(self, k)) for k in ("n_boundary", "n_angle", "grid_nx", "grid_ny",
                                                               "n_theta")}
        cp["output"] = {"dir": self.out}
        cp["run"] = {"seed": str(self.seed), "threads": str(self.threads)}
        for sec in ("trace", "xray", "beta", "verify"):
            cp[sec] = {k: str(self.sections.get(sec, {}).get(k, v)) for k, v in SECTIONS[sec].items()}
        return cp

    def to_dict(self):
        cp = self.to_parser()
        return {s: dict(cp[s]) for s in cp.sections()}


def load_config(path=None) -> RunConfig:
    """Parse an INI file into a RunConfig; unknown sections or keys are errors."""
    cp = configparser.ConfigParser()
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError("cannot read config %s: %s" % (path, exc)) from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError("unknown config section [%s]" % sec)
        if sec == "scenario":
            continue
        for key in cp[sec]:
            if key not in SECTIONS[sec]:
                raise ConfigError("unknown key %r in [%s]" % (key, sec))

    def val(sec, key, cast):
        raw = cp.get(sec, key, fallback=SECTIONS[sec][key])
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError("%s.%s: cannot parse %r" % (sec, key, raw)) from None

    params = {}
    if cp.has_section("scenario"):
        for key, raw in cp["scenario"].items():
            if key == "name":
                continue
            try:
                params[key] = float(raw)
            except ValueError:
                raise ConfigError("scenario.%s must be numeric, got %r" % (key, raw)) from None
    sections = {s: dict(cp[s]) for s in ("trace", "xray", "beta", "verify") if cp.has_section(s)}
    return RunConfig(
        scenario=val("scenario", "name", str).strip(), params=params,
        ode_tol=val("solver", "ode_tol", float), boundary_tol=val("solver", "boundary_tol", float),
        glancing_eps=val("solver", "glancing_eps", float), t_budget_factor=val("solver", "t_budget_factor", float),
        n_boundary=val("resolution", "n_boundary", int), n_angle=val("resolution", "n_angle", int),
        grid_nx=val("resolution", "grid_nx", int), grid_ny=val("resolution", "grid_ny", int),
        n_theta=val("resolution", "n_theta", int), out=val("output", "dir", str),
        seed=val("run", "seed", int), threads=val("run", "threads", int), sections=sections)


# ---------------------------------------------------------------------------
# output helpers


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def _write_csv(path, units, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# units: %s\n" % units)
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return "" if v != v else "%.12g" % v


def _clean(v):
    """Make a value JSON-safe: floats stay floats, NaN/inf become None."""
    import numpy as np

    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_clean(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else None
    return v


class Run:
    """Per-invocation context: config, output dir and collected failures."""

    def __init__(self, cfg: RunConfig, figures=False):
        self.cfg, self.figures = cfg, figures
        self.failures = []
        os.makedirs(cfg.out, exist_ok=True)
        with open(self.path("config.ini"), "w") as fh:
            cfg.to_parser().write(fh)

    def path(self, name):
        return os.path.join(self.cfg.out, name)

    def fail(self, item, exc):
        self.failures.append({"item": item, "error": "%s: %s" % (type(exc).__name__, exc)})


# ---------------------------------------------------------------------------
# named fields for the X-ray command


def sm_fields():
    import numpy as np

    return {
        "one": lambda x, y, th: np.ones_like(x),
        "bump": lambda x, y, th: np.exp(-2.0 * (x * x + y * y)),
        "wave": lambda x, y, th: np.exp(0.5 * x - 0.3 * y) * (1.0 + 0.4 * np.sin(th)),
        "angular": lambda x, y, th: (1.0 + x * y) * np.cos(th) ** 2,
    }


def _field_funcs(run, sc, names):
    from . import xray as XR

    fields = sm_fields()
    out = {}
    for name in names:
        if name in fields:
            out[name] = (fields[name], True)
        elif name in ("potential1", "potential2"):
            order = int(name[-1])
            p = XR.random_potentials(sc.metric, sc.domain, order - 1, 1, seed=run.cfg.seed)[0]
            Dp = XR.sym_cov_derivative(sc.metric, p)
            out[name] = ((lambda f: (lambda x, y, th: XR.pullback_tensor(sc.metric, f, x, y, th)))(Dp), False)
        else:
            raise ConfigError("unknown field %r; choose from %s, potential1, potential2"
                              % (name, ", ".join(fields)))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_scenarios(run: Run):
    from . import scenarios

    rows = []
    for sc in scenarios.catalog():
        f = sc.facts
        rows.append({"name": sc.name, "diameter": sc.diameter, "params": sc.params,
                     "components": len(sc.domain.components), "periodic_x": sc.domain.period_x,
                     "facts": {"simply_connected": f.simply_connected, "conjugate_point_free": f.conjugate_point_free,
                               "non_trapping": f.non_trapping, "convex_boundary": f.convex_boundary,
                               "known_area": f.known_area, "known_curvature": f.known_curvature,
                               "numerically_certified": list(f.numerically_certified)}})
    _write_json(run.path("scenarios.json"), _clean({"scenarios": rows}))
    for r in rows:
        print("%-26s components=%d  %s" % (r["name"], r["components"],
                                           " ".join("%s=%s" % (k, v) for k, v in sorted(r["facts"].items())
                                                    if k != "numerically_certified")))
    return rows


def cmd_trace(run: Run, start=None):
    """Integrate one geodesic from (x, y, theta) and write its samples."""
    import numpy as np

    from . import flow as F

    cfg = run.cfg
    sc = cfg.build_scenario()
    m, d = sc.metric, sc.domain
    x, y, th = start if start is not None else (cfg.get("trace", "x", float), cfg.get("trace", "y", float),
                                                cfg.get("trace", "theta", float))
    t_raw = cfg.get("trace", "t_max")
    t_max = float(t_raw) if str(t_raw).strip() else cfg.t_budget_factor * sc.diameter
    if t_max < 0:
        raise ConfigError("trace.t_max must be non-negative")
    if d.rho(x, y) < -cfg.boundary_tol:
        raise ConfigError("start point (%g, %g) lies outside the domain" % (x, y))
    report = {"config": cfg.to_dict(), "start": [x, y, th], "t_max": t_max}
    rows = []
    if t_max > 0:
        try:
            path = F.integrate_geodesic(m, d, F.UnitTangent(x, y, th), t_max, solver=cfg.solver(),
                                        diameter=sc.diameter)
            for t, z in zip(path.times, path.states):
                rows.append([_fmt(t), _fmt(z[0]), _fmt(z[1]), _fmt(np.mod(z[2], 2 * np.pi)),
                             _fmt(float(d.rho(z[0], z[1])))])
            report["terminal"] = path.terminal
            report["events"] = [{"t": ev[0], "kind": ev[1]} for ev in path.boundary_events]
        except F.IntegrationError as exc:
            run.fail("trace", exc)
    else:
        report["terminal"] = "budget_exhausted"
        report["events"] = []
    report["n_samples"] = len(rows)
    report["failures"] = run.failures
    _write_csv(run.path("path.csv"), "t g-arclength, x y chart units, theta radians, rho chart units",
               ["t", "x", "y", "theta", "rho"], rows)
    _write_json(run.path("trace.json"), _clean(report))
    if run.figures and rows:
        from . import plots

        plots.plot_path(run.path("trace.png"), d, np.array([[float(v) for v in r] for r in rows]))
    return report


def _build_lens(cfg, sc):
    from . import lens as L

    return L.build_lens_table(sc.metric, sc.domain, cfg.n_boundary, cfg.n_angle, solver=cfg.solver(),
                              diameter=sc.diameter, t_budget=cfg.t_budget_factor * sc.diameter)


def lens_summary(table, tol=1e-4):
    """Conversions both ways plus volume, as plain numbers."""
    import numpy as np

    from . import lens as L

    use = table.transversal
    conv = L.exit_to_hitting(table)
    direct = L.direct_hitting(table)
    back = L.hitting_to_exit(table, conv)
    ok = use & ~conv.degenerate
    dt = np.abs(conv.t_plus - direct.t_plus)
    good = ok & (dt <= tol)
    rt = np.abs(back.tau_plus - table.tau)
    rt_good = ok & (rt <= tol)
    vol, reliable = L.volume_from_lens(table)
    band = table.transversal & (table.t_hit < table.tau - 1e-9)
    return {
        "n_records": len(table), "n_transversal": int(use.sum()),
        "n_supplementary": int((~table.grid_node).sum()),
        "trapped_fraction": table.trapped_fraction(),
        "hitting_match_fraction": float(good.sum() / max(use.sum(), 1)),
        "hitting_max_error_matched": float(dt[good].max()) if good.any() else 0.0,
        "roundtrip_match_fraction": float(rt_good.sum() / max(use.sum(), 1)),
        "n_tangent_band": int(band.sum()),
        "volume": vol, "volume_reliable": bool(reliable),
    }, conv, back


def cmd_lens(run: Run):
    """Build the lens table, convert exit <-> hitting data, report the volume."""
    cfg = run.cfg
    sc = cfg.build_scenario()
    table = _build_lens(cfg, sc)
    table.write_csv(run.path("lens.csv"))
    out = table.to_json()
    out["config"] = cfg.to_dict()
    try:
        summary, conv, back = lens_summary(table)
        out["summary"] = summary
        out["converted"] = {"t_plus_from_exit": conv.t_plus, "tau_plus_roundtrip": back.tau_plus}
        if sc.facts.known_area:
            out["summary"]["known_area"] = sc.facts.known_area
    except Exception as exc:  # conversions are reported, not fatal
        run.fail("lens_conversions", exc)
    out["failures"] = run.failures
    _write_json(run.path("lens.json"), _clean(out))
    if run.figures:
        from . import plots

        plots.plot_lens(run.path("lens.png"), table)
    return out


def cmd_xray(run: Run, names=None):
    """X-ray transforms of named fields on the lens grid plus a Santalo report."""
    import numpy as np

    from . import xray as XR

    cfg = run.cfg
    sc = cfg.build_scenario()
    if names is None:
        names = [s.strip() for s in cfg.get("xray", "fields").split(",") if s.strip()]
    funcs = _field_funcs(run, sc, names)
    table = _build_lens(cfg, sc)
    If = XR.xray_sm_functions(sc.metric, sc.domain, table, [f for f, _ in funcs.values()])
    rows = [[int(table.comp[i]), _fmt(table.s[i]), _fmt(table.alpha[i])] + [_fmt(v) for v in If[i]]
            for i in range(len(table)) if table.grid_node[i]]
    _write_csv(run.path("xray.csv"), "s chart-arclength, alpha radians from inward normal, transforms in "
               "integrand units times g-arclength", ["component", "s", "alpha"] + list(funcs), rows)
    report = {"config": cfg.to_dict(), "fields": {}}
    for k, (name, (f, santalo)) in enumerate(funcs.items()):
        entry = {"max_abs": float(np.nanmax(np.abs(If[:, k])))}
        if santalo:
            try:
                lhs, rhs = XR.santalo_check(sc.metric, sc.domain, table, f, If=If[:, k])
                entry.update(lhs=lhs, rhs=rhs, relative_residual=abs(lhs - rhs) / abs(lhs) if lhs else abs(rhs))
            except Exception as exc:
                run.fail("santalo_%s" % name, exc)
        report["fields"][name] = entry
    report["failures"] = run.failures
    _write_json(run.path("santalo.json"), _clean(report))
    if run.figures:
        from . import plots

        plots.plot_xray(run.path("xray.png"), table, If, list(funcs))
    return report


def _pick_pairs(n, k, seed):
    import numpy as np

    if n <= k:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


def beta_report(run, sc, table, max_pairs):
    """Symmetry, triangle and lens-from-beta comparison on a seeded pair subset."""
    import numpy as np

    from . import distance as D

    m, d = sc.metric, sc.domain
    rep = {"n_boundary": len(table), "symmetry_residual": table.symmetry_residual(),
           "triangle_violation": table.triangle_violation(),
           "smooth_fraction": float(table.smooth.mean())}
    rec = D.lens_from_beta(m, d, table)
    rep["n_smooth_transversal"] = int(rec.i.size)
    rep["skipped"] = rec.skipped
    sel = _pick_pairs(rec.i.size, max_pairs, run.cfg.seed)
    if sel.size:
        sub = D.BetaLens(rec.i[sel], rec.j[sel], rec.xy[sel], rec.theta[sel], rec.xy_out[sel],
                         rec.theta_out[sel], rec.t_plus[sel], rec.skipped)
        cmp = D.compare_with_flow(m, d, table, sub, diameter=sc.diameter)
        ok = cmp["converged"]
        rep["compared"] = int(sel.size)
        rep["converged"] = int(ok.sum())
        for k in ("angle_in", "angle_out", "time"):
            rep["max_" + k] = float(np.max(cmp[k][ok])) if ok.any() else None
    return rep


def cmd_beta(run: Run):
    """Boundary distance table and the lens data reconstructed from it."""
    from . import distance as D

    cfg = run.cfg
    sc = cfg.build_scenario()
    n = cfg.get("beta", "n_boundary", int)
    table = D.build_beta_table(sc.metric, sc.domain, n, grid_n=(cfg.grid_nx, cfg.grid_ny),
                               n_seg=cfg.get("beta", "n_seg", int))
    table.write_csv(run.path("beta.csv"))
    report = {"config": cfg.to_dict()}
    try:
        report.update(beta_report(run, sc, table, cfg.get("beta", "max_pairs", int)))
    except Exception as exc:
        run.fail("lens_from_beta", exc)
    report["failures"] = run.failures
    _write_json(run.path("beta_report.json"), _clean(report))
    if run.figures:
        from . import plots

        plots.plot_beta(run.path("beta.png"), table)
    return report


# ---------------------------------------------------------------------------
# verify suite


def _order_ok(coarse, fine, floor, order=3.0):
    """Refinement by 2 reduced the residual at >= order, or both sit at the floor."""
    return fine <= floor or fine <= coarse / 2 ** order


def verify_items(run: Run):
    """Yield (name, callable) pairs; each callable returns (ok, value, threshold, detail)."""
    import numpy as np

    from . import distance as D
    from . import fiberspace as FS
    from . import flow as F
    from . import lens as L
    from . import metric as M
    from . import scenarios
    from . import xray as XR

    cfg = run.cfg
    sc = cfg.build_scenario()
    m, d = sc.metric, sc.domain
    state = {}

    def facts():
        res = scenarios.verify_declared_facts(sc, solver=cfg.solver())
        bad = sorted(k for k, v in res.items() if not v["ok"])
        return not bad, len(bad), 0, {k: {"declared": v["declared"], "observed": v["observed"]}
                                      for k, v in res.items()}

    def curvature():
        rng = np.random.default_rng(cfg.seed)
        xmin, xmax, ymin, ymax = d.bbox
        p = rng.uniform([xmin, ymin], [xmax, ymax], size=(400, 2))
        p = p[d.rho(p[:, 0], p[:, 1]) > 0][:50]
        h = 1e-3
        x, y = p[:, 0], p[:, 1]
        lap = (m.lam(x + h, y) + m.lam(x - h, y) + m.lam(x, y + h) + m.lam(x, y - h) - 4 * m.lam(x, y)) / h ** 2
        K_fd = -np.exp(-2 * m.lam(x, y)) * lap
        err = float(np.max(np.abs(K_fd - M.curvature(m, x, y))))
        return err <= 1e-5, err, 1e-5, {}

    def table():
        if "table" not in state:
            state["table"] = _build_lens(cfg, sc)
        return state["table"]

    def reversal():
        _, res, _ = L.reversal_residuals(table())
        v = float(np.max(res)) if res.size else 0.0
        return v <= 1e-5, v, 1e-5, {"n": int(res.size)}

    def equivalence():
        s, _, _ = lens_summary(table())
        ok = s["hitting_match_fraction"] >= 0.99 and s["roundtrip_match_fraction"] >= 0.99
        return ok, min(s["hitting_match_fraction"], s["roundtrip_match_fraction"]), 0.99, s

    def volume():
        vol, reliable = L.volume_from_lens(table())
        ref = sc.facts.known_area
        if ref is None:
            ref = float(np.sum(XR.domain_quadrature(m, d)[2]))
        if not reliable:
            return True, None, 1e-3, {"skipped": "trapped fraction above cap", "volume": vol}
        err = abs(vol - ref) / ref
        return err <= 1e-3, err, 1e-3, {"volume": vol, "reference": ref}

    def santalo():
        if not L.volume_from_lens(table())[1]:
            return True, None, 1e-3, {"skipped": "trapped fraction above cap"}
        lhs, rhs = XR.santalo_check(m, d, table(), sm_fields()["wave"])
        err = abs(lhs - rhs) / abs(lhs)
        return err <= 1e-3, err, 1e-3, {"lhs": lhs, "rhs": rhs}

    def annihilation(order):
        def f():
            if not sc.facts.simply_connected or not sc.facts.non_trapping:
                return True, None, 1e-6, {"skipped": "not simply connected and non-trapping"}
            t = table()
            pots = XR.random_potentials(m, d, order - 1, cfg.get("verify", "n_potentials", int), seed=cfg.seed)
            fields = [XR.sym_cov_derivative(m, p) for p in pots]
            tight = F.SolverConfig(**{**cfg.solver().__dict__, "ode_tol": min(cfg.ode_tol, 1e-11)})
            I = XR.xray_tensors(m, d, t, fields, solver=tight)
            v = float(np.nanmax(np.abs(I[t.transversal])))
            return v <= 1e-6, v, 1e-6, {"n_potentials": len(fields)}
        return f

    def beta():
        if sc.domain.period_x:
            return True, None, 1e-7, {"skipped": "periodic domain"}
        bt = D.build_beta_table(m, d, cfg.get("verify", "beta_n_boundary", int),
                                grid_n=(cfg.grid_nx, cfg.grid_ny))
        rep = beta_report(run, sc, bt, cfg.get("verify", "max_pairs", int))
        tri = rep["triangle_violation"]
        ok = rep["symmetry_residual"] <= 1e-9 and tri <= 1e-7
        worst = 0.0
        if sc.facts.simply_connected and sc.facts.conjugate_point_free and sc.facts.convex_boundary \
                and rep.get("compared"):
            ok = ok and rep["converged"] == rep["compared"]
            worst = max(rep["max_angle_in"], rep["max_angle_out"], rep["max_time"])
            ok = ok and worst <= 1e-3
        return ok, max(tri, worst), 1e-3, rep

    def probes(grid, cutoff=None):
        return [FS.random_probe(grid, cfg.seed + k, cutoff=cutoff) for k in range(cfg.get("verify", "n_probes", int))]

    def structure():
        n = cfg.grid_nx
        g1, g2 = FS.make_grid(d, n // 2, cfg.n_theta), FS.make_grid(d, n, cfg.n_theta)
        worst = {}
        ok = True
        for u1, u2 in zip(probes(g1), probes(g2)):
            scale = float(np.max(np.abs(u2.values)))
            r1, r2 = FS.structure_residuals(m, u1), FS.structure_residuals(m, u2)
            p1, p2 = FS.pestov_uhlmann_residual(m, d, u1), FS.pestov_uhlmann_residual(m, d, u2)
            pairs = {"r1": (r1["r1_l2"], r2["r1_l2"]), "r2": (r1["r2_l2"], r2["r2_l2"]), "pu": (p1.l2, p2.l2)}
            for k, (a, b) in pairs.items():
                ok = ok and _order_ok(a, b, 1e-9 * scale)
                worst[k] = max(worst.get(k, 0.0), b)
        return ok, max(worst.values()), 3.0, worst

    def pestov():
        g = FS.make_grid(d, cfg.grid_nx // 2, cfg.n_theta)
        X, Y = g.mesh2()
        cut = FS.interior_cutoff(d, X, Y, 0.15)
        vals = [abs(FS.pestov_identity_residual(m, d, u)) for u in probes(g, cut)]
        v = max(vals)
        return v <= 1e-3, v, 1e-3, {"residuals": vals}

    def holomorphic():
        g = FS.make_grid(d, cfg.grid_nx // 2, cfg.n_theta)
        r = FS.holomorphic_residual(m, d, lambda x, y: x, lambda x, y: -y, g)
        c = FS.holomorphic_residual(m, d, lambda x, y: x, lambda x, y: y, g)
        return r <= 1e-2 and c > 0.5, r, 1e-2, {"control": c}

    items = [("declared_facts", facts), ("curvature_formula", curvature), ("lens_reversal", reversal),
             ("lens_equivalence", equivalence), ("volume_from_lens", volume), ("santalo", santalo),
             ("potential_annihilation_m1", annihilation(1)), ("potential_annihilation_m2", annihilation(2)),
             ("beta_table", beta), ("identity_residual_orders", structure), ("pestov_identity", pestov)]
    if not d.period_x:
        items.append(("holomorphic_bridge", holomorphic))
    return items


def cmd_verify(run: Run):
    """Run the invariant suite and write a pass/fail report."""
    results = []
    for name, fn in verify_items(run):
        try:
            ok, value, threshold, detail = fn()
            results.append({"name": name, "ok": bool(ok), "value": value, "threshold": threshold, "detail": detail})
        except Exception as exc:
            run.fail(name, exc)
            results.append({"name": name, "ok": False, "value": None, "threshold": None,
                            "detail": {"error": "%s: %s" % (type(exc).__name__, exc)}})
        print("%-28s %s" % (name, "PASS" if results[-1]["ok"] else "FAIL"), flush=True)
    report = {"config": run.cfg.to_dict(), "scenario": run.cfg.scenario, "checks": results,
              "all_passed": all(r["ok"] for r in results)}
    _write_json(run.path("verify.json"), _clean(report))
    if not report["all_passed"]:
        run.failures.append({"item": "verify", "error": "verification failures present"})
    return report


COMMANDS = {"trace": cmd_trace, "lens": cmd_lens, "xray": cmd_xray, "beta": cmd_beta,
            "verify": cmd_verify, "scenarios": cmd_scenarios}


def build_parser():
    p = argparse.ArgumentParser(prog="geotomo", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory (overrides [output] dir)")
    p.add_argument("--seed", type=int, help="seed for randomized probes (overrides [run] seed)")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap (overrides [run] threads)")
    p.add_argument("--scenario", help="catalog scenario name (overrides [scenario] name)")
    p.add_argument("--figures", action="store_true", help="also write PNG figures (needs matplotlib)")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("trace", help="integrate one geodesic")
    t.add_argument("--x", type=float)
    t.add_argument("--y", type=float)
    t.add_argument("--theta", type=float)
    t.add_argument("--t-max", type=float, dest="t_max")
    sub.add_parser("lens", help="lens table with exit/hitting conversions and volume")
    x = sub.add_parser("xray", help="X-ray transforms of named fields and a Santalo report")
    x.add_argument("--field", action="append", dest="fields", help="field name, repeatable")
    sub.add_parser("beta", help="boundary distance table and lens data reconstructed from it")
    sub.add_parser("verify", help="invariant suite with a pass/fail report")
    sub.add_parser("scenarios", help="list the scenario catalog")
    return p


def _cap_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        if args.scenario is not None:
            cfg.scenario = args.scenario
        if args.command == "trace":
            tr = cfg.sections.setdefault("trace", {})
            for k in ("x", "y", "theta", "t_max"):
                if getattr(args, k) is not None:
                    tr[k] = repr(getattr(args, k))
        if args.command == "xray" and args.fields:
            cfg.sections.setdefault("xray", {})["fields"] = ", ".join(args.fields)
        # only affects thread pools not yet started (numpy is imported lazily)
        _cap_threads(cfg.threads)
        cfg.validate()
        if args.figures:
            try:
                import matplotlib  # noqa: F401
            except ImportError:
                raise ConfigError("--figures needs matplotlib (pip install 'artifact[figures]')") from None
        run = Run(cfg, figures=args.figures)
        COMMANDS[args.command](run)
    except ConfigError as exc:
        print("geotomo: config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    for f in run.failures:
        print("geotomo: %s: %s" % (f["item"], f["error"]), file=sys.stderr)
    return EXIT_FAILURES if run.failures else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
