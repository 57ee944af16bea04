import csv
import json

import numpy as np
import pytest

from geotomo import cli

SMALL = """
[resolution]
n_boundary = 32
n_angle = 17
grid_nx = 48
grid_ny = 48
n_theta = 16
[beta]
n_boundary = 16
n_seg = 32
max_pairs = 20
[verify]
n_probes = 2
n_potentials = 2
beta_n_boundary = 16
max_pairs = 20
"""


def config(tmp_path, text=SMALL, scenario=None, extra=""):
    p = tmp_path / "run.ini"
    head = "[scenario]\nname = %s\n%s\n" % (scenario, extra) if scenario else ""
    p.write_text(head + text)
    return str(p)


def run(tmp_path, *args, text=SMALL, scenario=None, extra="", out="out"):
    return cli.main(["--config", config(tmp_path, text, scenario, extra), "--out", str(tmp_path / out)] + list(args))


def _rows(path):
    with open(path) as fh:
        units = fh.readline()
        return units, list(csv.reader(fh))


def test_trace_zero_budget_gives_empty_path(tmp_path):
    assert run(tmp_path, "trace", "--t-max", "0") == cli.EXIT_OK
    units, rows = _rows(tmp_path / "out" / "path.csv")
    assert units.startswith("# units:")
    assert rows == [["t", "x", "y", "theta", "rho"]]
    rep = json.loads((tmp_path / "out" / "trace.json").read_text())
    assert rep["n_samples"] == 0 and rep["events"] == []


def test_trace_diameter(tmp_path):
    assert run(tmp_path, "trace", "--x", "-1", "--y", "0", "--theta", "0", "--t-max", "3") == cli.EXIT_OK
    _, rows = _rows(tmp_path / "out" / "path.csv")
    assert float(rows[-1][0]) == pytest.approx(2.0, abs=1e-9)
    rep = json.loads((tmp_path / "out" / "trace.json").read_text())
    assert rep["terminal"] == "exited"
    assert [e["kind"] for e in rep["events"]][-1] == "transversal_exit"


def test_lens_crescent_has_tangent_band(tmp_path):
    assert run(tmp_path, "lens", scenario="flat_crescent") == cli.EXIT_OK
    data = json.loads((tmp_path / "out" / "lens.json").read_text())
    rec = data["records"]
    t, tau = np.array(rec["t_plus"], float), np.array(rec["tau_plus"], float)
    assert np.any(t < tau - 1e-6)
    assert data["summary"]["hitting_match_fraction"] >= 0.99
    assert data["config"]["scenario"]["name"] == "flat_crescent"
    _, rows = _rows(tmp_path / "out" / "lens.csv")
    assert len(rows) == len(t) + 1


def test_xray_and_santalo_report(tmp_path):
    assert run(tmp_path, "xray", "--field", "one", "--field", "potential1") == cli.EXIT_OK
    _, rows = _rows(tmp_path / "out" / "xray.csv")
    assert rows[0] == ["component", "s", "alpha", "one", "potential1"]
    rep = json.loads((tmp_path / "out" / "santalo.json").read_text())
    assert rep["fields"]["one"]["relative_residual"] <= 1e-2
    assert rep["fields"]["potential1"]["max_abs"] <= 1e-6


def test_beta_report(tmp_path):
    assert run(tmp_path, "beta") == cli.EXIT_OK
    rep = json.loads((tmp_path / "out" / "beta_report.json").read_text())
    assert rep["symmetry_residual"] <= 1e-9
    assert rep["converged"] == rep["compared"] > 0


def test_scenarios_listing(tmp_path):
    assert run(tmp_path, "scenarios") == cli.EXIT_OK
    data = json.loads((tmp_path / "out" / "scenarios.json").read_text())
    names = [s["name"] for s in data["scenarios"]]
    assert "flat_disk" in names and "spherical_cap" in names


def test_verify_flat_disk_passes(tmp_path):
    assert run(tmp_path, "verify") == cli.EXIT_OK
    rep = json.loads((tmp_path / "out" / "verify.json").read_text())
    assert rep["all_passed"]
    assert {c["name"] for c in rep["checks"]} >= {"declared_facts", "lens_reversal", "santalo", "pestov_identity"}


def test_verify_reports_failures_with_exit_two(tmp_path):
    # below the equator the cap has no conjugate points, contradicting its declaration
    code = run(tmp_path, "verify", scenario="spherical_cap", extra="radius = 0.8")
    assert code == cli.EXIT_FAILURES
    rep = json.loads((tmp_path / "out" / "verify.json").read_text())
    failed = [c["name"] for c in rep["checks"] if not c["ok"]]
    assert failed == ["declared_facts"]


@pytest.mark.parametrize("text", [
    "[solver]\node_tol = -1\n",
    "[resolution]\nn_theta = 12\n",
    "[bogus]\nkey = 1\n",
    "[solver]\nfoo = 1\n",
    "[scenario]\nname = torus\n",
    "[scenario]\nname = flat_disk\nradius = big\n",
    "[scenario]\nname = flat_disk\nwidth = 2\n",
])
def test_bad_config_exits_one(tmp_path, text, capsys):
    assert run(tmp_path, "lens", text=text) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["--config", str(tmp_path / "nope.ini"), "scenarios"]) == cli.EXIT_CONFIG


def test_start_outside_domain_is_config_error(tmp_path):
    assert run(tmp_path, "trace", "--x", "2", "--y", "0", "--theta", "0") == cli.EXIT_CONFIG


def test_outputs_are_byte_identical_across_runs(tmp_path):
    out = tmp_path / "out"
    snaps = []
    for _ in range(2):
        assert run(tmp_path, "--seed", "3", "xray", "--field", "wave", "--field", "potential2") == cli.EXIT_OK
        assert run(tmp_path, "--seed", "3", "lens", scenario="flat_crescent") == cli.EXIT_OK
        snaps.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert set(snaps[0]) >= {"config.ini", "lens.json", "lens.csv", "xray.csv", "santalo.json"}
    assert snaps[0] == snaps[1]


def test_config_echo_round_trips(tmp_path):
    assert run(tmp_path, "--seed", "5", "scenarios") == cli.EXIT_OK
    cfg = cli.load_config(str(tmp_path / "out" / "config.ini"))
    assert cfg.seed == 5 and cfg.n_boundary == 32 and cfg.n_theta == 16
    assert cfg.out == str(tmp_path / "out")


def test_figures_written(tmp_path):
    pytest.importorskip("matplotlib")
    assert run(tmp_path, "--figures", "trace", "--x", "0", "--y", "0", "--theta", "1", "--t-max", "2") == 0
    assert run(tmp_path, "--figures", "lens", scenario="flat_crescent") == 0
    for name in ("trace.png", "lens.png"):
        data = (tmp_path / "out" / name).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
