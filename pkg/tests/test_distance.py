import csv
import functools

import numpy as np
import pytest

from geotomo import distance as D
from geotomo import metric as M
from geotomo import scenarios as S

GRID = 200


@functools.lru_cache(maxsize=None)
def graph(name):
    sc = S.get(name)
    return D.GridGraph(sc.metric, sc.domain, GRID)


@functools.lru_cache(maxsize=None)
def beta_table(name, n=16):
    sc = S.get(name)
    return D.build_beta_table(sc.metric, sc.domain, n, graph=graph(name))


def _dist(name, a, b):
    sc = S.get(name)
    return D.boundary_distance(sc.metric, sc.domain, a, b, graph=graph(name))


@pytest.mark.parametrize("phi", [0.3, 1.0, 2.0, np.pi])
def test_disk_chord_length(phi):
    beta, path = _dist("flat_disk", (1.0, 0.0), (np.cos(phi), np.sin(phi)))
    assert beta == pytest.approx(2 * np.sin(phi / 2), rel=1e-3)
    assert np.allclose(path[0], [1.0, 0.0]) and np.allclose(path[-1], [np.cos(phi), np.sin(phi)])


def test_same_point_is_zero():
    beta, _ = _dist("flat_disk", (0.0, 1.0), (0.0, 1.0))
    assert beta == 0.0


def _taut_string(a, b, c, r):
    """Length of the shortest path from a to b wrapping the near side of the disk (c, r)."""
    a, b, c = map(np.asarray, (a, b, c))
    ta, tb = np.linalg.norm(a - c), np.linalg.norm(b - c)
    pa = np.arctan2(*(a - c)[::-1])
    pb = np.arctan2(*(b - c)[::-1])
    span = np.mod(pb - pa, 2 * np.pi)  # counterclockwise from a to b, through angle pi here
    arc = span - np.arccos(r / ta) - np.arccos(r / tb)
    return np.sqrt(ta ** 2 - r ** 2) + np.sqrt(tb ** 2 - r ** 2) + r * arc


def test_crescent_taut_string_around_hole():
    a = (np.cos(0.5), np.sin(0.5))
    b = (np.cos(0.5), -np.sin(0.5))
    beta, path = _dist("flat_crescent", a, b)
    ref = _taut_string(a, b, (0.9, 0.0), 0.35)
    chord = 2 * np.sin(0.5)
    assert beta > chord + 0.1
    assert beta == pytest.approx(ref, rel=1e-3)
    sc = S.get("flat_crescent")
    assert np.min(sc.domain.rho(path[:, 0], path[:, 1])) >= -1e-9


@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch", "flat_crescent"])
def test_beta_table_consistency(name):
    T = beta_table(name)
    assert T.symmetry_residual() <= 1e-6
    assert T.triangle_violation() <= 1e-6
    assert np.all(np.diag(T.beta) == 0)


def test_beta_table_csv(tmp_path):
    T = beta_table("flat_disk")
    T.write_csv(tmp_path / "beta.csv")
    with open(tmp_path / "beta.csv") as fh:
        assert fh.readline().startswith("# units:")
        rows = list(csv.reader(fh))
    assert rows[0] == ["component_a", "s_a", "component_b", "s_b", "beta", "smooth_flag"]
    assert len(rows) == len(T) ** 2 + 1


def test_arc_length_disk():
    T = beta_table("flat_disk")
    arc = D.boundary_metric_from_beta(T, 0, 0.3, 1.3)
    assert arc.value == pytest.approx(1.0, abs=1e-3)
    assert arc.consistent and np.all(np.diff(arc.partial_sums) >= 0)
    k = np.arange(len(arc.partial_sums))
    # partition sums of the unit circle: 2^k * 2 sin(phi / 2^(k+1))
    assert np.allclose(arc.partial_sums, 2 ** k * 2 * np.sin(1.0 / 2 ** (k + 1)), rtol=1e-3)


def test_arc_length_empty():
    assert D.boundary_metric_from_beta(beta_table("flat_disk"), 0, 0.7, 0.7).value == 0.0


def test_arc_length_hyperbolic_patch():
    sc = S.get("hyperbolic_patch")
    T = beta_table("hyperbolic_patch")
    arc = D.boundary_metric_from_beta(T, 0, 0.1, 0.6)
    ref = M.boundary_g_length(sc.metric, sc.domain, 0, 0.1, 0.6)
    assert arc.value == pytest.approx(ref, rel=1e-3)


def _pair(T, i, j):
    lens = D.lens_from_beta(T.m, T.d, T)
    k = np.nonzero((lens.i == i) & (lens.j == j))[0]
    assert k.size == 1
    return lens, k[0]


def test_antipodal_pair_leaves_along_normal():
    T = beta_table("flat_disk")
    n = len(T)
    lens, k = _pair(T, 0, n // 2)
    assert abs(T.grad_a[0, n // 2]) <= 1e-6
    assert abs(D._wrap(lens.theta[k] - np.pi)) <= 1e-6
    assert lens.t_plus[k] == pytest.approx(2.0, rel=1e-3)


def test_quarter_pair_chord_direction():
    T = beta_table("flat_disk")
    n = len(T)
    lens, k = _pair(T, 0, n // 4)
    # chord from (1, 0) to (0, 1)
    assert abs(D._wrap(lens.theta[k] - 3 * np.pi / 4)) <= 1e-3
    assert abs(D._wrap(lens.theta_out[k] - 3 * np.pi / 4)) <= 1e-3


def test_reconstruction_matches_flow():
    sc = S.get("flat_disk")
    T = beta_table("flat_disk")
    lens = D.lens_from_beta(sc.metric, sc.domain, T)
    rep = D.compare_with_flow(sc.metric, sc.domain, T, lens)
    assert lens.i.size > 100 and rep["converged"].all()
    assert np.max(rep["angle_in"]) <= 1e-3 and np.max(rep["angle_out"]) <= 1e-3
    assert np.max(rep["time"]) <= 1e-3


@pytest.mark.parametrize("name", ["flat_disk", "hyperbolic_patch"])
def test_minimizers_are_fan_geodesics(name):
    sc = S.get(name)
    fan = D.fan_from_boundary(sc.domain, 0, 0.4, 9)
    rep = D.minimizer_is_geodesic_check(sc.metric, sc.domain, fan, graph=graph(name), diameter=sc.diameter)
    assert rep["n_checked"] == 9
    assert rep["violations"] == []
    # beta is a lower bound for every joining geodesic
    assert rep["min_excess"] >= -1e-3


def test_sphere_past_conjugate_point_is_not_minimizing():
    sc = S.get("spherical_cap")
    fan = D.fan_from_boundary(sc.domain, 0, 0.0, 3, margin=0.3)
    rep = D.minimizer_is_geodesic_check(sc.metric, sc.domain, fan, grid_n=120, diameter=sc.diameter)
    assert rep["n_checked"] == 3
    assert len(rep["violations"]) >= 1
    assert np.nanmax(rep["tau"]) > np.pi
