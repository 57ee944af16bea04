import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geotomo import fiberspace as FS
from geotomo import scenarios as S
from geotomo.metric import ChartDomainError

DISK = S.get("flat_disk")
HYP = S.get("hyperbolic_patch")
GRID = FS.make_grid(DISK.domain, 32, 16)
HGRID = FS.make_grid(HYP.domain, 32, 16)


def fiber(grid, f):
    return FS.FiberFunction.from_function(grid, f)


def _inner(grid, arr):
    sel = grid.mask & np.all(np.isfinite(arr), axis=-1)
    return arr[sel]


def test_theta_count_must_be_power_of_two():
    with pytest.raises(FS.ConfigurationError):
        FS.make_grid(DISK.domain, 32, 12)


def test_insufficient_margin_is_rejected():
    g = FS.make_grid(DISK.domain, 32, 8, margin_cells=1)
    with pytest.raises(ChartDomainError):
        FS.apply_X(DISK.metric, fiber(g, lambda x, y, t: x))


def test_constants_are_killed():
    u = fiber(HGRID, lambda x, y, t: 2.5 + 0 * x)
    for op in (lambda u: FS.apply_X(HYP.metric, u), FS.apply_V, lambda u: FS.apply_Xperp(HYP.metric, u)):
        assert np.max(np.abs(_inner(HGRID, op(u).values))) <= 1e-12


def test_angular_momentum_is_conserved():
    u = fiber(GRID, lambda x, y, t: x * np.sin(t) - y * np.cos(t))
    assert np.max(np.abs(_inner(GRID, FS.apply_X(DISK.metric, u).values))) <= 1e-12


def test_V_on_single_mode():
    k = 3
    u = fiber(GRID, lambda x, y, t: np.exp(1j * k * t) * (1 + x * y))
    assert np.allclose(FS.apply_V(u).values, 1j * k * u.values, atol=1e-12)


def test_fourier_examples():
    m = FS.fourier_decompose(fiber(GRID, lambda x, y, t: np.cos(t) + 0 * x))
    assert np.allclose(m.mode(1), 0.5) and np.allclose(m.mode(-1), 0.5)
    assert np.allclose(m.mode(0), 0.0, atol=1e-15)
    one = FS.fourier_decompose(fiber(GRID, lambda x, y, t: 1.0 + 0 * x))
    assert np.allclose(one.mode(0), 1.0)
    assert set(one.as_dict()) == set(range(-7, 8))


def test_hilbert_examples():
    one = fiber(GRID, lambda x, y, t: 1.0 + 0 * x)
    c = fiber(GRID, lambda x, y, t: np.cos(t) + 0 * x)
    assert np.max(np.abs(FS.hilbert_transform(one).values)) <= 1e-15
    assert np.allclose(FS.hilbert_transform(c).values, np.sin(GRID.thetas), atol=1e-14)
    assert np.max(np.abs(FS.hilbert_transform(c, "even").values)) <= 1e-15
    with pytest.raises(ValueError):
        FS.hilbert_transform(c, "both")


def _random_real(seed):
    rng = np.random.default_rng(seed)
    return FS.FiberFunction(GRID, rng.normal(size=GRID.shape))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_fourier_round_trip_and_reality(seed):
    u = _random_real(seed)
    modes = FS.fourier_decompose(u)
    back = FS.fourier_resum(modes)
    assert back.is_real
    assert np.max(np.abs(back.values - u.values)) <= 1e-12
    n = GRID.n_theta
    for k in range(1, n // 2):
        assert np.max(np.abs(np.conj(modes.mode(k)) - modes.mode(-k))) <= 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_hilbert_squares_to_minus_identity(seed):
    # band-limit first: the Nyquist mode is not resolved by the multiplier
    u = FS.parity_part(_random_real(seed), "even") + FS.parity_part(_random_real(seed + 1), "odd")
    hh = FS.hilbert_transform(FS.hilbert_transform(u))
    u0 = FS.zero_mode(u)[..., None]
    assert np.max(np.abs(hh.values + (u.values - u0))) <= 1e-10


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_V_acts_diagonally_on_modes(seed):
    u = _random_real(seed)
    mv = FS.fourier_decompose(FS.apply_V(u))
    mu = FS.fourier_decompose(u)
    for k in range(-7, 8):
        assert np.max(np.abs(mv.mode(k) - 1j * k * mu.mode(k))) <= 1e-10


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_operators_preserve_reality(seed):
    u = FS.random_probe(HGRID, seed)
    outs = [FS.apply_X(HYP.metric, u), FS.apply_V(u), FS.apply_Xperp(HYP.metric, u),
            FS.hilbert_transform(u), FS.hilbert_transform(u, "odd"), FS.parity_part(u, "even")]
    assert all(o.is_real for o in outs)


def test_save_load_round_trip(tmp_path):
    u = FS.random_probe(GRID, 4)
    FS.save_fiber(tmp_path / "u.bin", u)
    v = FS.load_fiber(tmp_path / "u.bin")
    assert np.array_equal(v.values, u.values)
    assert np.array_equal(v.grid.mask, GRID.mask)
    assert np.allclose(v.grid.xs, GRID.xs, atol=1e-14) and v.grid.n_theta == GRID.n_theta
    w = FS.FiberFunction(GRID, u.values * (1 + 2j))
    FS.save_fiber(tmp_path / "w.bin", w)
    assert np.array_equal(FS.load_fiber(tmp_path / "w.bin").values, w.values)


def test_harmonic_extension_examples():
    X, Y = GRID.mesh2()
    ins = GRID.mask
    one = FS.harmonic_extension(DISK.metric, DISK.domain, lambda x, y: 1.0 + 0 * x, GRID)
    assert np.max(np.abs(one[ins] - 1)) <= 1e-12
    assert np.all(np.isnan(one[~ins]))
    lin = FS.harmonic_extension(DISK.metric, DISK.domain, lambda x, y: x, GRID)
    assert np.max(np.abs(lin[ins] - X[ins])) <= 1e-12
    quad = FS.harmonic_extension(DISK.metric, DISK.domain, lambda x, y: x * x - y * y, GRID)
    # the stencil is exact on quadratics
    assert np.max(np.abs(quad[ins] - (X * X - Y * Y)[ins])) <= 1e-12


def test_harmonic_extension_boundary_samples():
    c = DISK.domain.components[0]
    s = np.linspace(0, c.length, 400, endpoint=False)
    x, y = c.point(s)
    f = FS.boundary_samples_function(DISK.domain, np.zeros(s.size, int), s, x * y)
    u = FS.harmonic_extension(DISK.metric, DISK.domain, f, GRID)
    X, Y = GRID.mesh2()
    assert np.nanmax(np.abs(u - X * Y)) <= 1e-4


def test_holomorphic_examples():
    m, d = DISK.metric, DISK.domain
    assert FS.holomorphic_residual(m, d, lambda x, y: x, lambda x, y: -y, GRID) <= 1e-12
    assert FS.holomorphic_residual(m, d, lambda x, y: x, lambda x, y: y, GRID) == pytest.approx(np.sqrt(2), rel=1e-6)
    assert FS.holomorphic_residual(m, d, lambda x, y: x * x - y * y, lambda x, y: -2 * x * y, GRID) <= 1e-12


def test_pestov_uhlmann_examples():
    u = fiber(GRID, lambda x, y, t: 3.0 + 0 * x)
    assert FS.pestov_uhlmann_residual(DISK.metric, DISK.domain, u).sup <= 1e-14
    w = fiber(GRID, lambda x, y, t: x * x * np.cos(2 * t))
    assert FS.pestov_uhlmann_residual(DISK.metric, DISK.domain, w).sup <= 1e-12


@pytest.mark.parametrize("sc", [DISK, HYP], ids=lambda s: s.name)
@pytest.mark.parametrize("seed", range(10))
def test_pestov_uhlmann_on_random_probes(sc, seed):
    # the discrete operators satisfy the relation to round-off at every resolution
    for n in (32, 64):
        g = FS.make_grid(sc.domain, n, 16)
        r = FS.pestov_uhlmann_residual(sc.metric, sc.domain, FS.random_probe(g, seed))
        assert r.sup <= 1e-12 and r.l2 <= 1e-12


def _cutoff(sc, g):
    X, Y = g.mesh2()
    return FS.interior_cutoff(sc.domain, X, Y, 0.3 * float(sc.domain.rho(0.0, 0.0)))


def test_pestov_identity_zero_and_precondition():
    assert FS.pestov_identity_residual(DISK.metric, DISK.domain, FS.FiberFunction(GRID, np.zeros(GRID.shape))) == 0.0
    with pytest.raises(FS.PreconditionError):
        FS.pestov_identity_residual(DISK.metric, DISK.domain, fiber(GRID, lambda x, y, t: np.cos(t) + 0 * x))


def test_pestov_identity_flat_bump():
    for n in (32, 64):
        g = FS.make_grid(DISK.domain, n, 16)
        X, Y, T = g.mesh()
        u = FS.FiberFunction(g, _cutoff(DISK, g)[..., None] * np.cos(T))
        assert abs(FS.pestov_identity_residual(DISK.metric, DISK.domain, u)) <= 1e-12


@pytest.mark.parametrize("seed", [0, 1])
def test_pestov_identity_hyperbolic_converges(seed):
    res = []
    for n in (32, 64):
        g = FS.make_grid(HYP.domain, n, 16)
        u = FS.random_probe(g, seed, cutoff=_cutoff(HYP, g))
        res.append(abs(FS.pestov_identity_residual(HYP.metric, HYP.domain, u)))
    assert res[1] <= 1e-4
    assert res[0] / res[1] >= 4  # at least second order


def test_structure_residuals():
    u = fiber(HGRID, lambda x, y, t: 1.0 + 0 * x)
    r = FS.structure_residuals(HYP.metric, u)
    assert max(r.values()) <= 1e-12
    flat = FS.structure_residuals(DISK.metric, FS.random_probe(GRID, 7))
    assert max(flat.values()) <= 1e-11
    sups = []
    for n in (32, 64):
        g = FS.make_grid(HYP.domain, n, 16)
        s = FS.structure_residuals(HYP.metric, FS.random_probe(g, 7))
        assert s["r1_sup"] <= 1e-11
        sups.append(s["r2_sup"])
    assert sups[0] / sups[1] >= 12  # fourth order


def test_transport_first_integral_is_constant_along_flow():
    g = FS.make_grid(DISK.domain, 32, 8)
    w = FS.transport_first_integral(DISK.metric, DISK.domain, g, lambda c, s, a: np.cos(s) * np.cos(a))
    Xw = FS.apply_X(DISK.metric, w).values
    vals = Xw[np.isfinite(Xw)]
    assert vals.size > 100
    assert np.median(np.abs(vals)) <= 1e-6
