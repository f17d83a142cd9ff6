"""Cell solves: closed forms, dense twins, conservation laws, cache I/O."""
import numpy as np
import pytest

import oracles
from eigenhom import cell
from eigenhom.coeff import make_family


@pytest.fixture(scope="module")
def trig2d_16():
    f = make_family("trig2d", (1.0,))
    return f, cell.solve_correctors(f, 16, tol=1e-12)


def test_identity_correctors_vanish():
    cs = cell.solve_correctors(make_family("identity", (2,)), 16)
    for c in cs.chi:
        assert np.all(c.values == 0.0)
    for row in cs.upsilon:
        for u in row:
            assert np.all(u.values == 0.0)
    for plane in cs.b:
        for row in plane:
            for bf in row:
                assert np.all(bf.values == 0.0)
    assert np.array_equal(cs.A_hat, np.eye(2))


def test_chi_closed_form_1d():
    cs = cell.solve_correctors(make_family("trig1d", (0.0,)), 256, tol=1e-12)
    y = np.arange(256) / 256
    assert np.abs(cs.chi[0].values - np.sin(2 * np.pi * y) / (4 * np.pi)).max() <= 1e-8


def test_homogenized_scalar_is_harmonic_mean_1d():
    for phi in (0.0, np.pi / 3, 2.1):
        cs = cell.solve_correctors(make_family("trig1d", (phi,)), 64, tol=1e-12)
        assert abs(cs.A_hat[0, 0] - 0.5) <= 1e-12


def test_upsilon_closed_form_1d():
    # with a(chi' + 1) = ahat the pointwise right side cancels, leaving
    # ups' = -chi, so ups = cos(2 pi y + phi) / (8 pi^2)
    for phi in (0.0, np.pi / 3):
        cs = cell.solve_correctors(make_family("trig1d", (phi,)), 256, tol=1e-12)
        y = np.arange(256) / 256
        exact = np.cos(2 * np.pi * y + phi) / (8 * np.pi ** 2)
        assert np.abs(cs.upsilon[0][0].values - exact).max() <= 1e-10


def test_chi_matches_dense_direct_solve(trig2d_16):
    f, cs = trig2d_16
    dchi = oracles.dense_chi(f, 16)
    for j in range(2):
        err = np.linalg.norm(cs.chi[j].values - dchi[j]) / np.linalg.norm(dchi[j])
        assert err <= 1e-10


def test_upsilon_matches_dense_direct_solve(trig2d_16):
    f, cs = trig2d_16
    dups = oracles.dense_upsilon(f, cs.chi, cs.A_hat, 16)
    for i in range(2):
        for j in range(2):
            err = np.linalg.norm(cs.upsilon[i][j].values - dups[i][j])
            assert err / np.linalg.norm(dups[i][j]) <= 1e-10


def test_flux_potentials_match_dense_construction(trig2d_16):
    f, cs = trig2d_16
    dbs = oracles.dense_flux_potentials(f, cs.chi, cs.A_hat, 16)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                ref = np.linalg.norm(dbs[i][j][k])
                err = np.linalg.norm(cs.b[i][j][k].values - dbs[i][j][k])
                assert err <= 1e-10 * max(ref, 1.0)


def test_homogenized_tensor_refinement_order():
    # contrast high enough that errors sit above the spectral floor
    f = make_family("trig2d", (1.9,))
    ref = cell.solve_correctors(f, 128, tol=1e-12).A_hat
    errs = [np.abs(cell.solve_correctors(f, N, tol=1e-12).A_hat - ref).max()
            for N in (16, 32, 64)]
    assert errs[0] > errs[1] > errs[2]
    for coarse, fine in zip(errs[:-1], errs[1:]):
        assert np.log2(coarse / fine) >= 2.0


def test_homogenized_tensor_spectral_floor_low_contrast():
    # at s=1 the N=32 tensor already agrees with N=256 to round-off
    f = make_family("trig2d", (1.0,))
    a32 = cell.solve_correctors(f, 32, tol=1e-12).A_hat
    a256 = cell.solve_correctors(f, 256, tol=1e-12).A_hat
    assert np.abs(a32 - a256).max() <= 1e-13


def test_voigt_reuss_bounds_isotropic():
    cases = [
        ("trig2d", (1.0,), 2),
        ("trig2d", (1.9,), 2),
        ("trig1d", (np.pi / 3,), 1),
    ]
    for name, params, d in cases:
        f = make_family(name, params)
        cs = cell.solve_correctors(f, 64, tol=1e-12)
        if d == 2:
            reuss = 1.0 / oracles.torus_quad_mean(
                lambda x, y: 1.0 / f.scalar(np.column_stack([x.ravel(), y.ravel()])).reshape(x.shape), 2)
            voigt = oracles.torus_quad_mean(
                lambda x, y: f.scalar(np.column_stack([x.ravel(), y.ravel()])).reshape(x.shape), 2)
        else:
            reuss = 1.0 / oracles.torus_quad_mean(lambda x: 1.0 / f.scalar(x[:, None]), 1)
            voigt = oracles.torus_quad_mean(lambda x: f.scalar(x[:, None]), 1)
        ev = np.linalg.eigvalsh(cs.A_hat)
        assert ev.min() >= reuss - 1e-10   # 1d ahat IS the harmonic mean
        assert ev.max() <= voigt + 1e-10


def test_voigt_reuss_frozen_interval():
    cs = cell.solve_correctors(make_family("trig2d", (1.0,)), 64, tol=1e-12)
    assert abs(cs.A_hat[0, 0] - 1.9353592348122906) < 1e-12
    assert 1.8636167832448971 < cs.A_hat[0, 0] < 2.0


def test_flux_antisymmetry_exact(trig2d_16):
    _, cs = trig2d_16
    for i in range(2):
        for j in range(2):
            for k in range(2):
                assert np.array_equal(cs.b[i][j][k].values, -cs.b[j][i][k].values)
        assert np.all(cs.b[i][i][0].values == 0.0)


def test_flux_divergence_identity_fine_grid():
    cs = cell.solve_correctors(make_family("trig2d", (1.0,)), 128, tol=1e-10)
    assert np.asarray(cs.residuals["b"]).max() <= 1e-8


def test_poisson_single_mode():
    y = np.arange(64) / 64
    u = cell.solve_poisson_periodic(np.sin(2 * np.pi * y), 64)
    assert np.abs(u.values - np.sin(2 * np.pi * y) / (4 * np.pi ** 2)).max() <= 1e-14


def test_poisson_rejects_nonzero_mean():
    with pytest.raises(ValueError, match="mean"):
        cell.solve_poisson_periodic(np.full((64,), 0.1) + np.sin(2 * np.pi * np.arange(64) / 64), 64)


def test_auxiliary_potential_closed_form_1d():
    cs = cell.solve_correctors(make_family("trig1d", (0.0,)), 256, tol=1e-12)
    y = np.arange(256) / 256
    exact = np.sin(2 * np.pi * y) / (16 * np.pi ** 3)
    assert np.abs(cs.bigB[0].values - exact).max() <= 1e-10
    assert np.asarray(cs.residuals["bigB"]).max() <= 1e-10


def test_mean_zero_gauge(trig2d_16):
    _, cs = trig2d_16
    tol = cs.tol
    fields = list(cs.chi) + [u for row in cs.upsilon for u in row] + list(cs.bigB)
    for f in fields:
        assert abs(f.values.mean()) <= 10 * tol


def test_grid_validation():
    f = make_family("trig2d", (1.0,))
    with pytest.raises(ValueError):
        cell.solve_chi(f, 12)
    with pytest.raises(ValueError):
        cell.solve_chi(f, 4)


def test_wrong_tensor_rejected_by_mean_check(trig2d_16):
    f, cs = trig2d_16
    with pytest.raises(ValueError, match="mean"):
        cell.solve_upsilon(f, cs.chi, cs.A_hat + 0.1, 16)
    with pytest.raises(ValueError, match="mean"):
        cell.solve_flux_potentials(f, cs.chi, cs.A_hat + 0.1, 16)


def test_tensor_grid_mismatch_rejected(trig2d_16):
    f, cs = trig2d_16
    with pytest.raises(ValueError, match="grid"):
        cell.homogenized_tensor(f, [
            cell.PeriodicField(np.zeros((32, 32))), cell.PeriodicField(np.zeros((16, 16)))])
    with pytest.raises(ValueError, match="grid"):
        cell.homogenized_tensor(f, cs.chi[:1])


def test_unreachable_tolerance_raises_with_residual():
    with pytest.raises(cell.CellSolveError) as exc:
        cell.solve_chi(make_family("trig2d", (1.0,)), 16, tol=0.0)
    assert exc.value.residual > 0.0


def test_cache_roundtrip_bitwise(tmp_path, trig2d_16):
    f, cs = trig2d_16
    p = tmp_path / "c.bin"
    cell.save_correctors(cs, p)
    back = cell.load_correctors(p, f)
    assert np.array_equal(back.A_hat, cs.A_hat)
    assert back.N == cs.N and back.dim == cs.dim and back.tol == cs.tol
    for a, b in zip(back.chi, cs.chi):
        assert np.array_equal(a.values, b.values)
    for i in range(2):
        for j in range(2):
            assert np.array_equal(back.upsilon[i][j].values, cs.upsilon[i][j].values)
            for k in range(2):
                assert np.array_equal(back.b[i][j][k].values, cs.b[i][j][k].values)
    for a, b in zip(back.bigB, cs.bigB):
        assert np.array_equal(a.values, b.values)


def test_cache_key_sensitivity():
    k = cell.cache_key("trig2d", (1.0,), 64, 1e-10)
    assert k != cell.cache_key("trig2d", (1.5,), 64, 1e-10)
    assert k != cell.cache_key("trig2d", (1.0,), 128, 1e-10)
    assert k != cell.cache_key("trig2d", (1.0,), 64, 1e-8)
    assert k == cell.cache_key("trig2d", (1.0,), 64, 1e-10)


def test_cache_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTACORR" + b"\x00" * 64)
    with pytest.raises(ValueError, match="cache"):
        cell.load_correctors(p, make_family("trig2d", (1.0,)))


def test_refined_keeps_original_nodes():
    rng = np.random.default_rng(11)
    vals = rng.standard_normal((8, 8))
    g = cell.PeriodicField(vals).refined(32)
    assert g.N == 32
    assert np.abs(g.values[::4, ::4] - vals).max() <= 1e-12


def test_refined_reproduces_band_limited_field():
    # low-pass field: any refinement grid must land on the closed form
    n = 8
    y = np.arange(n) / n
    Y1, Y2 = np.meshgrid(y, y, indexing="ij")
    form = lambda a, b: np.cos(2 * np.pi * a) * np.sin(4 * np.pi * b) \
        + 0.3 * np.sin(2 * np.pi * (a + b))
    f = cell.PeriodicField(form(Y1, Y2))
    for m in (20, 27, 64):
        z = np.arange(m) / m
        Z1, Z2 = np.meshgrid(z, z, indexing="ij")
        r = f.refined(m)
        assert np.abs(r.values - form(Z1, Z2)).max() <= 1e-12
        assert abs(r.mean() - f.mean()) <= 1e-13


def test_refined_1d_and_validation():
    n = 16
    y = np.arange(n) / n
    f = cell.PeriodicField(np.sin(2 * np.pi * y))
    r = f.refined(48)
    assert np.abs(r.values - np.sin(2 * np.pi * np.arange(48) / 48)).max() <= 1e-12
    assert f.refined(16).values is not f.values      # copy, not alias
    with pytest.raises(ValueError, match="coarser"):
        f.refined(8)
