"""Assembly, source solves, two-scale interpolation, gradient recovery."""
import numpy as np
import pytest

from eigenhom import fem
from eigenhom.cell import PeriodicField
from eigenhom.coeff import make_family
from eigenhom.meshing import Domain, mesh_domain


@pytest.fixture(scope="module")
def disk_mesh():
    return mesh_domain(Domain("disk", (1.0,)), 0.1)


def test_patch_test_linear_reproduction(disk_mesh):
    # P1 with exact linear boundary data reproduces u = x1
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    u = sys_.solve_source(dirichlet_data=lambda p: p[:, 0])
    assert np.abs(u - disk_mesh.vertices[:, 0]).max() <= 1e-10


def test_zero_data_zero_solution(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    u = sys_.solve_source()
    assert np.all(u == 0.0)


def test_disk_poisson_center_value():
    # -Lap u = 1, zero data: u = (1 - r^2)/4, so u(0) = 1/4
    m = mesh_domain(Domain("disk", (1.0,)), 0.05)
    sys_ = fem.assemble(np.eye(2), m, bc="dirichlet")
    u = sys_.solve_source(rhs=lambda p: np.ones(len(p)))
    i0 = np.argmin(np.hypot(m.vertices[:, 0], m.vertices[:, 1]))
    assert abs(u[i0] - 0.25) <= 0.01


def test_oscillating_assembly_invariants(disk_mesh):
    f = make_family("trig2d", (1.0,))
    m = mesh_domain(Domain("disk", (1.0,)), 1 / 64)
    sys_ = fem.assemble(f, m, eps=1 / 8, bc="dirichlet")
    rep = sys_.verify()
    Knorm = max(np.abs(sys_.K_full.data).max(), 1.0)
    assert rep["symmetry_defect"] <= 1e-12 * Knorm
    assert rep["mass_spd"]
    assert sys_.n_unknowns == int((~m.boundary).sum())


def test_resolution_rule_enforced(disk_mesh):
    f = make_family("trig2d", (1.0,))
    with pytest.raises(ValueError, match="use h <="):
        fem.assemble(f, disk_mesh, eps=1 / 8)
    with pytest.raises(ValueError, match="quadrature"):
        fem.assemble(f, mesh_domain(Domain("disk", (1.0,)), 1 / 64),
                     eps=1 / 8, quad=2)


def test_solve_reports_small_residual(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    u, info = sys_.solve_source(rhs=lambda p: p[:, 0] * p[:, 1],
                                return_info=True)
    assert info["residual"] <= 1e-10


def test_neumann_invariants(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="neumann")
    rep = sys_.verify()
    assert rep["constant_annihilation"] <= 1e-12
    # compatible data (odd function integrates to zero on the disk)
    u, info = sys_.solve_source(rhs=lambda p: p[:, 0], return_info=True,
                                compat_tol=1e-8)
    assert abs(sys_.inner_l2(u, np.ones(len(u)))) <= 1e-9
    assert info["compat_defect"] <= 1e-8


def test_neumann_incompatible_data_flagged(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="neumann")
    with pytest.raises(fem.FemSolveError, match="incompatible"):
        sys_.solve_source(rhs=lambda p: np.ones(len(p)), compat_tol=1e-8)
    with pytest.raises(ValueError, match="Neumann"):
        sys_.solve_source(dirichlet_data=lambda p: p[:, 0])


def test_nodal_and_callable_sources_agree(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    f = lambda p: np.exp(-((p - 0.2) ** 2).sum(axis=1))
    ua = sys_.solve_source(rhs=f)
    ub = sys_.solve_source(rhs=f(disk_mesh.vertices))
    # nodal path replaces f by its interpolant: O(h^2) apart, not equal
    assert np.abs(ua - ub).max() <= 5e-3
    assert np.abs(ua - ub).max() > 0.0


def test_bad_shapes_rejected(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    with pytest.raises(ValueError, match="shape"):
        sys_.solve_source(rhs=np.ones(7))
    with pytest.raises(ValueError, match="shape"):
        sys_.solve_load(np.ones(7))


def test_two_scale_interpolation_single_mode(disk_mesh):
    N = 64
    y = np.arange(N) / N
    vals = np.sin(2 * np.pi * y)[:, None] * np.ones(N)[None, :]
    pf = PeriodicField(vals)
    eps = 0.25
    got = fem.interpolate_two_scale(disk_mesh, pf, eps)
    want = np.sin(2 * np.pi * disk_mesh.vertices[:, 0] / eps)
    assert np.abs(got - want).max() <= 1e-8

    got2, grads = fem.interpolate_two_scale(disk_mesh, pf, eps, gradient=True)
    want_g0 = (2 * np.pi / eps) * np.cos(2 * np.pi * disk_mesh.vertices[:, 0] / eps)
    assert np.abs(grads[:, 0] - want_g0).max() <= 1e-6
    assert np.abs(grads[:, 1]).max() <= 1e-8


def test_two_scale_constant_field(disk_mesh):
    pf = PeriodicField(np.full((16, 16), 3.25))
    vals, grads = fem.interpolate_two_scale(disk_mesh, pf, 0.125, gradient=True)
    assert np.abs(vals - 3.25).max() <= 1e-12
    assert np.abs(grads).max() <= 1e-12


def test_gradient_recovery_exact_for_linears(disk_mesh):
    u = 2.0 * disk_mesh.vertices[:, 0] - 0.5 * disk_mesh.vertices[:, 1]
    cg = fem.cell_gradients(disk_mesh, u)
    assert np.abs(cg - [2.0, -0.5]).max() <= 1e-12
    ng = fem.recover_gradient(disk_mesh, u)
    assert np.abs(ng - [2.0, -0.5]).max() <= 1e-10


def test_h1_seminorm_of_linear(disk_mesh):
    u = disk_mesh.vertices[:, 0]
    want = np.sqrt(disk_mesh.areas().sum())
    assert abs(fem.h1_seminorm(disk_mesh, u) - want) <= 1e-12


def test_transfer_linear_between_meshes():
    coarse = mesh_domain(Domain("disk", (1.0,)), 0.2)
    fine = mesh_domain(Domain("disk", (1.0,)), 0.1)
    vals = coarse.vertices[:, 0]
    got = fem.transfer(coarse, vals, fine)
    err = np.abs(got - fine.vertices[:, 0])
    assert err[~fine.boundary].max() <= 1e-10
    assert err.max() <= coarse.h ** 2      # chordal deficit on the rim


def test_solves_deterministic(disk_mesh):
    f = make_family("trig2d", (1.0,))
    m = mesh_domain(Domain("disk", (1.0,)), 1 / 32)
    r = []
    for _ in range(2):
        sys_ = fem.assemble(f, m, eps=0.25, bc="dirichlet")
        r.append(sys_.solve_source(rhs=lambda p: np.cos(p[:, 0])))
        sys_.release()
    assert np.array_equal(r[0], r[1])


def test_release_frees_factorization(disk_mesh):
    sys_ = fem.assemble(np.eye(2), disk_mesh, bc="dirichlet")
    sys_.solve_source(rhs=lambda p: np.ones(len(p)))
    assert sys_._lu is not None
    sys_.release()
    assert sys_._lu is None
    # factor rebuilds transparently on the next solve
    u = sys_.solve_source(rhs=lambda p: np.ones(len(p)))
    assert np.isfinite(u).all()


def test_flux_load_matches_stiffness_action(disk_mesh):
    # the flux of a P1 field under the assembly coefficient must give
    # exactly K @ u: both sides use the same quadrature average per cell
    field = make_family("trig2d", (1.0,))
    eps = 1.0
    sys_ = fem.assemble(field, disk_mesh, eps=eps, bc="dirichlet", quad=4)
    rng = np.random.default_rng(3)
    u = rng.standard_normal(disk_mesh.n_vertices)
    gc = fem.cell_gradients(disk_mesh, u)

    def flux(x, sl, shp):
        tc, nq = x.shape[:2]
        a = field.scalar((x / eps).reshape(-1, 2)).reshape(tc, nq)
        return a[:, :, None] * np.broadcast_to(gc[sl][:, None, :], x.shape)

    load = fem.flux_load_vector(disk_mesh, flux, quad=4)
    ref = sys_.K_full @ u
    assert np.abs(load - ref).max() <= 1e-12 * np.abs(ref).max()


def test_flux_load_rejects_bad_shape(disk_mesh):
    with pytest.raises(ValueError, match="flux returned"):
        fem.flux_load_vector(disk_mesh, lambda x, sl, shp: x[..., 0])
