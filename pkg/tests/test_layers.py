"""Boundary-layer solves, the eps-ladder limit, and oscillating Neumann data."""

import numpy as np
import pytest

from eigenhom import cell, fem, layers, oracle1d
from eigenhom.coeff import make_family
from eigenhom.meshing import Domain, mesh_domain


@pytest.fixture(scope="module")
def trig2d():
    return make_family("trig2d", (1.0,))


@pytest.fixture(scope="module")
def correctors2d(trig2d):
    return cell.solve_correctors(trig2d, 32, tol=1e-12)


@pytest.fixture(scope="module")
def correctors_id():
    return cell.solve_correctors(make_family("identity", (2,)), 8)


@pytest.fixture(scope="module")
def disk_sys(trig2d):
    mesh = mesh_domain(Domain("disk", (1.0,)), 1.0 / 64)
    return fem.assemble(trig2d, mesh, eps=0.125, bc="dirichlet")


def _radial_gradient(mesh):
    # grad of u0 = 1 - r^2
    return -2.0 * mesh.vertices


# ---------------------------------------------------------------------------
# first- and second-order layer solves
# ---------------------------------------------------------------------------

def test_v1_identity_correctors_vanish(correctors_id, disk_sys):
    sol = layers.v1_eps(None, correctors_id, 0.125, _radial_gradient(disk_sys.mesh),
                        disk_sys.mesh, system=disk_sys)
    assert np.max(np.abs(sol.boundary_data)) == 0.0
    assert np.max(np.abs(sol.values)) <= 1e-14


def test_v2_identity_correctors_vanish(correctors_id, disk_sys):
    n = disk_sys.mesh.n_vertices
    H = np.tile(np.eye(2), (n, 1, 1))
    sol = layers.v2_eps(None, correctors_id, 0.125, H, disk_sys.mesh,
                        system=disk_sys)
    assert np.max(np.abs(sol.values)) <= 1e-14


def test_v1_matches_its_boundary_data(correctors2d, disk_sys):
    sol = layers.v1_eps(None, correctors2d, 0.125, _radial_gradient(disk_sys.mesh),
                        disk_sys.mesh, system=disk_sys)
    b = disk_sys.mesh.boundary_indices()
    assert np.max(np.abs(sol.values[b] - sol.boundary_data)) <= 1e-14
    assert sol.residual <= 1e-10
    assert np.max(np.abs(sol.boundary_data)) > 1e-3   # data is genuinely active


def test_v1_interior_bounded_by_data(correctors2d, disk_sys):
    # harmonic-type stability: no interior blow-up beyond the data scale
    sol = layers.v1_eps(None, correctors2d, 0.125, _radial_gradient(disk_sys.mesh),
                        disk_sys.mesh, system=disk_sys)
    assert np.max(np.abs(sol.values)) <= 1.2 * np.max(np.abs(sol.boundary_data))


def test_v1_linear_in_the_gradient(correctors2d, disk_sys):
    mesh = disk_sys.mesh
    ga = _radial_gradient(mesh)
    gb = np.stack([mesh.vertices[:, 1], mesh.vertices[:, 0]], axis=1)
    va = layers.v1_eps(None, correctors2d, 0.125, ga, mesh, system=disk_sys)
    vb = layers.v1_eps(None, correctors2d, 0.125, gb, mesh, system=disk_sys)
    vab = layers.v1_eps(None, correctors2d, 0.125, ga + gb, mesh, system=disk_sys)
    assert np.max(np.abs(vab.values - va.values - vb.values)) <= 1e-11


def test_v1_accepts_boundary_only_gradient(correctors2d, disk_sys):
    mesh = disk_sys.mesh
    g = _radial_gradient(mesh)
    full = layers.v1_eps(None, correctors2d, 0.125, g, mesh, system=disk_sys)
    only = layers.v1_eps(None, correctors2d, 0.125, g[mesh.boundary_indices()],
                         mesh, system=disk_sys)
    assert np.array_equal(full.values, only.values)


def test_v1_rejects_bad_gradient_shape(correctors2d, disk_sys):
    with pytest.raises(ValueError, match="shape"):
        layers.v1_eps(None, correctors2d, 0.125, np.zeros(7), disk_sys.mesh,
                      system=disk_sys)


def test_v2_rejects_gradient_shaped_input(correctors2d, disk_sys):
    with pytest.raises(ValueError, match="shape"):
        layers.v2_eps(None, correctors2d, 0.125,
                      _radial_gradient(disk_sys.mesh), disk_sys.mesh,
                      system=disk_sys)


def test_layer_solve_needs_eps_scale_system(correctors2d, trig2d):
    mesh = mesh_domain(Domain("disk", (1.0,)), 0.1)
    plain = fem.assemble(None, mesh, bc="dirichlet")
    with pytest.raises(ValueError, match="eps"):
        layers.v1_eps(None, correctors2d, 0.125, np.zeros((mesh.n_vertices, 2)),
                      mesh, system=plain)


# ---------------------------------------------------------------------------
# eps-ladder limit of the layer image
# ---------------------------------------------------------------------------

def _ladder_systems(field, eps_list):
    out = []
    for eps in eps_list:
        mesh = mesh_domain(Domain("disk", (1.0,)), eps / 8.0)
        out.append(fem.assemble(field, mesh, eps=eps, bc="dirichlet"))
    return out


def test_kbl_ladder_converges(trig2d, correctors2d):
    systems = _ladder_systems(trig2d, (0.25, 0.125, 0.0625))
    g_mesh = systems[-1].mesh
    est = layers.estimate_Kbl(systems, correctors2d,
                              _radial_gradient(g_mesh), g_mesh)
    for s in systems:
        s.release()
    assert est.converged
    assert est.error_bound == est.diffs[-1]
    assert est.error_bound < est.diffs[0]
    assert 0.2 <= est.slope <= 1.2          # layer remainder decays like ~sqrt(eps)
    assert est.mesh is g_mesh


def test_kbl_ladder_validation(trig2d, correctors2d):
    systems = _ladder_systems(trig2d, (0.25, 0.125))
    g = np.zeros((systems[-1].mesh.n_vertices, 2))
    with pytest.raises(ValueError, match="3 levels"):
        layers.estimate_Kbl(systems, correctors2d, g, systems[-1].mesh)
    with pytest.raises(ValueError, match="descending"):
        layers.estimate_Kbl(systems[::-1] + [systems[0]], correctors2d,
                            g, systems[0].mesh)
    for s in systems:
        s.release()


def test_kbl_1d_limit_is_the_connecting_line():
    # dual route: the eps-ladder limit against the closed-form line
    case = oracle1d.Oracle1DCase("trig1d", phi=np.pi / 3)
    field = make_family("trig1d", (np.pi / 3,))
    cs = cell.solve_correctors(field, 64, tol=1e-12)
    systems = []
    for eps in (0.25, 0.125, 0.0625, 0.03125):
        mesh = mesh_domain(Domain("interval", (0.0, 1.0)), eps / 16.0)
        systems.append(fem.assemble(field, mesh, eps=eps, bc="dirichlet"))
    fine = systems[-1].mesh
    grad = case.dphi0(fine.vertices[:, 0], 1)[:, None]
    est = layers.estimate_Kbl(systems, cs, grad, fine)
    for s in systems:
        s.release()
    kbl = oracle1d.kbl_exact(case, 1)
    ref = kbl(fine.vertices[:, 0])
    err = np.max(np.abs(est.values - ref))
    assert est.converged
    assert err <= 0.05 * np.max(np.abs(ref))
    assert err <= 4.0 * (est.error_bound + 1e-3)


# ---------------------------------------------------------------------------
# oscillating Neumann data
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def neumann_sys(trig2d):
    mesh = mesh_domain(Domain("disk", (1.0,)), 1.0 / 64)
    return fem.assemble(trig2d, mesh, eps=0.125, bc="neumann")


def test_neumann_data_compatible_and_solvable(neumann_sys, correctors2d):
    mesh = neumann_sys.mesh
    nd = layers.neumann_data(neumann_sys, correctors2d, _radial_gradient(mesh))
    assert nd.compat_defect <= 1e-12
    assert nd.boundary_l2 > 0.0
    u = neumann_sys.solve_load(nd.load, compat_tol=1e-8)
    m1 = neumann_sys.mass_times_one
    assert abs(m1 @ u) / np.sqrt(u @ (neumann_sys.M_full @ u)) <= 1e-9


def test_neumann_load_lives_on_the_ring(neumann_sys, correctors2d):
    mesh = neumann_sys.mesh
    nd = layers.neumann_data(neumann_sys, correctors2d, _radial_gradient(mesh))
    off_ring = np.setdiff1d(np.arange(mesh.n_vertices), nd.ring)
    assert np.all(nd.load[off_ring] == 0.0)
    assert len(nd.s) == len(nd.ring)


def test_neumann_data_validation(neumann_sys, correctors2d, trig2d):
    with pytest.raises(ValueError, match=r"\(n, 2\)"):
        layers.neumann_data(neumann_sys, correctors2d, np.zeros(5))
    mesh = neumann_sys.mesh
    plain = fem.assemble(None, mesh, bc="neumann")
    with pytest.raises(ValueError, match="eps"):
        layers.neumann_data(plain, correctors2d,
                            np.zeros((mesh.n_vertices, 2)))
    plain.release()
