"""Exact 1D reference pipeline: transfer-matrix eigenpairs and closed forms."""

import numpy as np
import pytest

from eigenhom import oracle1d
from eigenhom.oracle1d import Oracle1DCase, eigen_exact_eps, expansion_residuals_1d


def _slope(eps, vals):
    return float(np.polyfit(np.log(eps), np.log(vals), 1)[0])


# ---------------------------------------------------------------------------
# constant coefficient: everything is known in closed form
# ---------------------------------------------------------------------------

def test_identity_eigenvalues_exact():
    case = Oracle1DCase("identity")
    for k in range(1, 11):
        s = eigen_exact_eps(case, 0.25, k)
        exact = (k * np.pi) ** 2
        assert abs(s.lam - exact) <= 1e-10 * exact


def test_identity_eigenfunction_closed_form():
    case = Oracle1DCase("identity")
    s = eigen_exact_eps(case, 0.125, 3)
    ref = np.sqrt(2.0) * np.sin(3.0 * np.pi * s.nodes)
    assert np.max(np.abs(s.values - ref)) <= 1e-9


def test_identity_has_no_corrections():
    case = Oracle1DCase("identity")
    assert case.ahat == 1.0
    assert case.chi0 == 0.0
    assert np.all(case.chi(np.linspace(0, 1, 7)) == 0.0)
    psi, theta = oracle1d.psi_bl_exact(case, 2)
    assert theta == 0.0
    assert np.all(psi(np.linspace(0, 1, 7)) == 0.0)


# ---------------------------------------------------------------------------
# oscillating coefficient
# ---------------------------------------------------------------------------

def test_eigenvalues_ordered_and_simple():
    case = Oracle1DCase("trig1d", phi=0.0)
    lams = [eigen_exact_eps(case, 0.125, k).lam for k in (1, 2, 3, 4)]
    assert all(b > a * (1.0 + 1e-10) for a, b in zip(lams, lams[1:]))


def test_homogenized_limit():
    # lam_1(eps) -> ahat pi^2 = pi^2 / 2 as eps -> 0
    case = Oracle1DCase("trig1d", phi=0.0)
    lam0 = 0.5 * np.pi ** 2
    errs = [abs(eigen_exact_eps(case, eps, 1).lam - lam0)
            for eps in (0.125, 0.0625, 0.03125)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] <= 0.02


def test_normalization_and_sign():
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    s = eigen_exact_eps(case, 0.125, 2)
    assert abs(s.weights @ s.values ** 2 - 1.0) <= 1e-12
    assert s.integral(s.values * case.phi0(s.nodes, 2)) > 0.0


def test_eigenfunction_orthogonality():
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    s1 = eigen_exact_eps(case, 0.125, 1)
    s2 = eigen_exact_eps(case, 0.125, 2)
    assert np.array_equal(s1.nodes, s2.nodes)
    assert abs(s1.weights @ (s1.values * s2.values)) <= 1e-8


# ---------------------------------------------------------------------------
# closed-form first-order correction
# ---------------------------------------------------------------------------

def test_psi_amplitude_frozen():
    # phi = pi/3, k = 1: |psi(0)| = sqrt(2) pi sin(pi/3) / (4 pi) = sqrt(6)/8
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    psi, theta = oracle1d.psi_bl_exact(case, 1)
    assert theta == 0.0
    assert abs(abs(float(psi(0.0))) - np.sqrt(6.0) / 8.0) <= 1e-14
    assert abs(float(psi(0.0)) - (-0.30618621784789724)) <= 1e-14


def test_psi_is_pure_cosine():
    case = Oracle1DCase("trig1d", phi=1.1)
    psi, _ = oracle1d.psi_bl_exact(case, 3)
    x = np.linspace(0.0, 1.0, 17)
    amp = float(psi(0.0))
    assert np.max(np.abs(psi(x) - amp * np.cos(3 * np.pi * x))) <= 1e-14


def test_kbl_is_the_connecting_line():
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    kbl = oracle1d.kbl_exact(case, 1)
    c0 = -case.chi0 * case.dphi0(0.0, 1)
    c1 = -case.chi0 * case.dphi0(1.0, 1)
    assert abs(float(kbl(0.0)) - c0) <= 1e-15
    assert abs(float(kbl(1.0)) - c1) <= 1e-15
    assert abs(float(kbl(0.5)) - 0.5 * (c0 + c1)) <= 1e-15


# ---------------------------------------------------------------------------
# expansion residual table
# ---------------------------------------------------------------------------

def test_residual_improvement_ordering():
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    rows = expansion_residuals_1d(case, (0.125, 0.0625), k=1)
    for row in rows:
        assert row["e2"] <= row["e1"] + 1e-12
        assert row["e1"] <= row["e0"] + 1e-12


def test_residual_slopes_small_ladder():
    case = Oracle1DCase("trig1d", phi=np.pi / 3)
    eps = np.array([1 / 8, 1 / 16, 1 / 32])
    rows = expansion_residuals_1d(case, eps, k=1)
    s_e1 = _slope(eps, [r["e1"] for r in rows])
    s_e2 = _slope(eps, [r["e2"] for r in rows])
    s_r1 = _slope(eps, [r["r1"] for r in rows])
    assert s_e1 >= 0.9
    assert s_e2 >= s_e1 + 0.4
    assert s_r1 >= 1.5


def test_theta_vanishes_for_every_phase():
    # endpoint contributions cancel regardless of phi, so r0 == r1 and
    # the eigenvalue error is already second order
    case = Oracle1DCase("trig1d", phi=2.0)
    rows = expansion_residuals_1d(case, (0.125, 0.0625), k=1)
    for row in rows:
        assert row["r0"] == row["r1"]
    assert rows[0]["r0"] / rows[1]["r0"] >= 3.0


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_rejects_unaligned_eps():
    case = Oracle1DCase("trig1d")
    with pytest.raises(ValueError, match="1/n"):
        eigen_exact_eps(case, 0.3, 1)


def test_rejects_bad_mode_index():
    case = Oracle1DCase("trig1d")
    with pytest.raises(ValueError, match="k"):
        eigen_exact_eps(case, 0.125, 0)


def test_rejects_unknown_family():
    with pytest.raises(ValueError, match="family"):
        Oracle1DCase("cubic")
