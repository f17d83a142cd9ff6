"""Coefficient families: closed forms, ellipticity reports, rejection paths."""
import numpy as np
import pytest

from eigenhom.coeff import CoefficientField, check_assumptions, make_family

FAMILIES = [
    ("identity", (2,)),
    ("trig1d", (0.0,)),
    ("trig1d", (np.pi / 3,)),
    ("trig2d", (1.0,)),
    ("trig2d", (-1.7,)),
    ("aniso2d", (2.0, 1.0, 0.5)),
]


def test_identity_is_identity_everywhere():
    f = make_family("identity", (2,))
    rng = np.random.default_rng(7)
    pts = rng.random((50, 2))
    A = f.matrix(pts)
    assert np.array_equal(A, np.broadcast_to(np.eye(2), (50, 2, 2)))
    assert f.is_identity


def test_trig2d_eigenvalue_range_on_fine_grid():
    # extremes of 2 + sin*sin; the 256-grid contains y = 1/4 and 3/4
    f = make_family("trig2d", (1.0,))
    y = np.arange(256) / 256
    X, Y = np.meshgrid(y, y, indexing="ij")
    vals = f.scalar(np.column_stack([X.ravel(), Y.ravel()]))
    assert vals.min() == 1.0
    assert vals.max() == 3.0


def test_trig1d_point_value():
    f = make_family("trig1d", (np.pi / 3,))
    a0 = f.scalar(np.array([[0.0]]))[0]
    assert abs(a0 - 0.4) < 1e-15  # 1/(2 + cos(pi/3)) = 1/2.5


def test_report_identity():
    rep = check_assumptions(make_family("identity", (2,)))
    assert rep.lambda_min == 1.0 and rep.lambda_max == 1.0
    assert rep.symmetry_defect == 0.0 and rep.periodicity_defect == 0.0
    assert rep.passed


def test_report_trig2d_constants():
    rep = check_assumptions(make_family("trig2d", (1.0,)), grid=64)
    assert abs(rep.lambda_min - 1.0) <= 1e-3
    assert abs(rep.lambda_max - 3.0) <= 1e-3


@pytest.mark.parametrize("name,params", FAMILIES)
def test_every_family_passes_at_tight_tolerance(name, params):
    rep = check_assumptions(make_family(name, params), grid=64, tol=1e-10)
    assert rep.passed, (name, params, rep)
    assert rep.lambda_min > 1e-10


@pytest.mark.parametrize("name,params", FAMILIES)
def test_periodicity_bit_for_bit(name, params):
    # dyadic coordinates so the +1 shift itself is lossless in floats
    f = make_family(name, params)
    rng = np.random.default_rng(11)
    pts = rng.integers(0, 2 ** 20, size=(40, f.dim)) / 2.0 ** 20
    assert np.array_equal(f.matrix(pts), f.matrix(pts + 1.0))
    assert np.array_equal(f.matrix(pts), f.matrix(pts - 3.0))


def test_non_symmetric_field_is_flagged():
    def matrix(pts):
        pts = np.atleast_2d(pts)
        out = np.broadcast_to(np.eye(2), (len(pts), 2, 2)).copy()
        out[:, 0, 1] = 0.3
        return out

    bad = CoefficientField("skew", (), 2, matrix)
    rep = check_assumptions(bad)
    assert rep.symmetry_defect > 0.0
    assert not rep.passed


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown"):
        make_family("perlin")


def test_ellipticity_violations_rejected_with_sample_point():
    with pytest.raises(ValueError, match=r"0\.25"):
        make_family("trig2d", (2.0,))
    with pytest.raises(ValueError, match=r"y ="):
        make_family("aniso2d", (1.0, 2.0, 1.5))


def test_small_grid_rejected():
    with pytest.raises(ValueError):
        check_assumptions(make_family("identity", (2,)), grid=4)


def test_grid_samples_shape_and_values():
    f = make_family("aniso2d", (2.0, 1.0, 0.5))
    A = f.grid_samples(16)
    assert A.shape == (2, 2, 16, 16)
    # diag(a1 + s cos(2 pi y2), a2 + s cos(2 pi y1)) at y = 0
    assert abs(A[0, 0, 0, 0] - 2.5) < 1e-15
    assert abs(A[1, 1, 0, 0] - 1.5) < 1e-15
    assert A[0, 1].max() == 0.0


def test_random_parameters_stay_elliptic():
    rng = np.random.default_rng(2024)
    for _ in range(20):
        s = rng.uniform(-1.9, 1.9)
        rep = check_assumptions(make_family("trig2d", (s,)), grid=32)
        assert rep.passed
        assert rep.lambda_min >= 2.0 - abs(s) - 1e-12
        assert rep.lambda_max <= 2.0 + abs(s) + 1e-12
        phi = rng.uniform(0, 2 * np.pi)
        rep1 = check_assumptions(make_family("trig1d", (phi,)), grid=32)
        assert rep1.passed
        assert rep1.lambda_min >= 1.0 / 3.0 - 1e-12
