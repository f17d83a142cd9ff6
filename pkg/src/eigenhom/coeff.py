"""Periodic coefficient fields A(y) on the unit torus.

Built-in closed-form families, all symmetric and uniformly elliptic:

``identity``
    A(y) = I.  Optional param: dimension d (default 2).
``trig1d``
    a(y) = (2 + cos(2*pi*y + phi))^-1, d = 1.  Param: phase phi (default 0).
``trig2d``
    A(y) = (2 + s*sin(2*pi*y1)*sin(2*pi*y2)) * I, d = 2.  Param: amplitude s,
    |s| < 2.
``aniso2d``
    A(y) = diag(a1 + s*cos(2*pi*y2), a2 + s*cos(2*pi*y1)), d = 2.  Params:
    (a1, a2, s) with min(a1, a2) > |s|, giving a genuinely anisotropic
    homogenized tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = ["CoefficientField", "AssumptionReport", "make_family", "check_assumptions"]


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric matrix-valued 1-periodic coefficient y -> A(y).

    ``matrix(points)`` maps (P, d) points to (P, d, d) matrices.  ``scalar``
    is the fast path a(y) for isotropic fields (A = a*I), else None.
    """

    name: str
    params: tuple
    dim: int
    matrix: Callable[[np.ndarray], np.ndarray]
    scalar: Callable[[np.ndarray], np.ndarray] | None = None
    is_identity: bool = False

    def grid_samples(self, N: int) -> np.ndarray:
        """Samples on the uniform N^d torus grid, shape (d, d) + (N,)*d."""
        axes = [np.arange(N) / N] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        A = self.matrix(pts)  # (P, d, d)
        return np.moveaxis(A, 0, -1).reshape((self.dim, self.dim) + (N,) * self.dim)

    def __repr__(self) -> str:  # params in repr so cache keys are readable
        return f"CoefficientField({self.name}, params={self.params}, d={self.dim})"


@dataclass
class AssumptionReport:
    """Grid-sampled validation of symmetry, periodicity and ellipticity."""

    lambda_min: float          # measured smallest eigenvalue over the grid
    lambda_max: float          # measured largest eigenvalue
    symmetry_defect: float     # max |A - A^T|
    periodicity_defect: float  # max |A(y) - A(y + e_j)| over axes
    grid: int
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self) -> None:
        self.passed = (
            self.symmetry_defect <= self.tol
            and self.periodicity_defect <= self.tol
            and self.lambda_min > self.tol
        )


def _wrap(pts: np.ndarray) -> np.ndarray:
    """Reduce coordinates to [0, 1) so the float map is exactly periodic."""
    return np.mod(np.atleast_2d(pts), 1.0)


def _isotropic(name: str, params: tuple, dim: int, a: Callable) -> CoefficientField:
    def matrix(pts: np.ndarray) -> np.ndarray:
        pts = _wrap(pts)
        vals = a(pts)
        return vals[:, None, None] * np.eye(dim)

    return CoefficientField(name, params, dim, matrix, scalar=lambda pts: a(_wrap(pts)))


def make_family(name: str, params: Sequence[float] | None = None) -> CoefficientField:
    """Instantiate a built-in coefficient family by name.

    Raises ValueError for unknown names or parameters that break uniform
    ellipticity; the error message carries a violating sample point.
    """
    p = tuple(float(x) for x in (params or ()))

    if name == "identity":
        dim = int(p[0]) if p else 2
        if dim not in (1, 2):
            raise ValueError(f"identity: dimension must be 1 or 2, got {dim}")

        def matrix(pts: np.ndarray) -> np.ndarray:
            pts = np.atleast_2d(pts)
            return np.broadcast_to(np.eye(dim), (len(pts), dim, dim)).copy()

        return CoefficientField(
            "identity", (dim,), dim, matrix,
            scalar=lambda pts: np.ones(len(np.atleast_2d(pts))),
            is_identity=True,
        )

    if name == "trig1d":
        phi = p[0] if p else 0.0

        def a(pts: np.ndarray) -> np.ndarray:
            y = np.atleast_2d(pts)[:, 0]
            return 1.0 / (2.0 + np.cos(2 * np.pi * y + phi))

        return _isotropic("trig1d", (phi,), 1, a)

    if name == "trig2d":
        s = p[0] if p else 1.0
        if abs(s) >= 2.0:
            y_bad = (0.25, 0.25) if s >= 2 else (0.25, 0.75)
            raise ValueError(
                f"trig2d: |s| >= 2 loses ellipticity, e.g. a{y_bad} = {2 - abs(s):g} <= 0"
            )

        def a(pts: np.ndarray) -> np.ndarray:
            pts = np.atleast_2d(pts)
            return 2.0 + s * np.sin(2 * np.pi * pts[:, 0]) * np.sin(2 * np.pi * pts[:, 1])

        return _isotropic("trig2d", (s,), 2, a)

    if name == "aniso2d":
        a1, a2, s = p if len(p) == 3 else (2.0, 1.0, 0.5)
        if min(a1, a2) <= abs(s):
            y_bad = (0.0, 0.5) if a1 <= a2 else (0.5, 0.0)
            raise ValueError(
                f"aniso2d: min(a1,a2) must exceed |s|; eigenvalue "
                f"{min(a1, a2) - abs(s):g} <= 0 at y = {y_bad}"
            )

        def matrix(pts: np.ndarray) -> np.ndarray:
            pts = _wrap(pts)
            out = np.zeros((len(pts), 2, 2))
            out[:, 0, 0] = a1 + s * np.cos(2 * np.pi * pts[:, 1])
            out[:, 1, 1] = a2 + s * np.cos(2 * np.pi * pts[:, 0])
            return out

        return CoefficientField("aniso2d", (a1, a2, s), 2, matrix)

    raise ValueError(f"unknown coefficient family {name!r}")


def check_assumptions(field: CoefficientField, grid: int = 64, tol: float = 1e-10) -> AssumptionReport:
    """Sample an N^d grid and report ellipticity constants and defects.

    Report-only: callers gate on ``report.passed``.
    """
    if grid < 8:
        raise ValueError("need at least 8 sample points per period per axis")
    d = field.dim
    axes = [np.arange(grid) / grid] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    A = field.matrix(pts)

    sym = np.abs(A - np.swapaxes(A, 1, 2)).max()
    eigs = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))
    per = 0.0
    for j in range(d):
        shifted = pts.copy()
        shifted[:, j] += 1.0
        per = max(per, np.abs(field.matrix(shifted) - A).max())
    return AssumptionReport(
        lambda_min=float(eigs.min()),
        lambda_max=float(eigs.max()),
        symmetry_defect=float(sym),
        periodicity_defect=float(per),
        grid=grid,
        tol=tol,
    )
