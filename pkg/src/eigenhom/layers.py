"""Boundary-layer solves at scale eps and their small-eps limit.

First- and second-order oscillating-Dirichlet-data problems: the
eps-scale operator with zero source and boundary values built from the
cell correctors and derivatives of a reference field.  The limit image
K^bl g is estimated over a descending eps ladder, all solves compared on
the finest mesh, with the last pairwise difference as the error bound.

Neumann oscillating data is the tangential derivative of the
flux-potential pairing s = b_12k(x/eps) d_k u0; it is assembled in weak
form from boundary-edge differences of nodal s, so the compatibility
integral telescopes to zero exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .cell import CorrectorSet
from .fem import DiscreteSystem
from .meshing import Mesh


@dataclass(eq=False)
class LayerSolve:
    """One oscillating-data solve: the field, its data, solver residual."""

    eps: float
    mesh: Mesh
    values: np.ndarray          # (n,) nodal
    boundary_data: np.ndarray   # at boundary_indices() order
    residual: float


def _at_boundary(mesh: Mesh, nodal: np.ndarray, depth: int) -> np.ndarray:
    """Restrict (n, ...) nodal derivative arrays to boundary vertices."""
    bidx = mesh.boundary_indices()
    arr = np.asarray(nodal, dtype=float)
    want_full = (mesh.n_vertices,) + (mesh.dim,) * depth
    want_bnd = (len(bidx),) + (mesh.dim,) * depth
    if arr.shape == want_full:
        return arr[bidx]
    if arr.shape == want_bnd:
        return arr
    raise ValueError(f"derivative array shape {arr.shape}; expected "
                     f"{want_full} or {want_bnd}")


def _ensure_system(field, mesh, eps, system, quad):
    if system is not None:
        if system.eps is None:
            raise ValueError("layer solves need a system assembled at scale eps")
        return system
    return fem.assemble(field, mesh, eps=eps, bc="dirichlet", quad=quad)


def v1_eps(field, correctors: CorrectorSet, eps: float, grad_u0: np.ndarray,
           mesh: Mesh, system: DiscreteSystem | None = None,
           quad: int = 4) -> LayerSolve:
    """First-order boundary layer: zero source, data -chi_j(x/eps) d_j u0.

    grad_u0 holds nodal first derivatives of the reference field, either
    on all vertices or on boundary vertices only.  Passing a
    pre-assembled eps-scale system skips assembly.
    """
    system = _ensure_system(field, mesh, eps, system, quad)
    mesh, eps = system.mesh, system.eps
    g = _at_boundary(mesh, grad_u0, 1)
    pts = mesh.vertices[mesh.boundary_indices()]
    data = np.zeros(len(pts))
    for j in range(mesh.dim):
        data -= fem.interpolate_two_scale(pts, correctors.chi[j], eps) * g[:, j]
    u, info = system.solve_source(dirichlet_data=data, return_info=True)
    return LayerSolve(eps, mesh, u, data, info["residual"])


def v2_eps(field, correctors: CorrectorSet, eps: float, hess_u0: np.ndarray,
           mesh: Mesh, system: DiscreteSystem | None = None,
           quad: int = 4) -> LayerSolve:
    """Second-order boundary layer: data -Upsilon_ij(x/eps) (H u0)_ij."""
    system = _ensure_system(field, mesh, eps, system, quad)
    mesh, eps = system.mesh, system.eps
    H = _at_boundary(mesh, hess_u0, 2)
    pts = mesh.vertices[mesh.boundary_indices()]
    data = np.zeros(len(pts))
    for i in range(mesh.dim):
        for j in range(mesh.dim):
            data -= fem.interpolate_two_scale(pts, correctors.upsilon[i][j],
                                              eps) * H[:, i, j]
    u, info = system.solve_source(dirichlet_data=data, return_info=True)
    return LayerSolve(eps, mesh, u, data, info["residual"])


@dataclass(eq=False)
class KblEstimate:
    """Ladder estimate of the limit boundary-layer image of one field."""

    mesh: Mesh                  # finest ladder mesh; values live here
    values: np.ndarray
    error_bound: float          # L2 difference of the last ladder pair
    eps_ladder: tuple
    diffs: tuple                # consecutive pairwise L2 differences
    slope: float | None         # fitted decay of the differences
    converged: bool             # strictly decreasing differences


def estimate_Kbl(systems: list[DiscreteSystem], correctors: CorrectorSet,
                 grad_g: np.ndarray, g_mesh: Mesh) -> KblEstimate:
    """Limit of the first-order layer over a descending eps ladder.

    systems are eps-scale Dirichlet systems in strictly descending eps
    order (at least 3).  grad_g holds the nodal gradient of the
    reference field on g_mesh; it is interpolated onto each ladder mesh.
    All solves are compared in L2 on the finest mesh; the estimate is
    the finest solve and the error bound the last pairwise difference.
    """
    if len(systems) < 3:
        raise ValueError("eps ladder needs at least 3 levels")
    ladder = [s.eps for s in systems]
    if any(e is None for e in ladder) or any(
            b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"ladder eps must be strictly descending, got {ladder}")

    fine = systems[-1]
    on_fine = []
    for sysl in systems:
        gl = grad_g if sysl.mesh is g_mesh else fem.transfer(g_mesh, grad_g, sysl.mesh)
        sol = v1_eps(None, correctors, sysl.eps, gl, sysl.mesh, system=sysl)
        v = sol.values if sysl is fine else fem.transfer(sysl.mesh, sol.values,
                                                         fine.mesh)
        on_fine.append(v)

    diffs = tuple(fine.norm_l2(b - a) for a, b in zip(on_fine, on_fine[1:]))
    positive = [(ladder[i], d) for i, d in enumerate(diffs) if d > 0]
    slope = None
    if len(positive) >= 2:
        le = np.log([p[0] for p in positive])
        ld = np.log([p[1] for p in positive])
        slope = float(np.polyfit(le, ld, 1)[0])
    converged = all(b < a for a, b in zip(diffs, diffs[1:])) if len(diffs) > 1 \
        else True
    return KblEstimate(fine.mesh, on_fine[-1], diffs[-1] if diffs else 0.0,
                       tuple(ladder), diffs, slope, converged)


@dataclass(eq=False)
class NeumannData:
    """Weak-form oscillating Neumann load with exact compatibility."""

    load: np.ndarray            # (n,) right-hand-side vector
    ring: np.ndarray            # CCW-ordered boundary vertex indices
    s: np.ndarray               # nodal flux-potential pairing on the ring
    compat_defect: float        # |sum load| / ||load||
    boundary_l2: float          # L2(boundary) norm of the tangential data


def neumann_data(system: DiscreteSystem, correctors: CorrectorSet,
                 grad_u0: np.ndarray) -> NeumannData:
    """Oscillating Neumann data: tangential derivative of
    s = b_12k(x/eps) d_k u0 along the boundary.

    The weak load at ring vertex i is (s_{i+1} - s_{i-1})/2, the exact
    edge-difference form whose total telescopes to zero, so the
    compatibility integral vanishes to roundoff in every solve.
    """
    mesh, eps = system.mesh, system.eps
    if mesh.dim != 2:
        raise ValueError("oscillating Neumann data is a 2D construction")
    if eps is None:
        raise ValueError("system must be assembled at scale eps")
    ring = mesh.boundary_edges()[:, 0]
    pts = mesh.vertices[ring]
    g = np.asarray(grad_u0, dtype=float)
    if g.shape != (mesh.n_vertices, 2):
        raise ValueError(f"grad_u0 must be (n, 2) nodal, got {g.shape}")
    s = np.zeros(len(ring))
    for k in range(2):
        s += fem.interpolate_two_scale(pts, correctors.b[0][1][k], eps) * g[ring, k]

    load = np.zeros(mesh.n_vertices)
    load[ring] = 0.5 * (np.roll(s, -1) - np.roll(s, 1))
    scale = max(np.linalg.norm(load), 1e-300)
    compat = abs(load.sum()) / scale

    edge_len = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
    ds = np.roll(s, -1) - s
    boundary_l2 = float(np.sqrt((ds ** 2 / edge_len).sum()))
    return NeumannData(load, ring, s, compat, boundary_l2)
