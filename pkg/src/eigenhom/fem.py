"""P1 finite elements on interval and triangle meshes.

Assembles stiffness and mass operators for -div(A grad u) where A is an
oscillating periodic coefficient evaluated at x/eps, a position-dependent
coefficient, or a constant matrix (the homogenized tensor).  Dirichlet
systems are reduced to interior unknowns, keeping the interior-boundary
coupling block so nonzero boundary data enters through a lifting term.
Neumann systems keep all vertices and are solved subject to a zero-mean
constraint via a bordered factorization.

Also provides nodal evaluation of periodic cell fields at the x/eps
scale, piecewise-constant gradients with mass-lumped nodal recovery,
recovered Hessians, and interpolation of nodal fields between meshes of
the same domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .cell import PeriodicField
from .coeff import CoefficientField
from .meshing import Mesh


class FemSolveError(RuntimeError):
    """A direct solve missed its residual target or data is inconsistent."""


# quadrature on the reference simplex, keyed by polynomial exactness.
# Triangle rules use (xi, eta) with barycentrics (1-xi-eta, xi, eta);
# weights sum to 1 and multiply the physical cell measure.
_TRI_A = 0.445948490915965
_TRI_B = 0.091576213509771
_TRI_RULES = {
    2: (np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]),
        np.full(3, 1.0 / 3.0)),
    4: (np.array([[_TRI_A, _TRI_A],
                  [1.0 - 2.0 * _TRI_A, _TRI_A],
                  [_TRI_A, 1.0 - 2.0 * _TRI_A],
                  [_TRI_B, _TRI_B],
                  [1.0 - 2.0 * _TRI_B, _TRI_B],
                  [_TRI_B, 1.0 - 2.0 * _TRI_B]]),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)),
}
_SEG_RULES = {
    3: (np.array([[0.5 - 0.5 / np.sqrt(3.0)], [0.5 + 0.5 / np.sqrt(3.0)]]),
        np.full(2, 0.5)),
    5: (np.array([[0.5 * (1.0 - np.sqrt(0.6))], [0.5], [0.5 * (1.0 + np.sqrt(0.6))]]),
        np.array([5.0, 8.0, 5.0]) / 18.0),
}
_GREF = {
    1: np.array([[-1.0], [1.0]]),
    2: np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
}


def _rule(dim: int, order: int):
    rules = _SEG_RULES if dim == 1 else _TRI_RULES
    for avail in sorted(rules):
        if avail >= order:
            return rules[avail]
    raise ValueError(f"quadrature order {order} not available in {dim}D "
                     f"(highest implemented: {max(rules)})")


def _shape_values(dim: int, qp: np.ndarray) -> np.ndarray:
    """(nq, dim+1) P1 basis values at reference quadrature points."""
    lam0 = 1.0 - qp.sum(axis=1)
    return np.column_stack([lam0, qp])


def _geometry(mesh: Mesh, chunk: slice | None = None):
    """Physical basis gradients and cell measures.

    Returns (gphys, measure, F) where gphys[t, i, :] is the gradient of
    local basis i on cell t, measure[t] the cell length/area, and F the
    (nt, d, d) edge matrix (columns are edge vectors from vertex 0).
    """
    p = mesh.vertices
    t = mesh.cells if chunk is None else mesh.cells[chunk]
    d = mesh.dim
    F = np.stack([p[t[:, k + 1]] - p[t[:, 0]] for k in range(d)], axis=-1)
    Finv = np.linalg.inv(F)
    gphys = np.einsum("ik,tkj->tij", _GREF[d], Finv)
    measure = mesh.areas() if chunk is None else mesh.areas()[chunk]
    return gphys, measure, F


def _quad_points(mesh: Mesh, qp: np.ndarray, F: np.ndarray, chunk: slice | None = None):
    """Physical coordinates (nt, nq, d) of reference points qp on each cell."""
    t = mesh.cells if chunk is None else mesh.cells[chunk]
    return mesh.vertices[t[:, 0]][:, None, :] + np.einsum("tij,qj->tqi", F, qp)


_CHUNK = 200_000  # cells per assembly block, bounds transient memory


def _stiffness_data(mesh: Mesh, coef, eps: float | None, order: int) -> np.ndarray:
    """(nt, nloc, nloc) element stiffness matrices."""
    d = mesh.dim
    nt = len(mesh.cells)
    nloc = d + 1
    const = _constant_matrix(coef, d)
    qp, qw = _rule(d, order)
    out = np.empty((nt, nloc, nloc))
    for start in range(0, nt, _CHUNK):
        sl = slice(start, min(start + _CHUNK, nt))
        g, area, F = _geometry(mesh, sl)
        if const is not None:
            Ag = np.einsum("ab,tjb->tja", const, g)
            out[sl] = area[:, None, None] * np.einsum("tia,tja->tij", g, Ag)
            continue
        x = _quad_points(mesh, qp, F, sl)
        y = x.reshape(-1, d) if eps is None else x.reshape(-1, d) / eps
        if coef.scalar is not None:
            a = coef.scalar(y).reshape(x.shape[:2])          # (tc, nq)
            abar = a @ qw                                     # (tc,)
            G = np.einsum("tia,tja->tij", g, g)
            out[sl] = (area * abar)[:, None, None] * G
        else:
            A = coef.matrix(y).reshape(x.shape[:2] + (d, d))  # (tc, nq, d, d)
            Aq = np.einsum("q,tqab->tab", qw, A)              # quadrature-averaged A
            Ag = np.einsum("tab,tjb->tja", Aq, g)
            out[sl] = area[:, None, None] * np.einsum("tia,tja->tij", g, Ag)
    return out


def _constant_matrix(coef, d: int) -> np.ndarray | None:
    """Normalize constant coefficients to a (d, d) array; None if varying."""
    if coef is None:
        return np.eye(d)
    if isinstance(coef, (int, float)):
        return float(coef) * np.eye(d)
    if isinstance(coef, np.ndarray):
        if coef.shape != (d, d):
            raise ValueError(f"constant coefficient must be ({d},{d}), got {coef.shape}")
        return coef
    if isinstance(coef, CoefficientField):
        return np.eye(d) if coef.is_identity else None
    raise TypeError(f"unsupported coefficient type {type(coef).__name__}")


def _mass_data(mesh: Mesh) -> np.ndarray:
    """(nt, nloc, nloc) consistent P1 mass matrices (closed form, exact)."""
    nloc = mesh.dim + 1
    pattern = (np.ones((nloc, nloc)) + np.eye(nloc)) / (nloc * (nloc + 1))
    return mesh.areas()[:, None, None] * pattern


def _scatter(mesh: Mesh, data: np.ndarray) -> sparse.csr_matrix:
    nloc = mesh.dim + 1
    rows = np.repeat(mesh.cells, nloc, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nloc)).ravel()
    n = mesh.n_vertices
    return sparse.coo_matrix((data.ravel(), (rows, cols)), shape=(n, n)).tocsr()


@dataclass(eq=False, repr=False)
class DiscreteSystem:
    """Stiffness/mass pair with boundary handling for one coefficient.

    K_full and M_full act on all vertices.  ``stiffness``/``mass`` are
    the operators of the reduced problem actually solved: interior
    unknowns for Dirichlet, all vertices for Neumann.
    """

    mesh: Mesh
    K_full: sparse.csr_matrix
    M_full: sparse.csr_matrix
    bc: str
    quad: int
    eps: float | None = None

    _lu: object = dfield(default=None, repr=False)
    _cache: dict = dfield(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.bc not in ("dirichlet", "neumann"):
            raise ValueError(f"bc must be 'dirichlet' or 'neumann', got {self.bc!r}")
        scale = np.abs(self.K_full.data).max()
        defect = np.abs((self.K_full - self.K_full.T).data)
        defect = defect.max() if defect.size else 0.0
        if defect > 1e-12 * scale:
            raise FemSolveError(f"stiffness symmetry defect {defect:.3e} > 1e-12*|K|")
        self.K_full = ((self.K_full + self.K_full.T) * 0.5).tocsr()
        self.M_full = ((self.M_full + self.M_full.T) * 0.5).tocsr()
        if self.bc == "neumann":
            ones = np.ones(self.mesh.n_vertices)
            null = np.abs(self.K_full @ ones).max()
            if null > 1e-10 * scale:
                raise FemSolveError(f"Neumann stiffness does not annihilate constants "
                                    f"(defect {null:.3e})")

    @property
    def interior(self) -> np.ndarray:
        if "interior" not in self._cache:
            if self.bc == "dirichlet":
                self._cache["interior"] = np.where(~self.mesh.boundary)[0]
            else:
                self._cache["interior"] = np.arange(self.mesh.n_vertices)
        return self._cache["interior"]

    @property
    def n_unknowns(self) -> int:
        return len(self.interior)

    def _block(self, name: str) -> sparse.csr_matrix:
        if name not in self._cache:
            ii = self.interior
            bb = self.mesh.boundary_indices()
            full = self.K_full if name.startswith("K") else self.M_full
            cols = ii if name.endswith("i") else bb
            self._cache[name] = full[ii][:, cols].tocsr()
        return self._cache[name]

    @property
    def stiffness(self) -> sparse.csr_matrix:
        return self._block("Kii") if self.bc == "dirichlet" else self.K_full

    @property
    def mass(self) -> sparse.csr_matrix:
        return self._block("Mii") if self.bc == "dirichlet" else self.M_full

    @property
    def K_ib(self) -> sparse.csr_matrix:
        return self._block("Kib")

    @property
    def mass_times_one(self) -> np.ndarray:
        """M*1: nodal weights whose dot with u is the integral of u."""
        if "m1" not in self._cache:
            self._cache["m1"] = self.M_full @ np.ones(self.mesh.n_vertices)
        return self._cache["m1"]

    def factor(self):
        """LU of the reduced stiffness (bordered with M*1 for Neumann)."""
        if self._lu is None:
            if self.bc == "dirichlet":
                self._lu = splu(self.stiffness.tocsc())
            else:
                m = self.mass_times_one[:, None]
                B = sparse.bmat([[self.K_full, m], [m.T, None]], format="csc")
                self._lu = splu(B)
        return self._lu

    def release(self) -> None:
        """Drop the cached factorization (frees fill-in memory)."""
        self._lu = None

    def boundary_values(self, data) -> np.ndarray:
        """Normalize Dirichlet data to values at boundary_indices() order."""
        bidx = self.mesh.boundary_indices()
        if data is None:
            return np.zeros(len(bidx))
        if callable(data):
            return np.asarray(data(self.mesh.vertices[bidx]), dtype=float)
        arr = np.asarray(data, dtype=float)
        if arr.ndim == 0:
            return np.full(len(bidx), float(arr))
        if arr.shape == (self.mesh.n_vertices,):
            return arr[bidx]
        if arr.shape == (len(bidx),):
            return arr
        raise ValueError(f"boundary data shape {arr.shape} matches neither all "
                         f"{self.mesh.n_vertices} vertices nor {len(bidx)} boundary vertices")

    def solve_load(self, load: np.ndarray, dirichlet_data=None,
                   compat_tol: float | None = None, return_info: bool = False):
        """Solve K u = load for a fully assembled load vector (all vertices).

        Dirichlet: boundary values are imposed nodally and lifted into the
        right-hand side.  Neumann: the load is orthogonalized against
        constants and the mean-zero solution returned; ``compat_tol``
        bounds the allowed relative compatibility defect of the data.
        """
        load = np.asarray(load, dtype=float)
        n = self.mesh.n_vertices
        if load.shape != (n,):
            raise ValueError(f"load must have shape ({n},)")
        info: dict = {}
        if self.bc == "dirichlet":
            ub = self.boundary_values(dirichlet_data)
            rhs = load[self.interior] - self.K_ib @ ub
            ui = self.factor().solve(rhs)
            u = np.empty(n)
            u[self.interior] = ui
            u[self.mesh.boundary_indices()] = ub
            res = np.linalg.norm(self.stiffness @ ui - rhs)
            den = max(np.linalg.norm(rhs), 1e-300)
        else:
            if dirichlet_data is not None:
                raise ValueError("dirichlet_data given for a Neumann system")
            scale = max(np.linalg.norm(load), 1e-300)
            total = load.sum()                          # = integral of the data
            info["compat_defect"] = abs(total) / scale
            if compat_tol is not None and info["compat_defect"] > compat_tol:
                raise FemSolveError(
                    f"incompatible Neumann data: relative mean {info['compat_defect']:.3e} "
                    f"> {compat_tol:.1e}")
            m = self.mass_times_one
            load = load - (total / m.sum()) * m
            post = abs(load.sum()) / scale
            if post > 1e-10:
                raise FemSolveError(f"Neumann orthogonalization left mean {post:.3e}")
            sol = self.factor().solve(np.append(load, 0.0))
            u, info["multiplier"] = sol[:n], sol[n]
            res = np.linalg.norm(self.K_full @ u + info["multiplier"] * m - load)
            den = max(np.linalg.norm(load), 1e-300)
        info["residual"] = res / den
        if info["residual"] > 1e-10:
            raise FemSolveError(f"direct solve residual {info['residual']:.3e} > 1e-10")
        return (u, info) if return_info else u

    def solve_source(self, rhs=None, dirichlet_data=None, load=None,
                     compat_tol: float | None = None, return_info: bool = False):
        """Solve with a source term given as a function or nodal values.

        rhs may be a callable f(points)->values (integrated by quadrature),
        a nodal array (tested against the consistent mass), or None.  An
        optional pre-assembled ``load`` vector is added.
        """
        n = self.mesh.n_vertices
        F = np.zeros(n)
        if rhs is not None:
            if callable(rhs):
                F += load_vector(self.mesh, rhs, self.quad)
            else:
                vals = np.asarray(rhs, dtype=float)
                if vals.shape != (n,):
                    raise ValueError(f"nodal rhs must have shape ({n},)")
                F += self.M_full @ vals
        if load is not None:
            F += np.asarray(load, dtype=float)
        return self.solve_load(F, dirichlet_data=dirichlet_data,
                               compat_tol=compat_tol, return_info=return_info)

    def norm_l2(self, u: np.ndarray) -> float:
        return float(np.sqrt(abs(u @ (self.M_full @ u))))

    def inner_l2(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.M_full @ v))

    def verify(self) -> dict:
        """Invariant report: symmetry defect, mass SPD pivots, Neumann null."""
        K, M = self.K_full, self.M_full
        out = {"symmetry_defect": float(np.abs((K - K.T).data).max()
                                        if (K - K.T).nnz else 0.0)}
        lu = splu(M.tocsc(), diag_pivot_thresh=0.0, permc_spec="MMD_AT_PLUS_A",
                  options={"SymmetricMode": True})
        out["mass_min_pivot"] = float(lu.U.diagonal().min())
        out["mass_spd"] = bool(out["mass_min_pivot"] > 0.0)
        if self.bc == "neumann":
            ones = np.ones(self.mesh.n_vertices)
            out["constant_annihilation"] = float(np.abs(K @ ones).max())
        return out


def assemble(coef, mesh: Mesh, eps: float | None = None, bc: str = "dirichlet",
             quad: int = 4, factor: float = 8.0) -> DiscreteSystem:
    """Assemble stiffness (coefficient at x/eps if eps given) and mass.

    coef: CoefficientField, constant (d, d) array, scalar, or None for
    the identity.  Enforces the resolution rule h <= eps/factor and
    requires quadrature order >= 4 for oscillating coefficients.
    """
    if eps is not None:
        # the rule binds the requested spacing; the relaxed mesh's max
        # edge runs a bounded factor above it and is reported separately
        h = mesh.h_target if mesh.h_target is not None else mesh.h
        if h > eps / factor + 1e-12:
            raise ValueError(
                f"resolution rule violated: h = {h:g} but eps/{factor:g} = "
                f"{eps / factor:g}; use h <= {eps / factor:g}")
        if quad < 4:
            raise ValueError("quadrature order >= 4 required for oscillating coefficients")
    Ke = _stiffness_data(mesh, coef, eps, quad)
    K = _scatter(mesh, Ke)
    M = _scatter(mesh, _mass_data(mesh))
    return DiscreteSystem(mesh, K, M, bc, quad, eps)


def solve_source(system: DiscreteSystem, rhs=None, dirichlet_data=None, **kw):
    return system.solve_source(rhs=rhs, dirichlet_data=dirichlet_data, **kw)


def load_vector(mesh: Mesh, f, quad: int = 4) -> np.ndarray:
    """Assemble the load vector of a callable source by quadrature."""
    qp, qw = _rule(mesh.dim, quad)
    shp = _shape_values(mesh.dim, qp)             # (nq, nloc)
    F = np.zeros(mesh.n_vertices)
    nt = len(mesh.cells)
    for start in range(0, nt, _CHUNK):
        sl = slice(start, min(start + _CHUNK, nt))
        _, area, Fmat = _geometry(mesh, sl)
        x = _quad_points(mesh, qp, Fmat, sl)
        fv = np.asarray(f(x.reshape(-1, mesh.dim)), dtype=float).reshape(x.shape[:2])
        Fe = area[:, None] * np.einsum("tq,q,qi->ti", fv, qw, shp)
        np.add.at(F, mesh.cells[sl], Fe)
    return F


def flux_load_vector(mesh: Mesh, flux, quad: int = 4) -> np.ndarray:
    """Assemble l(v) = sum_T |T| sum_q w_q  q(x_q) . grad v|_T.

    flux(x, sl, shp) must return the (tc, nq, d) flux values at the
    physical quadrature points x of the cell block sl; shp is the
    (nq, nloc) table of P1 shape values so the callback can interpolate
    nodal data restricted to mesh.cells[sl].  Using the same quadrature
    order here as in the stiffness assembly makes the resulting load
    exactly Galerkin-consistent: if q = A grad(u_h) for a P1 field u_h
    then the assembled vector equals the stiffness matrix applied to u_h.
    """
    qp, qw = _rule(mesh.dim, quad)
    shp = _shape_values(mesh.dim, qp)
    F = np.zeros(mesh.n_vertices)
    nt = len(mesh.cells)
    for start in range(0, nt, _CHUNK):
        sl = slice(start, min(start + _CHUNK, nt))
        g, area, Fmat = _geometry(mesh, sl)
        x = _quad_points(mesh, qp, Fmat, sl)
        q = np.asarray(flux(x, sl, shp), dtype=float)
        if q.shape != x.shape:
            raise ValueError(f"flux returned shape {q.shape}, expected {x.shape}")
        Fq = np.einsum("q,tqa->ta", qw, q)
        Fe = area[:, None] * np.einsum("tia,ta->ti", g, Fq)
        np.add.at(F, mesh.cells[sl], Fe)
    return F


def interpolate_two_scale(target, pfield: PeriodicField, eps: float,
                          gradient: bool = False):
    """Nodal values of pfield(x/eps); optionally also its chain-rule gradient.

    target is a Mesh (evaluation at vertices) or an (n, d) point array.
    With gradient=True returns (values, grads) where grads[:, l] is
    d/dx_l [pfield(x/eps)] = (1/eps) * (d_l pfield)(x/eps).
    """
    pts = target.vertices if isinstance(target, Mesh) else np.asarray(target, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    y = pts / eps
    vals = pfield.eval(y)
    if not gradient:
        return vals
    g = np.stack([gk.eval(y) for gk in pfield.grad()], axis=-1) / eps
    return vals, g


def cell_gradients(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """(nt, d) gradient of the P1 interpolant on each cell."""
    g, _, _ = _geometry(mesh)
    return np.einsum("ti,tid->td", u[mesh.cells], g)


def recover_gradient(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """(n, d) nodal gradient: measure-weighted average of cell gradients."""
    gt = cell_gradients(mesh, u)
    w = mesh.areas()
    idx = mesh.cells.ravel()
    rep = mesh.dim + 1
    den = np.bincount(idx, weights=np.repeat(w, rep), minlength=mesh.n_vertices)
    out = np.empty((mesh.n_vertices, mesh.dim))
    for j in range(mesh.dim):
        num = np.bincount(idx, weights=np.repeat(w * gt[:, j], rep),
                          minlength=mesh.n_vertices)
        out[:, j] = num / den
    return out


def recover_hessian(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """(n, d, d) symmetrized nodal Hessian: recovered gradient of each
    component of the recovered gradient."""
    G = recover_gradient(mesh, u)
    H = np.stack([recover_gradient(mesh, G[:, j]) for j in range(mesh.dim)], axis=1)
    return 0.5 * (H + H.transpose(0, 2, 1))


def h1_seminorm(mesh: Mesh, u: np.ndarray, weight: np.ndarray | None = None) -> float:
    """Broken H1 seminorm; optional per-cell weight multiplies |grad u|^2."""
    g2 = (cell_gradients(mesh, u) ** 2).sum(axis=1)
    if weight is not None:
        g2 = g2 * weight
    return float(np.sqrt((mesh.areas() * g2).sum()))


def transfer(src: Mesh, values: np.ndarray, target) -> np.ndarray:
    """Evaluate a nodal field of src at the vertices of another mesh
    (or at an (n, d) point array) by P1 interpolation.

    Points falling outside src's polygonal hull (boundary slivers of a
    finer target mesh) interpolate along the nearest boundary edge of
    src, the continuous extension of the P1 boundary trace.  Accepts
    (n,) or (n, k) values.
    """
    pts = target.vertices if isinstance(target, Mesh) else np.asarray(target, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    vals = np.asarray(values, dtype=float)
    single = vals.ndim == 1
    cols = vals[:, None] if single else vals
    if src.dim == 1:
        x = src.vertices[:, 0]
        order = np.argsort(x)
        out = np.column_stack([np.interp(pts[:, 0], x[order], c[order])
                               for c in cols.T])
        return out[:, 0] if single else out

    import matplotlib.tri as mtri

    tri = mtri.Triangulation(src.vertices[:, 0], src.vertices[:, 1], src.cells)
    finder = mtri.TrapezoidMapTriFinder(tri)
    miss = finder(pts[:, 0], pts[:, 1]) == -1
    if miss.any():
        ia, ib, t = _boundary_segment_weights(src, pts[miss])
    out = np.empty((len(pts), cols.shape[1]))
    for j, c in enumerate(cols.T):
        interp = mtri.LinearTriInterpolator(tri, c, trifinder=finder)
        col = np.asarray(interp(pts[:, 0], pts[:, 1]).filled(np.nan), dtype=float)
        if miss.any():
            col[miss] = (1.0 - t) * c[ia] + t * c[ib]
        out[:, j] = col
    return out[:, 0] if single else out


def _boundary_segment_weights(src: Mesh, pts: np.ndarray):
    """Nearest boundary-edge interpolation data for points outside src.

    Returns endpoint indices (ia, ib) and parameters t in [0, 1] so that
    (1-t) v[ia] + t v[ib] extends the P1 boundary trace.
    """
    ring = src.boundary_edges()[:, 0]            # CCW-ordered boundary vertices
    rp = src.vertices[ring]
    _, pos = cKDTree(rp).query(pts)
    nb = len(ring)
    best_d = np.full(len(pts), np.inf)
    ia = np.empty(len(pts), dtype=np.int64)
    ib = np.empty(len(pts), dtype=np.int64)
    tt = np.empty(len(pts))
    for shift in (-1, 0):                        # the two edges touching the hit
        j0 = (pos + shift) % nb
        j1 = (j0 + 1) % nb
        a, b = rp[j0], rp[j1]
        ab = b - a
        t = np.clip(((pts - a) * ab).sum(1) / (ab * ab).sum(1), 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.linalg.norm(pts - proj, axis=1)
        take = d < best_d
        best_d[take] = d[take]
        ia[take] = ring[j0[take]]
        ib[take] = ring[j1[take]]
        tt[take] = t[take]
    return ia, ib, tt
