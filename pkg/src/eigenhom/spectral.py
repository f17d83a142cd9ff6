"""Eigenvalue clusters, spectral projections, and cluster diagnostics.

Extracts the M discrete eigenpairs nearest a target by shift-invert
iteration with a separation certificate, builds the mass-orthonormal
projection bases for the reference and oscillating operators (aligned by
orthogonal Procrustes), and implements the cluster-averaged quantities:
the first-order eigenvalue coefficient from the boundary-layer pairing,
the reciprocal-mean defect identity, and the deflated bordered solve for
the eigenfunction boundary-layer term.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import eigsh, splu

from .fem import DiscreteSystem, FemSolveError


class ClusterError(RuntimeError):
    """Cluster extraction failed (count mismatch or separation)."""

    def __init__(self, msg: str, found: np.ndarray | None = None):
        super().__init__(msg)
        self.found = found


@dataclass(eq=False, repr=False)
class EigenCluster:
    """M eigenpairs nearest a target, with a separation certificate.

    vectors are full nodal fields (zero on the boundary for Dirichlet
    systems), orthonormal in the mass inner product.
    """

    system: DiscreteSystem
    values: np.ndarray          # (M,) ascending
    vectors: np.ndarray         # (n, M) mass-orthonormal
    target: float
    window: float               # half-width about the target
    residuals: np.ndarray       # (M,) scaled ||K v - lam M v||
    separation: float           # distance from target to nearest outside value

    @property
    def multiplicity(self) -> int:
        return len(self.values)


def _full_vectors(system: DiscreteSystem, vecs: np.ndarray) -> np.ndarray:
    if system.bc == "neumann":
        return vecs
    out = np.zeros((system.mesh.n_vertices, vecs.shape[1]))
    out[system.interior] = vecs
    return out


def eigen_cluster(system: DiscreteSystem, target: float, m_expected: int,
                  window: float | None = None, n_extra: int = 4,
                  tol: float = 0.0) -> EigenCluster:
    """The m_expected discrete eigenvalues nearest target, certified separated.

    With an explicit window, the cluster is every eigenvalue within
    |lam - target| <= window and its size must equal m_expected.
    Without one, the m_expected nearest are taken and the window is their
    radius.  Either way no further eigenvalue may lie within 1.5x the
    window, else ClusterError.
    """
    if target <= 0:
        raise ValueError("target must be positive")
    K, Mm = system.stiffness, system.mass
    n = K.shape[0]
    k = min(m_expected + n_extra, n - 1)
    v0 = np.full(n, 1.0 / np.sqrt(n))
    sigma = target
    try:
        vals, vecs = eigsh(K, k=k, M=Mm, sigma=sigma, which="LM", v0=v0, tol=tol)
    except Exception:
        # shift collided with a discrete eigenvalue; nudge and retry
        sigma = target * (1.0 + 1e-7) + 1e-12
        vals, vecs = eigsh(K, k=k, M=Mm, sigma=sigma, which="LM", v0=v0, tol=tol)

    dist = np.abs(vals - target)
    order = np.argsort(dist, kind="stable")
    if window is None:
        take = order[:m_expected]
        half = max(dist[take].max(), 1e-12 * max(target, 1.0))
    else:
        half = float(window)
        take = np.where(dist <= half)[0]
        if len(take) != m_expected:
            raise ClusterError(
                f"expected {m_expected} eigenvalues within {half:g} of {target:g}, "
                f"found {len(take)}: {np.sort(vals[dist <= 1.5 * half])}",
                found=np.sort(vals))
    rest = np.setdiff1d(np.arange(k), take)
    separation = dist[rest].min() if len(rest) else np.inf
    if separation <= 1.5 * half:
        raise ClusterError(
            f"separation certificate failed: nearest outside eigenvalue at "
            f"distance {separation:g} <= 1.5 x window {half:g} "
            f"(values {np.sort(vals)})", found=np.sort(vals))

    lam = vals[take]
    V = vecs[:, take]
    asc = np.argsort(lam)
    lam, V = lam[asc], V[:, asc]

    if system.bc == "neumann":
        # project out the constant mode (exact kernel of K)
        m1 = system.mass_times_one
        V = V - np.outer(np.ones(n), (m1 @ V) / m1.sum())

    # enforce mass-orthonormality (ARPACK is close; make it exact)
    G = V.T @ (Mm @ V)
    L = np.linalg.cholesky(G)
    V = np.linalg.solve(L, V.T).T

    KV, MV = K @ V, Mm @ V
    res = np.linalg.norm(KV - lam * MV, axis=0)
    res /= np.abs(lam) * np.linalg.norm(MV, axis=0)

    return EigenCluster(system, lam, _full_vectors(system, V), target,
                        half, res, float(separation))


def cluster_mean(cluster: EigenCluster) -> tuple[float, float]:
    """(mean of cluster values, mean of their reciprocals)."""
    if cluster.multiplicity == 0:
        raise ValueError("empty cluster")
    return float(cluster.values.mean()), float((1.0 / cluster.values).mean())


@dataclass(eq=False, repr=False)
class ProjectionPair:
    """Mass-orthonormal bases of the reference and oscillating eigenspaces.

    basis_eps is aligned to basis0 by orthogonal Procrustes; the
    projections themselves are basis-free.
    """

    system: DiscreteSystem      # supplies the mass inner product
    lam0: float
    values_eps: np.ndarray
    basis0: np.ndarray          # (n, M)
    basis_eps: np.ndarray       # (n, M), aligned
    align: np.ndarray           # (M, M) orthogonal map applied to the raw basis

    @property
    def multiplicity(self) -> int:
        return self.basis0.shape[1]

    def project(self, which: str, f: np.ndarray) -> np.ndarray:
        if which == "S0":
            V = self.basis0
        elif which == "Seps":
            V = self.basis_eps
        else:
            raise ValueError(f"which must be 'S0' or 'Seps', got {which!r}")
        f = np.asarray(f, dtype=float)
        if f.shape[0] != V.shape[0]:
            raise ValueError("field lives on a different mesh")
        return V @ (V.T @ (self.system.M_full @ f))


def projection_pair(cluster_eps: EigenCluster, cluster0: EigenCluster) -> ProjectionPair:
    if cluster_eps.system.mesh is not cluster0.system.mesh:
        raise ValueError("clusters must live on the same mesh")
    if cluster_eps.multiplicity != cluster0.multiplicity:
        raise ValueError("cluster multiplicities differ")
    Mm = cluster0.system.M_full
    G = cluster_eps.vectors.T @ (Mm @ cluster0.vectors)
    U, _, Wt = np.linalg.svd(G)
    R = U @ Wt
    return ProjectionPair(cluster0.system, float(cluster0.values.mean()),
                          cluster_eps.values.copy(), cluster0.vectors.copy(),
                          cluster_eps.vectors @ R, R)


def project(pair: ProjectionPair, which: str, f: np.ndarray) -> np.ndarray:
    return pair.project(which, f)


def projection_invariants(pair: ProjectionPair, n_vectors: int = 20,
                          seed: int = 0) -> dict:
    """Max defects of S^2 = S, mass self-adjointness, and rank M over
    random vectors; all should sit at solver tolerance."""
    rng = np.random.default_rng(seed)
    n = pair.basis0.shape[0]
    Mm = pair.system.M_full
    out = {"idempotence": 0.0, "self_adjoint": 0.0}
    coeffs = {"S0": [], "Seps": []}
    for _ in range(n_vectors):
        f = rng.standard_normal(n)
        g = rng.standard_normal(n)
        fn = np.sqrt(f @ (Mm @ f))
        for which in ("S0", "Seps"):
            Sf = pair.project(which, f)
            SSf = pair.project(which, Sf)
            out["idempotence"] = max(out["idempotence"],
                                     np.sqrt((SSf - Sf) @ (Mm @ (SSf - Sf))) / fn)
            sym = abs(Sf @ (Mm @ g) - f @ (Mm @ pair.project(which, g)))
            gn = np.sqrt(g @ (Mm @ g))
            out["self_adjoint"] = max(out["self_adjoint"], sym / (fn * gn))
            V = pair.basis0 if which == "S0" else pair.basis_eps
            coeffs[which].append(V.T @ (Mm @ f))
    for which, cs in coeffs.items():
        sv = np.linalg.svd(np.array(cs).T, compute_uv=False)
        out[f"rank_{which}"] = int((sv > 1e-8 * sv[0]).sum())
    return out


def theta_from_pairing(system: DiscreteSystem, kbl_phi: np.ndarray,
                       phis: np.ndarray, lam0: float,
                       check_seed: int | None = 0) -> float:
    """First-order eigenvalue coefficient from the boundary-layer pairing.

    theta = -(lam0/M) sum_j <kbl_phi[:, j], phis[:, j]> in the mass inner
    product, where kbl_phi[:, j] is the boundary-layer image of basis
    member phis[:, j].  With check_seed set, recomputes under a random
    orthonormal re-basis (the pairing is linear in phi, so the images
    rotate with the basis) and asserts agreement to 1e-8.
    """
    kbl_phi = np.atleast_2d(kbl_phi.T).T
    phis = np.atleast_2d(phis.T).T
    if kbl_phi.shape != phis.shape:
        raise ValueError(f"shape mismatch {kbl_phi.shape} vs {phis.shape}")
    m = phis.shape[1]
    Mm = system.M_full

    def pairing(kp, ph):
        return -(lam0 / m) * float(np.einsum("nj,nj->", kp, Mm @ ph))

    theta = pairing(kbl_phi, phis)
    if check_seed is not None:
        rng = np.random.default_rng(check_seed)
        Q = np.linalg.qr(rng.standard_normal((m, m)))[0]
        theta_rot = pairing(kbl_phi @ Q, phis @ Q)
        if abs(theta_rot - theta) > 1e-8 * max(1.0, abs(theta)):
            raise FemSolveError(
                f"pairing not basis-independent: {theta!r} vs {theta_rot!r}")
    return theta


def osborn_defect(system: DiscreteSystem, t_eps_action, t0_action,
                  basis0: np.ndarray, mu0: float, mu_bar_eps: float,
                  signed: bool = False) -> float:
    """|mu_bar_eps - mu0 - M^-1 sum_j <(T_eps - T0) phi_j, phi_j>|.

    The actions are discrete source solves (inverse operators); the
    defect is second order in the operator difference on the eigenspace.
    signed=True returns the defect without the absolute value (so that
    values from several meshes can be extrapolated before taking |.|).
    """
    basis0 = np.atleast_2d(basis0.T).T
    m = basis0.shape[1]
    Mm = system.M_full
    acc = 0.0
    for j in range(m):
        phi = basis0[:, j]
        diff = t_eps_action(phi) - t0_action(phi)
        acc += float(diff @ (Mm @ phi))
    value = mu_bar_eps - mu0 - acc / m
    return value if signed else abs(value)


def psi_bl_solve(system0: DiscreteSystem, lam0: float, basis0: np.ndarray,
                 kbl_g: np.ndarray, return_info: bool = False):
    """Deflated solve for the eigenfunction boundary-layer term.

    Solves (L0 - lam0) psi = -lam0 S0 kbl_g in the domain with
    psi = kbl_g on the boundary and <psi, phi_j> = 0 for every basis
    member, through one bordered symmetric factorization with Lagrange
    multipliers.  Returns the full nodal psi (boundary rows equal kbl_g).
    kbl_g may carry several columns; they share the factorization and a
    matching block of psi columns comes back.
    """
    if system0.bc != "dirichlet":
        raise ValueError("psi_bl_solve expects a Dirichlet system")
    basis0 = np.atleast_2d(basis0.T).T
    mesh = system0.mesh
    n = mesh.n_vertices
    kbl_g = np.asarray(kbl_g, dtype=float)
    single = kbl_g.ndim == 1
    G = kbl_g[:, None] if single else kbl_g
    if G.shape[0] != n:
        raise ValueError(f"kbl_g must hold full nodal fields ({n}, ...)")
    ii = system0.interior
    bb = mesh.boundary_indices()
    Mm = system0.M_full

    # S0 kbl_g and the volume right-hand side
    coeff = basis0.T @ (Mm @ G)
    F = -lam0 * (Mm @ (basis0 @ coeff))

    A_full = (system0.K_full - lam0 * Mm).tocsr()
    A = A_full[ii][:, ii]
    A_ib = A_full[ii][:, bb]
    psi_b = G[bb]
    rhs = F[ii] - A_ib @ psi_b

    C = (Mm @ basis0)[ii]                       # orthogonality constraints
    d = -(Mm @ basis0)[bb].T @ psi_b
    m = basis0.shape[1]
    B = sparse.bmat([[A, sparse.csc_matrix(C)],
                     [sparse.csc_matrix(C.T), None]], format="csc")
    try:
        lu = splu(B)
    except RuntimeError as exc:
        raise FemSolveError(f"bordered factorization failed (lam0/basis "
                            f"inconsistent?): {exc}") from exc
    sol = lu.solve(np.vstack([rhs, d]))
    psi_i, mult = sol[:len(ii)], sol[len(ii):]

    psi = np.zeros((n, G.shape[1]))
    psi[ii] = psi_i
    psi[bb] = psi_b

    scale = max(np.linalg.norm(rhs), np.linalg.norm(F), 1e-300)
    residual = np.linalg.norm(A @ psi_i + A_ib @ psi_b - F[ii] + C @ mult) / scale
    orth = np.abs(basis0.T @ (Mm @ psi)).max()
    if residual > 1e-8:
        raise FemSolveError(f"deflated solve residual {residual:.3e} > 1e-8")
    if orth > 1e-10:
        raise FemSolveError(f"orthogonality defect {orth:.3e} > 1e-10")
    psi_out = psi[:, 0] if single else psi
    if not return_info:
        return psi_out
    return psi_out, {"residual": residual, "orthogonality_defect": orth,
                     "multiplier": mult[:, 0] if single else mult}


def resolvent_identity_defect(system0: DiscreteSystem, cluster0: EigenCluster,
                              shift: float = 1.0) -> float:
    """Solve (z - T0) u = phi discretely at z = mu0 + shift for each
    cluster vector and compare with the closed form u = phi/(z - mu).

    T0 is the inverse operator, so (z - T0) u = g becomes
    (z K0 - M) u = K0 g on the solve space.  Returns the max mass-norm
    error over the cluster; discrete exactness puts it at solver level.
    """
    K, Mm = system0.stiffness, system0.mass
    ii = system0.interior
    z = 1.0 / cluster0.values[0] + shift
    lu = splu((z * K - Mm).tocsc())
    worst = 0.0
    for j in range(cluster0.multiplicity):
        phi = cluster0.vectors[ii, j] if system0.bc == "dirichlet" \
            else cluster0.vectors[:, j]
        u = lu.solve(K @ phi)
        mu_j = 1.0 / cluster0.values[j]
        err = u - phi / (z - mu_j)
        worst = max(worst, float(np.sqrt(err @ (Mm @ err))))
    return worst
