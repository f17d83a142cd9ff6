"""Periodic cell problems on the unit torus by Fourier collocation.

Solves, for a symmetric elliptic coefficient A(y) sampled on a uniform
N^d grid:

* first-order correctors chi_j:      div(A(grad chi_j + e_j)) = 0
* second-order correctors upsilon_ij (right side below)
* flux potentials b_ijk = d_i f_jk - d_j f_ik with  Lap f_jk = g_jk,
  g_jk = a_jk + a_jl d_l chi_k - ahat_jk  (so d_i b_ijk = g_jk)
* auxiliary potentials B_l with  -Lap B_l = chi_l

and the homogenized tensor ahat_ij = <a_ij + a_ik d_k chi_j>.

The operator -div(A grad .) is applied spectrally (FFT differentiation,
pointwise coefficient multiplication) and inverted by conjugate gradients
preconditioned with the constant-coefficient inverse Laplacian; the
constant mode is projected out after every iteration.

With the Nyquist derivative zeroed (even N), the discrete gradient also
annihilates every mode whose axis frequencies all lie in {0, N/2}.  Those
modes span the operator's kernel and are orthogonal to its range, so each
right side is projected onto the range before inversion; whatever aliased
content a coarse grid puts on the kernel modes is truncation error, not
part of the discrete system.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field as dfield

import numpy as np

from .coeff import CoefficientField

__all__ = [
    "PeriodicField", "CorrectorSet", "CellSolveError",
    "solve_chi", "homogenized_tensor", "solve_upsilon",
    "solve_flux_potentials", "solve_poisson_periodic",
    "solve_correctors", "save_correctors", "load_correctors", "cache_key",
]


class CellSolveError(RuntimeError):
    """Iteration cap reached; carries the final residual."""

    def __init__(self, msg: str, residual: float):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


class PeriodicField:
    """Scalar 1-periodic field sampled on a uniform N^d grid.

    Evaluation at arbitrary points uses the trigonometric interpolant;
    modes below 1e-13 of the peak are dropped, which keeps point
    evaluation cheap without losing accuracy for smooth fields.
    """

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=float)
        self.dim = self.values.ndim
        self.N = self.values.shape[0]
        self._modes = None

    def mean(self) -> float:
        return float(self.values.mean())

    def _mode_table(self):
        if self._modes is None:
            vh = np.fft.fftn(self.values) / self.values.size
            k = np.fft.fftfreq(self.N, 1.0 / self.N)
            grids = np.meshgrid(*([k] * self.dim), indexing="ij")
            peak = max(np.abs(vh).max(), 1e-300)
            mask = np.abs(vh) > 1e-13 * peak
            self._modes = (
                np.stack([g[mask] for g in grids], axis=1),  # (K, d) wavenumbers
                vh[mask],                                    # (K,) coefficients
            )
        return self._modes

    def eval(self, points: np.ndarray) -> np.ndarray:
        """Trigonometric interpolation at points of shape (P, d) or (P,)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        kk, cc = self._mode_table()
        if len(cc) == 0:
            return np.zeros(len(pts))
        out = np.empty(len(pts))
        chunk = max(1, int(4e6 / max(len(cc), 1)))
        for s in range(0, len(pts), chunk):
            E = np.exp(2j * np.pi * (pts[s:s + chunk] @ kk.T))
            out[s:s + chunk] = (E @ cc).real
        return out

    def grad(self) -> list["PeriodicField"]:
        """Spectral partial derivatives, one field per axis."""
        vh = np.fft.fftn(self.values)
        out = []
        for j in range(self.dim):
            out.append(PeriodicField(np.fft.ifftn(_ik(self.N, self.dim, j) * vh).real))
        return out

    def refined(self, n: int) -> "PeriodicField":
        """Resample onto a finer n^d grid by zero-padding the spectrum.

        Reproduces the trigonometric interpolant exactly: original nodes
        keep their values and new nodes receive the band-limited value.
        Nyquist modes are split across +-N/2 so the result stays real.
        """
        if n < self.N:
            raise ValueError(f"refined grid n={n} is coarser than N={self.N}")
        if n == self.N:
            return PeriodicField(self.values.copy())
        spec = np.fft.fftn(self.values) / self.values.size
        k1 = np.rint(np.fft.fftfreq(self.N, 1.0 / self.N)).astype(int)
        grids = np.meshgrid(*([k1] * self.dim), indexing="ij")
        K = np.stack([g.ravel() for g in grids], axis=1)
        C = spec.ravel().copy()
        if self.N % 2 == 0:
            nyq = self.N // 2
            for ax in range(self.dim):
                hit = np.nonzero(K[:, ax] == -nyq)[0]
                C[hit] *= 0.5
                mirror = K[hit].copy()
                mirror[:, ax] = nyq
                K = np.vstack([K, mirror])
                C = np.concatenate([C, C[hit]])
        out = np.zeros((n,) * self.dim, dtype=complex)
        out[tuple(K[:, j] % n for j in range(self.dim))] = C
        vals = np.fft.ifftn(out).real * n ** self.dim
        return PeriodicField(vals)


def _ik(N: int, d: int, axis: int) -> np.ndarray:
    """Spectral first-derivative symbol 2*pi*i*k along one axis.

    The Nyquist mode is zeroed so derivatives of real fields stay real
    and the discrete operator stays symmetric.
    """
    k = np.fft.fftfreq(N, 1.0 / N)
    if N % 2 == 0:
        k[N // 2] = 0.0
    shape = [1] * d
    shape[axis] = N
    return (2j * np.pi * k).reshape(shape)


def _kernel_mask(N: int, d: int) -> np.ndarray:
    """Fourier mask of the modes the discrete gradient annihilates.

    Every axis frequency in {0, N/2}: the constant plus, for even N, the
    Nyquist corners (2^d modes in total).
    """
    axis = np.zeros(N, dtype=bool)
    axis[0] = True
    if N % 2 == 0:
        axis[N // 2] = True
    mask = axis
    for _ in range(d - 1):
        mask = mask[..., None] & axis
    return mask


class _TorusOperator:
    """u -> -div(A grad u) on the N^d torus, with PCG inversion."""

    def __init__(self, A: np.ndarray, N: int, d: int):
        self.A = A  # (d, d) + grid
        self.N, self.d = N, d
        self.ik = [_ik(N, d, j) for j in range(d)]
        k = np.fft.fftfreq(N, 1.0 / N)
        grids = np.meshgrid(*([k] * d), indexing="ij")
        k2 = sum((2 * np.pi * g) ** 2 for g in grids)
        k2.flat[0] = 1.0
        self.abar = float(np.trace(A.reshape(d, d, -1).mean(axis=2)) / d)
        self.inv_sym = 1.0 / (k2 * self.abar)
        self.kernel = _kernel_mask(N, d)

    def project_range(self, u: np.ndarray) -> np.ndarray:
        """Remove the kernel modes (orthogonal complement of the range)."""
        uh = np.fft.fftn(u)
        uh[self.kernel] = 0.0
        return np.fft.ifftn(uh).real

    def grad(self, u: np.ndarray) -> list[np.ndarray]:
        uh = np.fft.fftn(u)
        return [np.fft.ifftn(self.ik[j] * uh).real for j in range(self.d)]

    def apply(self, u: np.ndarray) -> np.ndarray:
        g = self.grad(u)
        acc = np.zeros(u.shape, dtype=complex)
        for i in range(self.d):
            flux_i = sum(self.A[i, j] * g[j] for j in range(self.d))
            acc += self.ik[i] * np.fft.fftn(flux_i)
        return -np.fft.ifftn(acc).real

    def precondition(self, r: np.ndarray) -> np.ndarray:
        rh = np.fft.fftn(r) * self.inv_sym
        rh.flat[0] = 0.0
        return np.fft.ifftn(rh).real

    def solve(self, rhs: np.ndarray, tol: float, what: str) -> tuple[np.ndarray, float, int]:
        """PCG on the range of the operator; returns (solution, residual, iters).

        Stops when the RMS residual drops below tol * max|A| (and below
        tol * RMS(rhs), whichever is tighter to reach first), so the
        advertised residual bound holds in the coefficient's own scale.
        """
        cap = 10 * self.N * self.d
        rhs = self.project_range(rhs)
        nrhs = np.linalg.norm(rhs)
        if nrhs == 0.0:
            return np.zeros_like(rhs), 0.0, 0
        scale = max(np.abs(self.A).max(), 1e-300)
        stop = tol * min(nrhs, scale * np.sqrt(rhs.size))
        x = np.zeros_like(rhs)
        r = rhs.copy()
        z = self.precondition(r)
        p = z.copy()
        rz = float((r * z).sum())
        for it in range(1, cap + 1):
            Kp = self.apply(p)
            alpha = rz / float((p * Kp).sum())
            x += alpha * p
            r -= alpha * Kp
            x -= x.mean()
            r -= r.mean()
            rn = np.linalg.norm(r)
            if rn <= stop:
                return x, rn / nrhs, it
            z = self.precondition(r)
            rz_new = float((r * z).sum())
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise CellSolveError(f"{what}: CG did not converge in {cap} iterations", rn / nrhs)


def _check_grid(N: int) -> None:
    if N < 8 or (N & (N - 1)) != 0:
        raise ValueError(f"grid resolution must be a power of two >= 8, got {N}")


def _operator(field: CoefficientField, N: int) -> _TorusOperator:
    _check_grid(N)
    return _TorusOperator(field.grid_samples(N), N, field.dim)


def solve_chi(field: CoefficientField, N: int, tol: float = 1e-10):
    """First-order correctors; returns (chi list, residuals list)."""
    op = _operator(field, N)
    d = field.dim
    chis, residuals = [], []
    scale = max(np.abs(op.A).max(), 1.0)
    for j in range(d):
        # rhs = div(A e_j) = d_i a_ij
        acc = np.zeros(op.A.shape[2:], dtype=complex)
        for i in range(d):
            acc += op.ik[i] * np.fft.fftn(op.A[i, j])
        rhs = np.fft.ifftn(acc).real
        x, _, _ = op.solve(rhs, tol, f"chi[{j}]")
        # RMS residual relative to the coefficient magnitude
        res = np.linalg.norm(op.apply(x) - rhs) / (scale * np.sqrt(rhs.size))
        chis.append(PeriodicField(x))
        residuals.append(float(res))
    return chis, residuals


def homogenized_tensor(field: CoefficientField, chi: list[PeriodicField]) -> np.ndarray:
    """ahat_ij = torus average of a_ij + a_ik d_k chi_j."""
    d = field.dim
    N = chi[0].N
    if len(chi) != d or any(c.values.shape != (N,) * d for c in chi):
        raise ValueError("coefficient samples and correctors use different grids")
    A = field.grid_samples(N)
    ahat = np.zeros((d, d))
    for j in range(d):
        g = chi[j].grad()
        for i in range(d):
            integrand = A[i, j] + sum(A[i, k] * g[k].values for k in range(d))
            ahat[i, j] = integrand.mean()
    return ahat


def _upsilon_rhs(A, ahat, chi, grad_chi, op, i, j):
    # a_ij + a_ik d_k chi_j - ahat_ij + d_k(a_ki chi_j)
    d = len(chi)
    rhs = A[i, j] - ahat[i, j]
    for k in range(d):
        rhs = rhs + A[i, k] * grad_chi[j][k].values
    acc = np.zeros(A.shape[2:], dtype=complex)
    for k in range(d):
        acc += op.ik[k] * np.fft.fftn(A[k, i] * chi[j].values)
    return rhs + np.fft.ifftn(acc).real


def solve_upsilon(field: CoefficientField, chi: list[PeriodicField],
                  ahat: np.ndarray, N: int, tol: float = 1e-10):
    """Second-order correctors upsilon[i][j]; returns (fields, residuals)."""
    op = _operator(field, N)
    d = field.dim
    grad_chi = [c.grad() for c in chi]
    scale = max(np.abs(op.A).max(), 1.0)
    ups = [[None] * d for _ in range(d)]
    residuals = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            rhs = _upsilon_rhs(op.A, ahat, chi, grad_chi, op, i, j)
            m = abs(rhs.mean())
            if m > tol * scale:
                raise ValueError(
                    f"upsilon[{i}][{j}] right side has mean {m:.3e}; "
                    "homogenized tensor inconsistent with correctors"
                )
            rhs = op.project_range(rhs)
            x, _, _ = op.solve(rhs, tol, f"upsilon[{i}][{j}]")
            ups[i][j] = PeriodicField(x)
            residuals[i, j] = np.linalg.norm(op.apply(x) - rhs) / (scale * np.sqrt(rhs.size))
    return ups, residuals


def solve_poisson_periodic(rhs: np.ndarray | PeriodicField, N: int | None = None,
                           tol: float = 1e-10) -> PeriodicField:
    """Solve -Lap u = rhs on the torus; rhs must have mean <= tol."""
    vals = rhs.values if isinstance(rhs, PeriodicField) else np.asarray(rhs, dtype=float)
    if N is not None and vals.shape[0] != N:
        raise ValueError("rhs grid does not match requested resolution")
    scale = max(np.abs(vals).max(), 1.0)
    if abs(vals.mean()) > tol * scale:
        raise ValueError(f"rhs mean {vals.mean():.3e} exceeds tolerance; no periodic solution")
    d = vals.ndim
    n = vals.shape[0]
    k = np.fft.fftfreq(n, 1.0 / n)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    k2 = sum((2 * np.pi * g) ** 2 for g in grids)
    k2.flat[0] = 1.0
    uh = np.fft.fftn(vals) / k2
    uh.flat[0] = 0.0
    return PeriodicField(np.fft.ifftn(uh).real)


def solve_flux_potentials(field: CoefficientField, chi: list[PeriodicField],
                          ahat: np.ndarray, N: int, tol: float = 1e-10):
    """Antisymmetric flux potentials b[i][j][k]; returns (fields, residuals).

    g_jk = a_jk + a_jl d_l chi_k - ahat_jk has zero mean by the definition
    of ahat; b_ijk = d_i f_jk - d_j f_ik with Lap f_jk = g_jk satisfies the
    divergence identity d_i b_ijk = g_jk because d_j f_jk is harmonic,
    periodic and mean-zero, hence zero.  Antisymmetry in (i, j) holds
    structurally.
    """
    _check_grid(N)
    d = field.dim
    A = field.grid_samples(N)
    grad_chi = [c.grad() for c in chi]
    scale = max(np.abs(A).max(), 1.0)
    ik = [_ik(N, d, j) for j in range(d)]

    g = np.empty((d, d) + A.shape[2:])
    for j in range(d):
        for k in range(d):
            g[j, k] = A[j, k] - ahat[j, k] + sum(
                A[j, l] * grad_chi[k][l].values for l in range(d))
            m = abs(g[j, k].mean())
            if m > tol * scale:
                raise ValueError(f"flux discrepancy g[{j}][{k}] has mean {m:.3e}")
    # Lap f_jk = g_jk  <=>  -Lap f_jk = -g_jk
    f_hat = np.empty((d, d) + A.shape[2:], dtype=complex)
    for j in range(d):
        for k in range(d):
            f_hat[j, k] = np.fft.fftn(solve_poisson_periodic(-g[j, k], N, tol).values)

    b = [[[None] * d for _ in range(d)] for _ in range(d)]
    for j in range(d):
        for k in range(d):
            for i in range(d):
                vals = np.fft.ifftn(ik[i] * f_hat[j, k] - ik[j] * f_hat[i, k]).real
                b[i][j][k] = PeriodicField(vals)
    # one divergence identity per (j, k)
    residuals = np.zeros((d, d))
    npts = np.sqrt(g[0, 0].size)
    for j in range(d):
        for k in range(d):
            div = np.zeros(A.shape[2:], dtype=complex)
            for i in range(d):
                div += ik[i] * np.fft.fftn(b[i][j][k].values)
            residuals[j, k] = np.linalg.norm(np.fft.ifftn(div).real - g[j, k]) / (scale * npts)
    return b, residuals


@dataclass
class CorrectorSet:
    """All cell-problem outputs for one coefficient field at resolution N.

    Gradient fields are spectral derivatives on the same grid, kept
    alongside values because the downstream expansions need them.
    """

    family: str
    params: tuple
    dim: int
    N: int
    tol: float
    chi: list               # d PeriodicFields
    upsilon: list           # d x d PeriodicFields
    b: list                 # d x d x d PeriodicFields, antisymmetric in (i, j)
    bigB: list              # d PeriodicFields, -Lap B_l = chi_l
    A_hat: np.ndarray
    residuals: dict
    grad_chi: list = dfield(default=None)      # grad_chi[j][l] = d_l chi_j
    grad_upsilon: list = dfield(default=None)  # grad_upsilon[i][j][l]

    def __post_init__(self):
        if self.grad_chi is None:
            self.grad_chi = [c.grad() for c in self.chi]
        if self.grad_upsilon is None:
            self.grad_upsilon = [[u.grad() for u in row] for row in self.upsilon]


def solve_correctors(field: CoefficientField, N: int, tol: float = 1e-10) -> CorrectorSet:
    """Run the full cell pipeline: chi, ahat, upsilon, b, bigB."""
    chi, res_chi = solve_chi(field, N, tol)
    ahat = homogenized_tensor(field, chi)
    ups, res_ups = solve_upsilon(field, chi, ahat, N, tol)
    b, res_b = solve_flux_potentials(field, chi, ahat, N, tol)
    bigB = [solve_poisson_periodic(c.values, N, tol) for c in chi]
    res_B = [
        float(np.linalg.norm(_laplace_residual(B, c)) / np.sqrt(c.values.size))
        for B, c in zip(bigB, chi)
    ]
    return CorrectorSet(
        family=field.name, params=field.params, dim=field.dim, N=N, tol=tol,
        chi=chi, upsilon=ups, b=b, bigB=bigB, A_hat=ahat,
        residuals={
            "chi": res_chi,
            "upsilon": res_ups.tolist(),
            "b": res_b.tolist(),
            "bigB": res_B,
        },
    )


def _laplace_residual(B: PeriodicField, chi: PeriodicField) -> np.ndarray:
    n, d = B.N, B.dim
    k = np.fft.fftfreq(n, 1.0 / n)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    k2 = sum((2 * np.pi * g) ** 2 for g in grids)
    lap = np.fft.ifftn(-k2 * np.fft.fftn(B.values)).real
    return (-lap - chi.values).ravel()


# ---------------------------------------------------------------------------
# Binary cache.  Layout (little-endian):
#   8 bytes magic b"EHCORR01"
#   int64 d, int64 N, int64 nfields, float64 tol
#   d*d float64: A_hat, row-major
#   nfields arrays of N^d float64, row-major, in the fixed order
#     chi[0..d), upsilon[0][0..d) .. upsilon[d)[..], b[i][j][k] lexicographic,
#     bigB[0..d)
# ---------------------------------------------------------------------------

_MAGIC = b"EHCORR01"


def cache_key(family: str, params: tuple, N: int, tol: float) -> str:
    blob = repr((family, tuple(params), int(N), float(tol))).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _field_list(cs: CorrectorSet):
    d = cs.dim
    out = list(cs.chi)
    for i in range(d):
        out.extend(cs.upsilon[i])
    for i in range(d):
        for j in range(d):
            out.extend(cs.b[i][j])
    out.extend(cs.bigB)
    return out


def save_correctors(cs: CorrectorSet, path) -> None:
    fields = _field_list(cs)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqd", cs.dim, cs.N, len(fields), cs.tol))
        fh.write(np.ascontiguousarray(cs.A_hat, dtype="<f8").tobytes())
        for f in fields:
            fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_correctors(path, field: CoefficientField) -> CorrectorSet:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a corrector cache file")
        d, N, nfields, tol = struct.unpack("<qqqd", fh.read(32))
        A_hat = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
        expect = d + d * d + d ** 3 + d
        if nfields != expect:
            raise ValueError(f"{path}: field count {nfields} != expected {expect}")
        raw = [
            np.frombuffer(fh.read(8 * N ** d), dtype="<f8").reshape((N,) * d).copy()
            for _ in range(nfields)
        ]
    it = iter(raw)
    chi = [PeriodicField(next(it)) for _ in range(d)]
    ups = [[PeriodicField(next(it)) for _ in range(d)] for _ in range(d)]
    b = [[[PeriodicField(next(it)) for _ in range(d)] for _ in range(d)] for _ in range(d)]
    bigB = [PeriodicField(next(it)) for _ in range(d)]
    return CorrectorSet(
        family=field.name, params=field.params, dim=d, N=N, tol=tol,
        chi=chi, upsilon=ups, b=b, bigB=bigB, A_hat=A_hat,
        residuals={"loaded_from": str(path)},
    )
