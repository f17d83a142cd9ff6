"""Meshes for intervals, disks and ellipses with quality guarantees.

2D meshes are built by a force-equilibrium relaxation: boundary vertices
placed exactly on the curve with equal arc-length spacing, interior
vertices seeded on a hexagonal lattice and relaxed by edge springs over
repeated Delaunay triangulations (convex domains, so every Delaunay
triangle lies inside the boundary polygon).  Resulting min angles sit
around 34 degrees; construction fails loudly below 20.

Boundary vertices satisfy the defining curve equation to 1e-12.  The
mesh text format is documented at the bottom of this module next to
``save_mesh``/``load_mesh``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np
from scipy.spatial import Delaunay

__all__ = [
    "Domain", "Mesh", "MeshQualityError", "mesh_domain",
    "save_mesh", "load_mesh",
]


class MeshQualityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Domain:
    """Bounded domain descriptor.

    kind 'interval': params (x0, x1); kind 'disk': params (radius,);
    kind 'ellipse': params (a, b) for (x/a)^2 + (y/b)^2 = 1, a >= b > 0.
    Disks and ellipses are centred at the origin (strictly convex, smooth).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("interval", "disk", "ellipse"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "ellipse" and self.params[0] < self.params[1]:
            raise ValueError("ellipse expects a >= b")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    # --- geometry ---------------------------------------------------------
    def boundary_project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest boundary point and distance for each point (2D kinds)."""
        if self.kind == "disk":
            R = self.params[0]
            r = np.hypot(pts[:, 0], pts[:, 1])
            r = np.where(r == 0, 1e-300, r)
            proj = pts * (R / r)[:, None]
            return proj, np.abs(np.hypot(pts[:, 0], pts[:, 1]) - R)
        if self.kind == "ellipse":
            return _ellipse_project(pts, *self.params)
        raise ValueError("boundary_project is a 2D operation")

    def distance_to_boundary(self, pts: np.ndarray) -> np.ndarray:
        """delta(x) = dist(x, boundary); exact (closed form or Newton)."""
        if self.kind == "interval":
            x0, x1 = self.params
            x = np.asarray(pts).reshape(-1)
            return np.minimum(x - x0, x1 - x)
        if self.kind == "disk":
            R = self.params[0]
            return np.abs(R - np.hypot(pts[:, 0], pts[:, 1]))
        _, dist = _ellipse_project(np.atleast_2d(pts), *self.params)
        return dist

    def inside(self, pts: np.ndarray) -> np.ndarray:
        if self.kind == "disk":
            R = self.params[0]
            return np.hypot(pts[:, 0], pts[:, 1]) < R
        a, b = self.params
        return (pts[:, 0] / a) ** 2 + (pts[:, 1] / b) ** 2 < 1.0

    def outward_normal(self, q: np.ndarray) -> np.ndarray:
        """Unit outward normal at boundary points q."""
        q = np.atleast_2d(q)
        if self.kind == "disk":
            return q / np.linalg.norm(q, axis=1, keepdims=True)
        a, b = self.params
        n = np.c_[q[:, 0] / a ** 2, q[:, 1] / b ** 2]
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def boundary_points(self, n: int) -> np.ndarray:
        """n points on the boundary, equally spaced in arc length."""
        if self.kind == "disk":
            R = self.params[0]
            t = 2 * np.pi * np.arange(n) / n
            return np.c_[R * np.cos(t), R * np.sin(t)]
        a, b = self.params
        # invert cumulative arc length on a fine parameter grid
        tf = np.linspace(0.0, 2 * np.pi, max(400 * n, 4000))
        seg = np.hypot(a * np.diff(np.cos(tf)), b * np.diff(np.sin(tf)))
        s = np.concatenate([[0.0], np.cumsum(seg)])
        targets = s[-1] * np.arange(n) / n
        t = np.interp(targets, s, tf)
        return np.c_[a * np.cos(t), b * np.sin(t)]

    def perimeter(self) -> float:
        if self.kind == "disk":
            return 2 * np.pi * self.params[0]
        a, b = self.params
        tf = np.linspace(0.0, 2 * np.pi, 200001)
        return float(np.hypot(a * np.diff(np.cos(tf)), b * np.diff(np.sin(tf))).sum())

    def label(self) -> str:
        return f"{self.kind} " + " ".join(repr(p) for p in self.params)


def _ellipse_project(pts: np.ndarray, a: float, b: float):
    """Nearest-point projection onto the ellipse by Newton iteration.

    Coarse parameter scan picks the basin, Newton polishes the stationary
    condition (p - q(t)) . q'(t) = 0 to ~1e-14.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    cand = np.linspace(0, 2 * np.pi, 33)[:-1]
    qx, qy = a * np.cos(cand), b * np.sin(cand)
    d2 = (pts[:, 0:1] - qx) ** 2 + (pts[:, 1:2] - qy) ** 2
    t = cand[np.argmin(d2, axis=1)]
    for _ in range(60):
        ct, st = np.cos(t), np.sin(t)
        dx, dy = pts[:, 0] - a * ct, pts[:, 1] - b * st
        g = dx * (-a * st) + dy * (b * ct)                    # d/dt of half distance^2, negated
        gp = dx * (-a * ct) + dy * (-b * st) + (a * st) ** 2 + (b * ct) ** 2
        step = g / np.where(np.abs(gp) < 1e-300, 1e-300, gp)
        step = np.clip(step, -0.5, 0.5)
        t = t - step
        if np.max(np.abs(step)) < 1e-15:
            break
    proj = np.c_[a * np.cos(t), b * np.sin(t)]
    dist = np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])
    return proj, dist


@dataclass
class Mesh:
    """Simplicial mesh: segments in 1D, triangles in 2D (CCW oriented)."""

    domain: Domain
    vertices: np.ndarray        # (n, dim)
    cells: np.ndarray           # (nt, dim+1) vertex indices
    boundary: np.ndarray        # (n,) bool mask
    h: float = dfield(default=0.0)          # max edge length
    min_angle: float = dfield(default=90.0)  # degrees (2D)
    h_target: float | None = dfield(default=None)  # requested spacing

    _areas: np.ndarray = dfield(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        if self.vertices.ndim == 1:
            self.vertices = self.vertices[:, None]
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        if self.dim == 2:
            self._orient_ccw()
        if self.h == 0.0:
            self.h = float(self._edge_lengths().max())
        if self.dim == 2 and self.min_angle == 90.0:
            self.min_angle = float(self.angles().min())

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def _orient_ccw(self):
        p = self.vertices
        t = self.cells
        cross = ((p[t[:, 1], 0] - p[t[:, 0], 0]) * (p[t[:, 2], 1] - p[t[:, 0], 1])
                 - (p[t[:, 2], 0] - p[t[:, 0], 0]) * (p[t[:, 1], 1] - p[t[:, 0], 1]))
        flip = cross < 0
        self.cells[flip] = self.cells[flip][:, [0, 2, 1]]

    def _edge_lengths(self) -> np.ndarray:
        p, t = self.vertices, self.cells
        if self.dim == 1:
            return np.abs(p[t[:, 1], 0] - p[t[:, 0], 0])
        e = []
        for i, j in ((0, 1), (1, 2), (0, 2)):
            e.append(np.linalg.norm(p[t[:, i]] - p[t[:, j]], axis=1))
        return np.concatenate(e)

    def angles(self) -> np.ndarray:
        """Per-triangle interior angles in degrees, shape (nt, 3)."""
        p, t = self.vertices, self.cells
        out = np.empty((len(t), 3))
        for c in range(3):
            a, b_, c_ = p[t[:, c]], p[t[:, (c + 1) % 3]], p[t[:, (c + 2) % 3]]
            u, v = b_ - a, c_ - a
            cosv = (u * v).sum(1) / np.sqrt((u * u).sum(1) * (v * v).sum(1))
            out[:, c] = np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))
        return out

    def areas(self) -> np.ndarray:
        """Cell measures (lengths in 1D, areas in 2D)."""
        if self._areas is None:
            p, t = self.vertices, self.cells
            if self.dim == 1:
                self._areas = np.abs(p[t[:, 1], 0] - p[t[:, 0], 0])
            else:
                self._areas = 0.5 * np.abs(
                    (p[t[:, 1], 0] - p[t[:, 0], 0]) * (p[t[:, 2], 1] - p[t[:, 0], 1])
                    - (p[t[:, 2], 0] - p[t[:, 0], 0]) * (p[t[:, 1], 1] - p[t[:, 0], 1]))
        return self._areas

    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    def boundary_indices(self) -> np.ndarray:
        return np.where(self.boundary)[0]

    def boundary_edges(self) -> np.ndarray:
        """(ne, 2) boundary vertex index pairs, ordered CCW along the curve.

        2D only; relies on boundary vertices being the equally spaced
        curve points, which mesh_domain guarantees.
        """
        idx = self.boundary_indices()
        p = self.vertices[idx]
        order = np.argsort(np.arctan2(p[:, 1], p[:, 0]))
        ring = idx[order]
        return np.c_[ring, np.roll(ring, -1)]


def mesh_domain(domain: Domain, h: float, eps: float | None = None,
                factor: float = 8.0, relax_iters: int = 60) -> Mesh:
    """Mesh a domain at target edge length h.

    If eps is given, enforce the resolution rule h <= eps/factor and
    refuse otherwise (reporting the required h).  Raises
    MeshQualityError if any triangle angle falls below 20 degrees.
    """
    if eps is not None and h > eps / factor + 1e-12:
        raise ValueError(
            f"resolution rule violated: h = {h:g} but eps/{factor:g} = {eps / factor:g}; "
            f"use h <= {eps / factor:g}")
    feature = {"interval": lambda p: p[1] - p[0],
               "disk": lambda p: p[0],
               "ellipse": lambda p: p[1]}[domain.kind](domain.params)
    if h > feature / 4 + 1e-12:
        raise ValueError(
            f"h = {h:g} too coarse for {domain.kind} (smallest feature {feature:g}); "
            f"use h <= {feature / 4:g}")
    if domain.kind == "interval":
        x0, x1 = domain.params
        n = int(np.ceil((x1 - x0) / h)) + 1
        v = np.linspace(x0, x1, n)
        cells = np.c_[np.arange(n - 1), np.arange(1, n)]
        bnd = np.zeros(n, dtype=bool)
        bnd[[0, -1]] = True
        return Mesh(domain, v[:, None], cells, bnd, h_target=h)

    pts, nfix = _relax_2d(domain, h, relax_iters)
    tri = Delaunay(pts)
    bnd = np.zeros(len(pts), dtype=bool)
    bnd[:nfix] = True
    mesh = Mesh(domain, pts, tri.simplices, bnd, h_target=h)
    if mesh.min_angle < 20.0:
        bad = mesh.angles().min(axis=1) < 20.0
        where = mesh.centroids()[bad][:3]
        raise MeshQualityError(
            f"min angle {mesh.min_angle:.2f} deg < 20 near {where.round(4).tolist()}")
    return mesh


def _relax_2d(domain: Domain, h: float, iters: int):
    """Spring relaxation of a hex lattice inside fixed boundary points."""
    nb = max(int(np.ceil(domain.perimeter() / h)), 8)
    pfix = domain.boundary_points(nb)
    if domain.kind == "disk":
        R = domain.params[0]
        lim = (R, R)
    else:
        lim = (domain.params[0], domain.params[1])
    xs = np.arange(-lim[0] - h, lim[0] + h, h)
    ys = np.arange(-lim[1] - h, lim[1] + h, h * np.sqrt(3) / 2)
    X, Y = np.meshgrid(xs, ys)
    X[1::2] += h / 2
    p = np.c_[X.ravel(), Y.ravel()]
    p = p[domain.inside(p)]
    p = p[domain.distance_to_boundary(p) > 0.55 * h]
    pts = np.vstack([pfix, p])
    nfix = nb

    Fscale, dt = 1.2, 0.2
    pold = None
    edges = None
    for _ in range(iters):
        moved = pold is None or np.max(np.hypot(*(pts - pold).T)) > 0.1 * h
        if moved:
            pold = pts.copy()
            simp = Delaunay(pts).simplices
            edges = np.vstack([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [0, 2]]])
            edges = np.unique(np.sort(edges, axis=1), axis=0)
        vec = pts[edges[:, 0]] - pts[edges[:, 1]]
        L = np.hypot(vec[:, 0], vec[:, 1])
        F = np.maximum(Fscale * h - L, 0.0) / np.where(L == 0, 1.0, L)
        Fvec = F[:, None] * vec
        move = np.zeros_like(pts)
        np.add.at(move, edges[:, 0], Fvec)
        np.add.at(move, edges[:, 1], -Fvec)
        move[:nfix] = 0.0
        pts = pts + dt * move
        # pull interior escapers back to a clear inset band off the fixed ring
        inner = pts[nfix:]
        d = domain.distance_to_boundary(inner)
        out = (~domain.inside(inner)) | (d < 0.3 * h)
        if out.any():
            proj, _ = domain.boundary_project(inner[out])
            inner[out] = proj - 0.5 * h * domain.outward_normal(proj)
            pts[nfix:] = inner
    return pts, nfix


# ---------------------------------------------------------------------------
# Text format:
#   line 1: "eigenhom-mesh 1"
#   line 2: "domain <kind> <params...>"
#   then:   optional "h_target <float>" (requested spacing)
#   then:   "vertices <n>" followed by n lines of coordinates
#   then:   "cells <nt>" followed by nt lines of vertex indices
#   then:   "boundary <nb>" followed by nb boundary vertex indices
# Floats are written with repr precision, whitespace separated.
# ---------------------------------------------------------------------------

def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as fh:
        fh.write("eigenhom-mesh 1\n")
        fh.write(f"domain {mesh.domain.label()}\n")
        if mesh.h_target is not None:
            fh.write(f"h_target {repr(float(mesh.h_target))}\n")
        fh.write(f"vertices {mesh.n_vertices}\n")
        for row in mesh.vertices:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        fh.write(f"cells {len(mesh.cells)}\n")
        for row in mesh.cells:
            fh.write(" ".join(str(int(i)) for i in row) + "\n")
        idx = mesh.boundary_indices()
        fh.write(f"boundary {len(idx)}\n")
        for i in idx:
            fh.write(f"{int(i)}\n")


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines[0].startswith("eigenhom-mesh"):
        raise ValueError(f"{path}: not a mesh file")
    dom = lines[1].split()
    domain = Domain(dom[1], tuple(float(x) for x in dom[2:]))
    pos = 2
    h_target = None
    if lines[pos].startswith("h_target"):
        h_target = float(lines[pos].split()[1]); pos += 1
    n = int(lines[pos].split()[1]); pos += 1
    verts = np.array([[float(x) for x in lines[pos + i].split()] for i in range(n)])
    pos += n
    nt = int(lines[pos].split()[1]); pos += 1
    cells = np.array([[int(x) for x in lines[pos + i].split()] for i in range(nt)])
    pos += nt
    nb = int(lines[pos].split()[1]); pos += 1
    bnd = np.zeros(n, dtype=bool)
    bnd[[int(lines[pos + i]) for i in range(nb)]] = True
    return Mesh(domain, verts, cells, bnd, h_target=h_target)


# Field companion format ("eigenhom-field 1"): one header line, then
# "values <n> <k>" and n rows of k floats each, matching the vertex
# order of the mesh the field was sampled on.

def save_field(values: np.ndarray, path) -> None:
    vals = np.asarray(values, dtype=float)
    cols = vals[:, None] if vals.ndim == 1 else vals
    with open(path, "w") as fh:
        fh.write("eigenhom-field 1\n")
        fh.write(f"values {cols.shape[0]} {cols.shape[1]}\n")
        for row in cols:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_field(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines[0].startswith("eigenhom-field"):
        raise ValueError(f"{path}: not a field file")
    n, k = (int(x) for x in lines[1].split()[1:])
    out = np.array([[float(x) for x in lines[2 + i].split()] for i in range(n)])
    return out[:, 0] if k == 1 else out
