"""Unstructured triangular meshes of the test domain and P1 evaluation.

Nodes on the boundary of the computational domain ``Omega_h`` always lie on
the boundary of the exact domain, so ``Omega_h`` is a convex polygon inscribed
in ``Omega``.  Points of ``Omega`` outside ``Omega_h`` are handled by clamping
onto ``Omega_h``, which realises the extension of finite element functions that
is constant along the outward normals of the boundary edges.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .geometry import DomainGeometry

logger = logging.getLogger(__name__)

BARY_TOL = 1e-10


class MeshError(ValueError):
    """Raised for degenerate or invalid meshes and failed point queries."""


def _signed_areas(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0, p1, p2 = (points[triangles[:, i]] for i in range(3))
    d1 = p1 - p0
    d2 = p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with boundary flags.

    Parameters
    ----------
    points : (J, 2) array
        Node coordinates.
    triangles : (T, 3) int array
        Counter-clockwise triangle to node incidence.
    boundary : (J,) bool array
        ``True`` for nodes on the boundary of the domain.
    geometry : DomainGeometry
        Exact domain, used to place new boundary nodes during refinement.
    """

    points: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    geometry: DomainGeometry = field(default_factory=DomainGeometry)

    def __post_init__(self):
        for name in ("points", "triangles", "boundary"):
            getattr(self, name).setflags(write=False)

    @property
    def num_nodes(self) -> int:
        return len(self.points)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.points, self.triangles)

    @cached_property
    def diameters(self) -> np.ndarray:
        """Per-triangle diameter (longest edge)."""
        p = self.points[self.triangles]
        edges = p - np.roll(p, -1, axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    @property
    def h_max(self) -> float:
        return float(self.diameters.max())

    @property
    def h_avg(self) -> float:
        return float(self.diameters.mean())

    @cached_property
    def node_triangles(self) -> list[np.ndarray]:
        """Triangles incident to each node."""
        order = np.argsort(self.triangles.ravel(), kind="stable")
        nodes = self.triangles.ravel()[order]
        tris = order // 3
        splits = np.searchsorted(nodes, np.arange(1, self.num_nodes))
        return np.split(tris, splits)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted node pairs."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """Directed boundary edges ``(a, b)`` with the domain on the left."""
        directed = self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        key = np.sort(directed, axis=1)
        _, inverse, counts = np.unique(
            key, axis=0, return_inverse=True, return_counts=True
        )
        return directed[counts[inverse.ravel()] == 1]

    @cached_property
    def _halfplanes(self) -> tuple[np.ndarray, np.ndarray]:
        e = self.boundary_edges
        a = self.points[e[:, 0]]
        d = self.points[e[:, 1]] - a
        n = np.column_stack([d[:, 1], -d[:, 0]])
        n /= np.linalg.norm(n, axis=1)[:, None]
        return n, np.einsum("ij,ij->i", n, a)

    def distance_to_boundary(self, x) -> np.ndarray:
        """Signed distance to the boundary of ``Omega_h`` (positive inside).

        Exact inside the domain because ``Omega_h`` is convex.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, c = self._halfplanes
        return (c[None, :] - x @ n.T).min(axis=1)

    def ray_exit(self, x, sigma, cap: float = np.inf) -> np.ndarray:
        """Largest ``t <= cap`` with ``x + t*sigma`` in the closed ``Omega_h``.

        ``x`` is an ``(N, 2)`` array of points in ``Omega_h``, ``sigma`` a
        ``(D, 2)`` array of unit directions; returns an ``(N, D)`` array.
        Edges farther than ``cap`` from a point are skipped.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        n, c = self._halfplanes
        rate = sigma @ n.T  # (D, E)
        with np.errstate(divide="ignore"):
            inv = np.where(rate > 1e-14, 1.0 / np.where(rate > 1e-14, rate, 1.0), np.inf)
        out = np.full((len(x), len(sigma)), cap)
        chunk = 20_000
        for start in range(0, len(x), chunk):
            slack = np.maximum(c[None, :] - x[start : start + chunk] @ n.T, 0.0)
            node, edge = np.nonzero(slack < cap)
            if not len(node):
                continue
            t = slack[node, edge][:, None] * inv[:, edge].T  # (P, D)
            t[np.isnan(t)] = np.inf  # 0 * inf for edges through x
            first = np.flatnonzero(np.r_[True, node[1:] != node[:-1]])
            best = np.minimum.reduceat(t, first, axis=0)
            rows = start + node[first]
            out[rows] = np.minimum(out[rows], best)
        return out

    @cached_property
    def locator(self) -> "BucketLocator":
        return BucketLocator(self)

    def check(self, tol: float = 1e-10) -> None:
        """Raise :class:`MeshError` if a structural invariant is violated."""
        if np.any(self.areas <= 0):
            raise MeshError("mesh has non-positive triangle areas")
        sd = self.geometry.signed_distance(self.points)
        if np.any(np.abs(sd[self.boundary]) > tol):
            raise MeshError("boundary node off the domain boundary")
        if np.any(sd > tol):
            raise MeshError("node outside the domain")
        be = self.boundary_edges
        if not np.all(self.boundary[be.ravel()]):
            raise MeshError("boundary edge with an interior endpoint")
        on_be = np.zeros(self.num_nodes, dtype=bool)
        on_be[be.ravel()] = True
        if np.any(on_be != self.boundary):
            raise MeshError("boundary flags disagree with boundary edges")
        # conformity: Euler characteristic of a disk and one loop of boundary edges
        if self.num_nodes - len(self.edges) + self.num_triangles != 1:
            raise MeshError("triangulation is not a simply connected conforming mesh")
        if len(be) != self.boundary.sum():
            raise MeshError("boundary is not a single closed polygon")


# ---------------------------------------------------------------------------
# generation and refinement


def _boundary_nodes(geometry: DomainGeometry, h: float) -> np.ndarray:
    n_side = max(1, int(round(geometry.side_length / h)))
    n_arc = max(3, int(round(geometry.arc_length / h)))
    s = np.concatenate(
        [
            np.linspace(0.0, 1.0, n_side, endpoint=False),
            1.0 + np.linspace(0.0, 1.0, n_side, endpoint=False),
            2.0 + np.linspace(0.0, geometry.arc_length, n_arc, endpoint=False),
        ]
    )
    return geometry.boundary_point(s)


def _hex_lattice(h: float) -> np.ndarray:
    dy = 0.5 * np.sqrt(3.0) * h
    rows = np.arange(-int(np.ceil(1.2 / dy)), int(np.ceil(1.2 / dy)) + 1)
    cols = np.arange(-int(np.ceil(1.2 / h)) - 1, int(np.ceil(1.2 / h)) + 2)
    jj, ii = np.meshgrid(rows, cols, indexing="ij")
    x = ii * h + 0.5 * h * (jj % 2)
    y = jj * dy
    return np.column_stack([x.ravel(), y.ravel()])


def _delaunay(points: np.ndarray) -> np.ndarray:
    tri = Delaunay(points).simplices.astype(np.int64)
    area = _signed_areas(points, tri)
    scale = np.abs(area).max()
    tri = tri[np.abs(area) > 1e-12 * scale]
    area = area[np.abs(area) > 1e-12 * scale]
    flip = area < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def build_domain_mesh(
    geometry: DomainGeometry,
    target_h: float,
    smoothing_steps: int = 20,
    interior_h: float | None = None,
) -> Mesh:
    """Quasi-uniform mesh of the domain with node spacing about ``target_h``.

    Boundary nodes are spaced uniformly along each boundary piece (the three
    corners are always nodes).  Interior nodes start on a hexagonal lattice and
    are Laplacian-smoothed with re-triangulation after every sweep.
    ``interior_h`` overrides the lattice spacing (defaults to ``target_h``).
    """
    if not target_h > 0:
        raise MeshError(f"target_h must be positive, got {target_h}")
    interior_h = target_h if interior_h is None else interior_h
    bnd = _boundary_nodes(geometry, target_h)
    lat = _hex_lattice(interior_h)
    keep = geometry.signed_distance(lat) < -0.5 * target_h
    interior = lat[keep]
    if len(interior) < 4:
        raise MeshError(
            f"target_h={target_h} leaves {len(interior)} interior nodes; "
            "degenerate discretization"
        )
    nb = len(bnd)
    points = np.vstack([bnd, interior])
    tri = _delaunay(points)
    for _ in range(smoothing_steps):
        edges = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        edges = np.unique(edges, axis=0)
        acc = np.zeros_like(points)
        deg = np.zeros(len(points))
        for a, b in ((0, 1), (1, 0)):
            np.add.at(acc, edges[:, a], points[edges[:, b]])
            np.add.at(deg, edges[:, a], 1.0)
        new = acc / deg[:, None]
        points[nb:] = new[nb:]
        tri = _delaunay(points)
    boundary = np.zeros(len(points), dtype=bool)
    boundary[:nb] = True
    mesh = Mesh(points, tri, boundary, geometry)
    mesh.check()
    logger.debug(
        "built mesh: %d nodes, %d triangles, h_avg=%.4g",
        mesh.num_nodes,
        mesh.num_triangles,
        mesh.h_avg,
    )
    return mesh


def coarse_mesh(geometry: DomainGeometry | None = None, nodes: int = 91) -> Mesh:
    """Coarsest mesh used by the experiments, with about ``nodes`` nodes."""
    geometry = geometry or DomainGeometry()
    # node count is a step function of the spacing; scan for the closest match
    h0 = np.sqrt(geometry.area / (0.5 * np.sqrt(3.0) * nodes))
    best = None
    for h in np.linspace(0.8 * h0, 1.6 * h0, 41):
        for ratio in np.linspace(0.85, 1.15, 31):
            try:
                m = build_domain_mesh(
                    geometry, float(h), smoothing_steps=0, interior_h=float(h * ratio)
                )
            except MeshError:
                continue
            gap = abs(m.num_nodes - nodes)
            if best is None or gap < best[0]:
                best = (gap, float(h), float(h * ratio))
            if gap == 0:
                break
        if best is not None and best[0] == 0:
            break
    return build_domain_mesh(geometry, best[1], interior_h=best[2])


def refine_uniform(mesh: Mesh) -> Mesh:
    """Split every triangle into four through its edge midpoints.

    Midpoints of boundary edges are projected onto the exact boundary so that
    all boundary nodes of the refined mesh stay on it.
    """
    tri = mesh.triangles
    J = mesh.num_nodes
    local = tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
    key = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse, counts = np.unique(
        key, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    mid = 0.5 * (mesh.points[edges[:, 0]] + mesh.points[edges[:, 1]])
    on_boundary = counts == 1
    mid[on_boundary] = mesh.geometry.project_to_boundary(mid[on_boundary])
    points = np.vstack([mesh.points, mid])
    m = J + inverse.reshape(-1, 3)  # midpoint of edges (01, 12, 20)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
    new_tri = np.concatenate(
        [
            np.column_stack([a, m01, m20]),
            np.column_stack([m01, b, m12]),
            np.column_stack([m20, m12, c]),
            np.column_stack([m01, m12, m20]),
        ]
    )
    boundary = np.concatenate([mesh.boundary, on_boundary])
    out = Mesh(points, new_tri, boundary, mesh.geometry)
    out.check()
    return out


def refined_levels(base: Mesh, levels: int) -> list[Mesh]:
    """``[base, refine(base), ...]`` with ``levels + 1`` entries."""
    out = [base]
    for _ in range(levels):
        out.append(refine_uniform(out[-1]))
    return out


# ---------------------------------------------------------------------------
# point location and evaluation


@dataclass(frozen=True)
class FePoint:
    """A point expressed as a triangle index and barycentric coordinates."""

    triangle: int
    barycentric: np.ndarray


def barycentric(mesh: Mesh, tri_idx: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points ``x`` in triangles ``tri_idx``.

    Broadcasts ``tri_idx`` of shape ``S`` against ``x`` of shape ``S + (2,)``.
    """
    p = mesh.points[mesh.triangles[tri_idx]]  # S x 3 x 2
    v1 = p[..., 1, :] - p[..., 0, :]
    v2 = p[..., 2, :] - p[..., 0, :]
    r = x - p[..., 0, :]
    det = v1[..., 0] * v2[..., 1] - v1[..., 1] * v2[..., 0]
    l1 = (r[..., 0] * v2[..., 1] - r[..., 1] * v2[..., 0]) / det
    l2 = (v1[..., 0] * r[..., 1] - v1[..., 1] * r[..., 0]) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


class BucketLocator:
    """Uniform background grid with per-cell candidate triangle lists."""

    def __init__(self, mesh: Mesh, cells_per_triangle: float = 4.0):
        self.mesh = mesh
        pts = mesh.points
        self.lo = pts.min(axis=0) - 1e-9
        hi = pts.max(axis=0) + 1e-9
        size = hi - self.lo
        n = max(1, int(np.sqrt(mesh.num_triangles * cells_per_triangle)))
        self.shape = np.maximum(1, np.round(n * size / size.max()).astype(int))
        self.cell = size / self.shape
        tp = pts[mesh.triangles]
        cmin = np.floor((tp.min(axis=1) - self.lo) / self.cell).astype(int)
        cmax = np.floor((tp.max(axis=1) - self.lo) / self.cell).astype(int)
        cmin = np.clip(cmin, 0, self.shape - 1)
        cmax = np.clip(cmax, 0, self.shape - 1)
        # (cell, triangle) pairs for every cell overlapped by a triangle's bbox
        span = cmax - cmin + 1
        count = span[:, 0] * span[:, 1]
        tri_id = np.repeat(np.arange(mesh.num_triangles), count)
        local = np.arange(count.sum()) - np.repeat(np.cumsum(count) - count, count)
        ci = cmin[tri_id, 0] + local // span[tri_id, 1]
        cj = cmin[tri_id, 1] + local % span[tri_id, 1]
        cell_id = ci * self.shape[1] + cj
        order = np.lexsort((tri_id, cell_id))
        cell_id, tri_id = cell_id[order], tri_id[order]
        n_cells = int(np.prod(self.shape))
        per_cell = np.bincount(cell_id, minlength=n_cells)
        start = np.cumsum(per_cell) - per_cell
        slot = np.arange(len(cell_id)) - start[cell_id]
        table = np.full((n_cells, max(1, per_cell.max())), -1, dtype=np.int64)
        table[cell_id, slot] = tri_id
        self.table = table
        # barycentrics as an affine map of (x, y, 1) per triangle
        mat = np.concatenate([tp.transpose(0, 2, 1), np.ones((len(tp), 1, 3))], axis=1)
        self.affine = np.linalg.inv(mat)

    def _cells(self, x: np.ndarray) -> np.ndarray:
        ij = np.floor((x - self.lo) / self.cell).astype(int)
        ij = np.clip(ij, 0, self.shape - 1)
        return ij[:, 0] * self.shape[1] + ij[:, 1]

    def locate(self, x: np.ndarray, chunk: int = 50_000):
        """Containing triangle and barycentrics for each row of ``x``.

        Returns ``(tri, bary, found)``.  Where ``found`` is false the outputs
        are meaningless.  Barycentrics within ``BARY_TOL`` of the simplex are
        clipped onto it.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tri = np.zeros(len(x), dtype=np.int64)
        bary = np.zeros((len(x), 3))
        found = np.zeros(len(x), dtype=bool)
        for s in range(0, len(x), chunk):
            xs = x[s : s + chunk]
            cand = self.table[self._cells(xs)]
            valid = cand >= 0
            aff = self.affine[np.where(valid, cand, 0)]  # (n, K, 3, 3)
            lam = (
                aff[..., 0] * xs[:, None, None, 0]
                + aff[..., 1] * xs[:, None, None, 1]
                + aff[..., 2]
            )
            score = np.where(valid, lam.min(axis=2), -np.inf)
            best = np.argmax(score, axis=1)
            rows = np.arange(len(xs))
            t = cand[rows, best]
            tri[s : s + chunk] = t
            # recompute in the chosen triangle with the better-conditioned formula
            bary[s : s + chunk] = barycentric(self.mesh, t, xs)
            found[s : s + chunk] = score[rows, best] >= -BARY_TOL
        bary = np.clip(bary, 0.0, 1.0)
        bary /= bary.sum(axis=1, keepdims=True)
        return tri, bary, found


def clamp_points(mesh: Mesh, x) -> np.ndarray:
    """Vectorised :func:`clamp_to_domain`."""
    x = np.array(np.atleast_2d(x), dtype=float)
    outside = mesh.distance_to_boundary(x) < 0.0
    if not outside.any():
        return x
    e = mesh.boundary_edges
    a = mesh.points[e[:, 0]]
    d = mesh.points[e[:, 1]] - a
    xo = x[outside]
    t = np.clip(
        ((xo[:, None, :] - a[None]) * d[None]).sum(axis=2) / (d * d).sum(axis=1),
        0.0,
        1.0,
    )
    foot = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(foot - xo[:, None, :], axis=2)
    best = np.argmin(dist, axis=1)
    x[outside] = foot[np.arange(len(xo)), best]
    return x


def clamp_to_domain(mesh: Mesh, x) -> np.ndarray:
    """``x`` itself if it lies in the closed ``Omega_h``, else its nearest point there."""
    return clamp_points(mesh, np.asarray(x, dtype=float).reshape(1, 2))[0]


def locate_points(mesh: Mesh, x) -> tuple[np.ndarray, np.ndarray]:
    """Locate many points, clamping those slightly outside ``Omega_h``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tri, bary, found = mesh.locator.locate(x)
    if not found.all():
        miss = np.flatnonzero(~found)
        xc = clamp_points(mesh, x[miss])
        t2, b2, f2 = mesh.locator.locate(xc)
        if not f2.all():
            bad = x[miss[~f2][0]]
            raise MeshError(f"point {bad} could not be located in the mesh")
        tri[miss] = t2
        bary[miss] = b2
    return tri, bary


def locate_point(mesh: Mesh, x) -> FePoint:
    """Triangle containing ``x`` and the barycentric coordinates of ``x`` in it."""
    tri, bary = locate_points(mesh, np.asarray(x, dtype=float).reshape(1, 2))
    return FePoint(int(tri[0]), bary[0])


@dataclass(frozen=True, eq=False)
class FeFunction:
    """Continuous piecewise linear function given by its nodal values."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.mesh.num_nodes,):
            raise ValueError(
                f"expected {self.mesh.num_nodes} nodal values, got {self.values.shape}"
            )

    @classmethod
    def interpolate(cls, mesh: Mesh, fn) -> "FeFunction":
        return cls(mesh, np.asarray(fn(mesh.points), dtype=float))

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tri, bary = locate_points(self.mesh, x)
        return (self.values[self.mesh.triangles[tri]] * bary).sum(axis=1)

    def gradients(self) -> np.ndarray:
        """Constant gradient on each triangle, shape ``(T, 2)``."""
        p = self.mesh.points[self.mesh.triangles]
        v = self.values[self.mesh.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        jac = np.stack([e1, e2], axis=1)  # rows are edge vectors
        rhs = np.column_stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]])
        return np.linalg.solve(jac, rhs[..., None])[..., 0]


def eval_p1(fun: FeFunction, x) -> float:
    """Value of ``fun`` at a single point ``x`` of the closed domain."""
    return float(fun(np.asarray(x, dtype=float).reshape(1, 2))[0])


# ---------------------------------------------------------------------------
# text I/O


def write_mesh(mesh: Mesh, path) -> None:
    """Write ``J T`` header, ``x y flag`` node lines, then ``i j k`` triangles."""
    with open(path, "w") as fh:
        fh.write(f"{mesh.num_nodes} {mesh.num_triangles}\n")
        for (x, y), b in zip(mesh.points, mesh.boundary):
            fh.write(f"{x:.17g} {y:.17g} {int(b)}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def read_mesh(path, geometry: DomainGeometry | None = None) -> Mesh:
    lines = Path(path).read_text().split("\n")
    J, T = (int(v) for v in lines[0].split())
    nodes = np.array([ln.split() for ln in lines[1 : 1 + J]], dtype=float)
    tris = np.array([ln.split() for ln in lines[1 + J : 1 + J + T]], dtype=np.int64)
    return Mesh(
        nodes[:, :2].copy(),
        tris.reshape(T, 3),
        nodes[:, 2].astype(bool),
        geometry or DomainGeometry(),
    )
