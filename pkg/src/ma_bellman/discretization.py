"""Wide-stencil semi-Lagrangian discretisation of the Bellman operator.

At an interior node ``x_i`` a control ``B = sum_j lam_j sigma_j sigma_j^T``
acts through second differences along its eigenvectors::

    L(s, v)(x_i) = -sum_j lam_j (v(x_i - k_j sigma_j) - 2 s + v(x_i + k_j sigma_j)) / k_j^2
                   + f(x_i) sqrt(det B)

where off-node values are P1 interpolants.  ``k_j = min(m*h_avg, t+, t-)``
with ``t+-`` the distances along ``+-sigma_j`` to the boundary of the
computational domain, so every probe point stays inside it.  Boundary nodes
carry the Dirichlet row ``s - g(x_i)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg
import pyamg

from .controls import ControlGrid, Control
from .geometry import DomainGeometry
from .mesh import FeFunction, Mesh, MeshError, locate_points

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]

# nodes per chunk when maximising over the control grid
_CHUNK = 1024
# interior unknowns up to which policy systems are factorised directly
DIRECT_SOLVE_LIMIT = 2000


def sample(fn, points: np.ndarray) -> np.ndarray:
    """Evaluate a field given as a callable, a constant, or nodal values."""
    points = np.atleast_2d(points)
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(points), dtype=float), (len(points),)).copy()
    arr = np.asarray(fn, dtype=float)
    if arr.ndim == 0:
        return np.full(len(points), float(arr))
    if arr.shape != (len(points),):
        raise ValueError(f"field of shape {arr.shape} does not match {len(points)} points")
    return arr.copy()


@dataclass(frozen=True)
class StencilConfig:
    """Stencil width ``k = m * h_avg``.

    ``min_k`` (default ``h_avg / 4``) does not enlarge truncated stencils,
    which would leave the domain; stencils shorter than it are only counted
    and logged.
    """

    m: float = 2.0
    min_k: float | None = None

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"stencil factor m must be positive, got {self.m}")
        if self.min_k is not None and not self.min_k > 0:
            raise ValueError(f"min_k must be positive, got {self.min_k}")

    def width(self, mesh: Mesh) -> float:
        return self.m * mesh.h_avg

    def floor(self, mesh: Mesh) -> float:
        return 0.25 * mesh.h_avg if self.min_k is None else self.min_k


def stencil_size(
    mesh: Mesh,
    geometry: DomainGeometry | None,
    node: int,
    sigma,
    cfg: StencilConfig,
) -> float:
    """Symmetrically truncated stencil size at interior ``node`` along ``sigma``.

    ``geometry`` is accepted for interface symmetry; truncation is measured
    against the computational domain, whose boundary nodes lie on the exact
    boundary.
    """
    if mesh.boundary[node]:
        raise MeshError(f"node {node} is a boundary node; stencils live at interior nodes")
    sigma = np.asarray(sigma, dtype=float)
    sigma = sigma / np.linalg.norm(sigma)
    x = mesh.points[node][None]
    t = mesh.ray_exit(x, np.stack([sigma, -sigma]))[0]
    return float(min(cfg.width(mesh), t[0], t[1]))


@dataclass(frozen=True, eq=False)
class PolicySystem:
    """Sparse linear system ``A v + b = 0`` for a frozen policy."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    boundary: np.ndarray

    def is_m_matrix_pattern(self, tol: float = 0.0) -> bool:
        """Positive diagonal, non-positive off-diagonal, unit boundary rows."""
        A = self.matrix.tocoo()
        off = A.row != A.col
        if np.any(self.matrix.diagonal() <= 0) or np.any(A.data[off] > tol):
            return False
        on_bnd = self.boundary[A.row]
        unit = (A.row == A.col) & (A.data == 1.0)
        nnz = np.bincount(A.row[on_bnd], minlength=len(self.boundary))
        return bool(np.all(unit[on_bnd]) and np.all(nnz[self.boundary] == 1))

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def solve(self, rhs: np.ndarray | None = None, tol: float = 1e-12) -> np.ndarray:
        """Solve ``A v = -b`` (or ``A v = rhs``) after eliminating boundary rows.

        Small systems use a sparse LU factorisation; wide stencils make its
        fill-in prohibitive on fine meshes, where classical AMG-preconditioned
        GMRES is used instead.  Raises ``LinAlgError`` unless the normwise
        backward error ``|A v - rhs| / (|A| |v| + |rhs|)`` (sup norms) is at
        most ``tol``.
        """
        target = -self.rhs if rhs is None else np.asarray(rhs, dtype=float)
        if target.shape != self.rhs.shape:
            raise ValueError(f"rhs has shape {target.shape}, expected {self.rhs.shape}")
        bnd = self.boundary
        inner = ~bnd
        v = np.empty_like(target)
        v[bnd] = target[bnd]
        rows = self.matrix[inner]
        A_ii = rows[:, inner].tocsr()
        r = target[inner] - rows[:, bnd] @ v[bnd]
        a_norm = abs(A_ii).sum(axis=1).max() if A_ii.shape[0] else 0.0

        def bound(x):
            return tol * (a_norm * np.abs(x).max() + np.abs(r).max() + 1e-300)

        if A_ii.shape[0] <= DIRECT_SOLVE_LIMIT:
            lu = scipy.sparse.linalg.splu(A_ii.tocsc(), permc_spec="COLAMD")
            x = lu.solve(r)
            for _ in range(3):
                res = r - A_ii @ x
                if np.abs(res).max() <= bound(x):
                    break
                x += lu.solve(res)
        else:
            ml = pyamg.ruge_stuben_solver(A_ii)
            x = np.zeros_like(r)
            for _ in range(5):
                x = ml.solve(r, x0=x, tol=1e-14, accel="gmres", maxiter=200)
                if np.abs(r - A_ii @ x).max() <= bound(x):
                    break
        if len(r):
            err = np.abs(r - A_ii @ x).max()
            if not np.isfinite(err) or err > bound(x):
                raise np.linalg.LinAlgError(
                    f"policy system solve failed: residual {err:.3e} > {bound(x):.3e}"
                )
        v[inner] = x
        return v

    def residual(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v + self.rhs


class WideStencil:
    """Probe geometry for every interior node and every grid direction.

    For interior node ``n`` (position in ``mesh.interior_nodes``) and direction
    ``d`` the probe points ``x -+ k[n, d] * sigma_d`` are stored as the nodes
    and barycentric weights of their containing triangles, so evaluation of a
    P1 function at all probes is a gather.
    """

    def __init__(self, mesh: Mesh, grid: ControlGrid, cfg: StencilConfig):
        self.mesh = mesh
        self.grid = grid
        self.cfg = cfg
        self.nodes = mesh.interior_nodes
        sigma = grid.directions
        x = mesh.points[self.nodes]
        width = cfg.width(mesh)
        k = np.full((len(x), len(sigma)), width)
        near = np.flatnonzero(mesh.distance_to_boundary(x) < width)
        if len(near):
            t_plus = mesh.ray_exit(x[near], sigma, cap=width)
            t_minus = mesh.ray_exit(x[near], -sigma, cap=width)
            k[near] = np.minimum(k[near], np.minimum(t_plus, t_minus))
        if np.any(k <= 0):
            raise MeshError("zero-length stencil at an interior node")
        short = int((k < cfg.floor(mesh)).sum())
        if short:
            logger.debug("%d stencils shorter than min_k", short)
        self.k = k
        offsets = k[..., None] * sigma[None, :, :]  # (N, D, 2)
        probes = np.stack([x[:, None, :] - offsets, x[:, None, :] + offsets], axis=2)
        tri, bary = locate_points(mesh, probes.reshape(-1, 2))
        shape = probes.shape[:3] + (3,)
        self.probe_nodes = mesh.triangles[tri].reshape(shape).astype(np.int64)
        self.probe_weights = bary.reshape(shape)

    @property
    def num_interior(self) -> int:
        return len(self.nodes)

    def probe_values(self, values: np.ndarray) -> np.ndarray:
        """P1 values at the probes, shape ``(N, D, 2)``."""
        return (values[self.probe_nodes] * self.probe_weights).sum(axis=3)

    def second_differences(self, values: np.ndarray, s: np.ndarray | None = None) -> np.ndarray:
        """``(v(x - k sigma) - 2 s + v(x + k sigma)) / k^2``, shape ``(N, D)``.

        ``s`` defaults to the nodal values at the interior nodes.
        """
        s = values[self.nodes] if s is None else np.broadcast_to(s, (self.num_interior,))
        pv = self.probe_values(values)
        return (pv[..., 0] + pv[..., 1] - 2.0 * s[:, None]) / self.k**2

    def hamiltonian(
        self, values: np.ndarray, f_int: np.ndarray, s: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Discrete Hamiltonian at interior nodes and its first argmax over the grid."""
        dd = self.second_differences(values, s)
        return maximize_over_grid(dd, f_int, self.grid)

    def assemble(self, policy: np.ndarray, f_nodes: np.ndarray, g_nodes: np.ndarray) -> PolicySystem:
        """Sparse system of the frozen ``policy`` (grid index per interior node)."""
        grid = self.grid
        J = self.mesh.num_nodes
        N = self.num_interior
        policy = np.asarray(policy)
        rows_n = np.arange(N)
        d = np.stack([grid.dir1[policy], grid.dir2[policy]], axis=1)  # (N, 2)
        lam = np.stack([grid.a[policy], 1.0 - grid.a[policy]], axis=1)
        kk = self.k[rows_n[:, None], d]
        coef = lam / kk**2  # (N, 2)
        pn = self.probe_nodes[rows_n[:, None], d]  # (N, 2, 2, 3)
        pw = self.probe_weights[rows_n[:, None], d]
        gi = self.nodes
        row = np.concatenate(
            [
                gi,
                np.repeat(gi, 12),
                self.mesh.boundary_nodes,
            ]
        )
        col = np.concatenate([gi, pn.reshape(-1), self.mesh.boundary_nodes])
        val = np.concatenate(
            [
                2.0 * coef.sum(axis=1),
                (-coef[:, :, None, None] * pw).reshape(-1),
                np.ones(len(self.mesh.boundary_nodes)),
            ]
        )
        A = sp.csr_matrix((val, (row, col)), shape=(J, J))
        A.sum_duplicates()
        A.eliminate_zeros()
        b = np.empty(J)
        b[gi] = f_nodes[gi] * grid.sqrt_det[policy]
        b[self.mesh.boundary] = -g_nodes[self.mesh.boundary]
        return PolicySystem(A, b, self.mesh.boundary.copy())


def maximize_over_grid(
    second_diff: np.ndarray, f_vals: np.ndarray, grid: ControlGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Max over the grid of ``-(a*D[dir1] + (1-a)*D[dir2]) + f sqrt(a(1-a))``.

    ``second_diff`` has one row per point and one column per grid direction.
    Ties go to the lowest grid index.
    """
    second_diff = np.atleast_2d(second_diff)
    f_vals = np.broadcast_to(np.asarray(f_vals, dtype=float), (len(second_diff),))
    _, a_values, table = grid.layout
    n_a = len(a_values)
    # directions of the first control of each angle row
    first = table.reshape(-1, n_a).max(axis=1)
    d1 = grid.dir1[first]
    d2 = grid.dir2[first]
    sq = np.sqrt(a_values * (1.0 - a_values))
    missing = table < 0
    value = np.empty(len(second_diff))
    arg = np.empty(len(second_diff), dtype=np.int64)
    for s in range(0, len(second_diff), _CHUNK):
        dd = second_diff[s : s + _CHUNK]
        D1 = dd[:, d1][:, :, None]
        D2 = dd[:, d2][:, :, None]
        vals = -(D1 * a_values + D2 * (1.0 - a_values))
        vals += (f_vals[s : s + _CHUNK, None] * sq)[:, None, :]
        vals = vals.reshape(len(dd), -1)
        vals[:, missing] = -np.inf
        idx = np.argmax(vals, axis=1)
        arg[s : s + _CHUNK] = table[idx]
        value[s : s + _CHUNK] = vals[np.arange(len(dd)), idx]
    return value, arg


# ---------------------------------------------------------------------------
# pointwise evaluation (also used with exact functions as a test harness)


def _evaluator(u) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(u, FeFunction):
        return u
    if callable(u):
        return lambda x: np.asarray(u(np.atleast_2d(x)), dtype=float)
    raise TypeError("u must be an FeFunction or a callable of points")


def point_second_differences(u, x, s: float, directions: np.ndarray, k) -> np.ndarray:
    """Second differences of ``u`` at ``x`` (centre value ``s``) along each direction."""
    ev = _evaluator(u)
    x = np.asarray(x, dtype=float).reshape(2)
    directions = np.atleast_2d(directions)
    k = np.broadcast_to(np.asarray(k, dtype=float), (len(directions),))
    off = k[:, None] * directions
    return (ev(x - off) + ev(x + off) - 2.0 * s) / k**2


def apply_control(u, x, s: float, control: Control, k, f_value: float = 0.0) -> float:
    """``L^B(s, u)(x)`` for one control with stencil sizes ``k`` (scalar or per direction)."""
    dd = point_second_differences(u, x, s, control.directions, k)
    return float(-(control.weights @ dd) + f_value * control.sqrt_det)


def hamiltonian_at_point(u, x, s: float, f_value: float, grid: ControlGrid, k) -> tuple[float, int]:
    """Discrete Hamiltonian at an arbitrary point with prescribed stencil sizes.

    ``k`` is a scalar or one size per grid direction.
    """
    dd = point_second_differences(u, x, s, grid.directions, k)
    value, arg = maximize_over_grid(dd[None, :], f_value, grid)
    return float(value[0]), int(arg[0])


def node_stencil_sizes(mesh: Mesh, node: int, grid: ControlGrid, cfg: StencilConfig) -> np.ndarray:
    if mesh.boundary[node]:
        raise MeshError(f"node {node} is a boundary node")
    sigma = grid.directions
    x = mesh.points[node][None]
    t = np.minimum(mesh.ray_exit(x, sigma)[0], mesh.ray_exit(x, -sigma)[0])
    return np.minimum(cfg.width(mesh), t)


def _value_at_node(field, mesh: Mesh, node: int) -> float:
    if not callable(field) and np.ndim(field) == 1:
        return float(sample(field, mesh.points)[node])
    return float(sample(field, mesh.points[node][None])[0])


def discrete_hamiltonian_at_node(
    mesh: Mesh,
    u,
    node: int,
    s: float,
    grid: ControlGrid,
    f,
    g,
    cfg: StencilConfig,
) -> tuple[float, Control]:
    """``H_h(s, u)(x_node)`` and the maximising control.

    ``u`` is an :class:`FeFunction` or any callable of points; passing the
    exact function bypasses interpolation.  Boundary nodes return
    ``s - g(x)`` and the isotropic control.
    """
    x = mesh.points[node]
    if mesh.boundary[node]:
        return float(s - _value_at_node(g, mesh, node)), grid[grid.isotropic_index]
    k = node_stencil_sizes(mesh, node, grid, cfg)
    value, arg = hamiltonian_at_point(u, x, s, _value_at_node(f, mesh, node), grid, k)
    return value, grid[arg]


def scheme_residual(
    mesh: Mesh,
    u: FeFunction,
    grid: ControlGrid,
    f,
    g,
    cfg: StencilConfig,
    stencil: WideStencil | None = None,
) -> np.ndarray:
    """``H_h(u(x_i), u)(x_i)`` at every node."""
    stencil = stencil or WideStencil(mesh, grid, cfg)
    out = np.empty(mesh.num_nodes)
    bnd = mesh.boundary
    out[bnd] = u.values[bnd] - sample(g, mesh.points)[bnd]
    f_int = sample(f, mesh.points)[stencil.nodes]
    out[stencil.nodes] = stencil.hamiltonian(u.values, f_int)[0]
    return out


def assemble_policy_system(
    mesh: Mesh,
    policy,
    f,
    g,
    cfg: StencilConfig,
    stencil: WideStencil | None = None,
) -> PolicySystem:
    """Sparse matrix and data of the affine operator of a frozen policy.

    ``policy`` is a :class:`~ma_bellman.howard.Policy` (or anything with
    ``grid`` and ``index`` attributes).
    """
    stencil = stencil or WideStencil(mesh, policy.grid, cfg)
    return stencil.assemble(
        policy.index, sample(f, mesh.points), sample(g, mesh.points)
    )
