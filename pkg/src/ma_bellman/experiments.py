"""Benchmark problems, error norms and convergence studies."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .controls import ControlGrid, build_control_grid
from .discretization import StencilConfig
from .howard import SolveReport, howard_solve
from .mesh import FeFunction, Mesh, coarse_mesh, refined_levels

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]

CSV_HEADER = ("level", "dofs", "m", "iterations", "l2_rel", "linf_rel", "h1_rel", "seconds")
NORMS = ("l2_rel", "linf_rel", "h1_rel")


@dataclass(frozen=True)
class ProblemSpec:
    """Dirichlet problem with optional exact solution.

    All callables take an ``(n, 2)`` array of points.  ``g`` defaults to the
    exact solution restricted to the boundary.
    """

    name: str
    f: Field
    g: Field
    u: Field | None = None
    grad: Field | None = None

    def check_source(self, points: np.ndarray) -> None:
        if np.any(np.asarray(self.f(points)) < 0):
            raise ValueError(f"{self.name}: source f must be non-negative")


def _r2(x):
    return x[:, 0] ** 2 + x[:, 1] ** 2


def _quartic_u(x):
    return _r2(np.atleast_2d(x)) ** 2


def _quartic_grad(x):
    x = np.atleast_2d(x)
    return 4.0 * _r2(x)[:, None] * x


def _quartic_f(x):
    return 8.0 * np.sqrt(3.0) * _r2(np.atleast_2d(x))


def _abs_x1(x):
    return np.abs(np.atleast_2d(x)[:, 0])


def _abs_x1_grad(x):
    x = np.atleast_2d(x)
    return np.column_stack([np.sign(x[:, 0]), np.zeros(len(x))])


def _zero(x):
    return np.zeros(len(np.atleast_2d(x)))


def quartic_problem() -> ProblemSpec:
    """``u = |x|^4`` with ``f = 2 sqrt(det D^2u) = 8 sqrt(3) |x|^2``."""
    return ProblemSpec("quartic", f=_quartic_f, g=_quartic_u, u=_quartic_u, grad=_quartic_grad)


def nonsmooth_problem() -> ProblemSpec:
    """``u = |x_1|`` with ``f = 0``; the gradient is ``(sign x_1, 0)`` a.e."""
    return ProblemSpec("nonsmooth", f=_zero, g=_abs_x1, u=_abs_x1, grad=_abs_x1_grad)


PROBLEMS = {"quartic": quartic_problem, "nonsmooth": nonsmooth_problem}


def get_problem(name: str) -> ProblemSpec:
    try:
        return PROBLEMS[name]()
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


# ---------------------------------------------------------------------------
# error norms


def _edge_midpoints(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Midpoints ``(T, 3, 2)`` of triangle edges and P1 weights ``(T, 3, 3)``."""
    p = mesh.points[mesh.triangles]
    mids = 0.5 * (p[:, [0, 1, 2]] + p[:, [1, 2, 0]])
    w = 0.5 * np.array([[1, 1, 0], [0, 1, 1], [1, 0, 1]], dtype=float)
    return mids, np.broadcast_to(w, (mesh.num_triangles, 3, 3))


def error_norms(
    mesh: Mesh, u_h: FeFunction, spec: ProblemSpec, h1: bool = True
) -> tuple[float, float, float]:
    """Relative L2, L-infinity and full H1 errors of ``u_h`` against ``spec.u``.

    Integrals use the edge-midpoint rule on every triangle.  The sup norm is
    taken over nodes and quadrature points.  Pass ``h1=False`` to skip the H1
    error (returned as ``nan``) when no exact gradient is known.
    """
    if spec.u is None:
        raise ValueError(f"{spec.name}: no exact solution to compare against")
    if h1 and spec.grad is None:
        raise ValueError(f"{spec.name}: H1 error needs the exact gradient")
    mids, w = _edge_midpoints(mesh)
    qw = np.repeat(mesh.areas / 3.0, 3)
    q = mids.reshape(-1, 2)
    u_q = np.asarray(spec.u(q), dtype=float)
    uh_q = np.einsum("tqj,tj->tq", w, u_h.values[mesh.triangles]).ravel()
    u_n = np.asarray(spec.u(mesh.points), dtype=float)

    def rel(num, den):
        return float(num / den) if den > 0 else float(num)

    l2_err2 = float(qw @ (uh_q - u_q) ** 2)
    l2_ref2 = float(qw @ u_q**2)
    linf = max(np.abs(uh_q - u_q).max(), np.abs(u_h.values - u_n).max())
    linf_ref = max(np.abs(u_q).max(), np.abs(u_n).max())
    h1_rel = float("nan")
    if h1:
        gq = np.asarray(spec.grad(q), dtype=float)
        gh = np.repeat(u_h.gradients(), 3, axis=0)
        semi_err2 = float(qw @ ((gh - gq) ** 2).sum(axis=1))
        semi_ref2 = float(qw @ (gq**2).sum(axis=1))
        h1_rel = rel(np.sqrt(l2_err2 + semi_err2), np.sqrt(l2_ref2 + semi_ref2))
    return rel(np.sqrt(l2_err2), np.sqrt(l2_ref2)), rel(linf, linf_ref), h1_rel


# ---------------------------------------------------------------------------
# convergence studies


@dataclass
class StudyCell:
    level: int
    dofs: int
    m: float
    iterations: int = 0
    l2_rel: float = float("nan")
    linf_rel: float = float("nan")
    h1_rel: float = float("nan")
    seconds: float = 0.0
    failed: bool = False
    message: str = ""
    max_abs: float = float("nan")

    def row(self) -> tuple:
        return (
            self.level,
            self.dofs,
            self.m,
            self.iterations,
            self.l2_rel,
            self.linf_rel,
            self.h1_rel,
            self.seconds,
        )


@dataclass
class ErrorReport:
    """All study cells plus the mesh size of every level."""

    problem: str
    cells: list[StudyCell] = field(default_factory=list)
    h_avg: dict[int, float] = field(default_factory=dict)

    @property
    def levels(self) -> list[int]:
        return sorted(self.h_avg)

    def ok_cells(self) -> list[StudyCell]:
        return [c for c in self.cells if not c.failed]

    def cell(self, level: int, m: float) -> StudyCell:
        for c in self.cells:
            if c.level == level and c.m == m:
                return c
        raise KeyError((level, m))

    def best(self, level: int, norm: str = "l2_rel") -> StudyCell:
        """Cell of ``level`` with the smallest error in ``norm``."""
        if norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        cands = [c for c in self.ok_cells() if c.level == level and np.isfinite(getattr(c, norm))]
        if not cands:
            raise KeyError(f"no successful cell at level {level}")
        return min(cands, key=lambda c: getattr(c, norm))

    def order(self, norm: str = "l2_rel", levels: Sequence[int] | None = None) -> float:
        """Least-squares slope of log(best error) against log(h_avg)."""
        levels = self.levels if levels is None else list(levels)
        h = np.array([self.h_avg[lv] for lv in levels])
        e = np.array([getattr(self.best(lv, norm), norm) for lv in levels])
        if len(levels) < 2:
            raise ValueError("an order needs at least two levels")
        slope, _ = np.polyfit(np.log(h), np.log(e), 1)
        return float(slope)

    def to_csv(self, fh=None) -> str:
        """CSV of successful cells; failed cells are left out."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c in self.ok_cells():
            w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in c.row()])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text

    def summary(self) -> str:
        """Best-m table per level and norm followed by the fitted orders."""
        lines = [f"{self.problem}: best m per level"]
        lines.append("level   dofs  " + "  ".join(f"{n:>16s}" for n in NORMS))
        for lv in self.levels:
            try:
                best = [self.best(lv, n) for n in NORMS]
            except KeyError:
                lines.append(f"{lv:5d}  (all cells failed)")
                continue
            cols = "  ".join(f"{getattr(b, n):9.3e} (m={b.m:g})" for b, n in zip(best, NORMS))
            lines.append(f"{lv:5d} {best[0].dofs:6d}  {cols}")
        ok_levels = [lv for lv in self.levels if any(c.level == lv for c in self.ok_cells())]
        if len(ok_levels) >= 2:
            orders = ", ".join(f"{n}: {self.order(n, ok_levels):.2f}" for n in NORMS)
            lines.append(f"orders in h_avg: {orders}")
        return "\n".join(lines)


def worker_count(requested: int | None = None) -> int:
    """Worker processes, capped by ``MA_BELLMAN_THREADS`` when set."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("MA_BELLMAN_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise ValueError(f"MA_BELLMAN_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def solve_cell(
    mesh: Mesh,
    level: int,
    m: float,
    spec: ProblemSpec,
    grid: ControlGrid,
    tol: float,
    max_iter: int = 100,
    trace=None,
) -> tuple[StudyCell, SolveReport | None]:
    """Run one ``(level, m)`` cell; solver failures mark the cell failed."""
    cell = StudyCell(level, mesh.num_nodes, float(m))
    t0 = time.perf_counter()
    try:
        rep = howard_solve(
            mesh, grid, spec.f, spec.g, StencilConfig(m), tol=tol, max_iter=max_iter, trace=trace
        )
    except (np.linalg.LinAlgError, ValueError, ArithmeticError) as exc:
        cell.failed, cell.message = True, f"{type(exc).__name__}: {exc}"
        cell.seconds = time.perf_counter() - t0
        logger.warning("cell level=%d m=%g failed: %s", level, m, cell.message)
        return cell, None
    cell.seconds = time.perf_counter() - t0
    cell.iterations = rep.iterations
    cell.max_abs = float(np.abs(rep.solution.values).max())
    if not rep.converged:
        cell.failed, cell.message = True, f"no convergence in {rep.iterations} iterations"
        logger.warning("cell level=%d m=%g failed: %s", level, m, cell.message)
    if spec.u is not None:
        cell.l2_rel, cell.linf_rel, cell.h1_rel = error_norms(
            mesh, rep.solution, spec, h1=spec.grad is not None
        )
    return cell, rep


def _cell_job(args):
    return solve_cell(*args)[0]


def convergence_study(
    spec: ProblemSpec,
    levels: Sequence[int],
    m_values: Sequence[float],
    grid: ControlGrid | None = None,
    tol: float = 1e-6,
    max_iter: int = 100,
    base: Mesh | None = None,
    workers: int | None = 1,
    progress: Callable[[StudyCell], None] | None = None,
) -> ErrorReport:
    """Solve every ``(level, m)`` cell and collect errors.

    Meshes are refined once from ``base`` (the 91-node coarse mesh by
    default).  Cells run in a process pool when ``workers`` exceeds one.
    """
    levels = sorted(set(int(lv) for lv in levels))
    if not levels or levels[0] < 0:
        raise ValueError("levels must be a non-empty set of non-negative integers")
    if any(m <= 0 for m in m_values):
        raise ValueError("stencil factors m must be positive")
    grid = grid if grid is not None else build_control_grid()
    meshes = refined_levels(base if base is not None else coarse_mesh(), levels[-1])
    report = ErrorReport(spec.name, h_avg={lv: meshes[lv].h_avg for lv in levels})
    jobs = [(meshes[lv], lv, m, spec, grid, tol, max_iter) for lv in levels for m in m_values]
    n = min(worker_count(workers), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            cells = list(pool.map(_cell_job, jobs))
    else:
        cells = []
        for job in jobs:
            cells.append(_cell_job(job))
            if progress is not None:
                progress(cells[-1])
    report.cells = cells
    return report
