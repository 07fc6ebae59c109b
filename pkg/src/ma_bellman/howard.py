"""Howard's policy iteration for the discrete Bellman system."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .controls import ControlGrid
from .discretization import StencilConfig, WideStencil, sample
from .mesh import FeFunction, Mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Policy:
    """One grid control per interior node, stored as grid indices."""

    grid: ControlGrid
    index: np.ndarray

    @classmethod
    def constant(cls, grid: ControlGrid, n: int, which: int | None = None) -> "Policy":
        which = grid.isotropic_index if which is None else which
        return cls(grid, np.full(n, which, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i):
        return self.grid[int(self.index[i])]


@dataclass
class SolveReport:
    solution: FeFunction
    iterations: int
    steps: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    seconds: float = 0.0
    converged: bool = False
    policy: Policy | None = None
    monotone_violation: float = 0.0

    @property
    def final_step(self) -> float:
        return self.steps[-1] if self.steps else float("inf")


class MaxIterError(RuntimeError):
    """Howard's iteration did not reach the step tolerance."""

    def __init__(self, report: SolveReport):
        super().__init__(
            f"no convergence in {report.iterations} iterations "
            f"(last step {report.final_step:.3e})"
        )
        self.report = report


def _stencil(mesh, grid, cfg, stencil):
    if stencil is not None:
        return stencil
    return WideStencil(mesh, grid, cfg)


def policy_improve(
    mesh: Mesh,
    v: FeFunction,
    grid: ControlGrid,
    f,
    g,
    cfg: StencilConfig,
    stencil: WideStencil | None = None,
) -> Policy:
    """Pointwise argmax of the discrete Hamiltonian at ``v`` (lowest index on ties)."""
    st = _stencil(mesh, grid, cfg, stencil)
    _, arg = st.hamiltonian(v.values, sample(f, mesh.points)[st.nodes])
    return Policy(grid, arg)


def policy_solve(
    mesh: Mesh,
    policy: Policy,
    f,
    g,
    cfg: StencilConfig,
    stencil: WideStencil | None = None,
) -> FeFunction:
    """Solve the affine equation of a frozen policy."""
    st = _stencil(mesh, policy.grid, cfg, stencil)
    system = st.assemble(policy.index, sample(f, mesh.points), sample(g, mesh.points))
    return FeFunction(mesh, system.solve())


def howard_solve(
    mesh: Mesh,
    grid: ControlGrid,
    f,
    g,
    cfg: StencilConfig,
    tol: float = 1e-6,
    max_iter: int = 100,
    initial_policy: Policy | None = None,
    stencil: WideStencil | None = None,
    trace: TextIO | None = None,
    raise_on_failure: bool = False,
) -> SolveReport:
    """Policy iteration from the isotropic policy until the sup-norm step is below ``tol``.

    Iterations are counted as linear solves.  The first solve has no
    predecessor, so its step is recorded as ``inf``.  Writes
    ``iter,step_inf,residual_inf,seconds`` lines to ``trace`` when given.
    """
    t0 = time.perf_counter()
    st = _stencil(mesh, grid, cfg, stencil)
    f_nodes = sample(f, mesh.points)
    if np.any(f_nodes < 0):
        raise ValueError("f must be non-negative at all nodes")
    g_nodes = sample(g, mesh.points)
    f_int = f_nodes[st.nodes]
    policy = initial_policy or Policy.constant(grid, st.num_interior)
    if trace is not None:
        trace.write("iter,step_inf,residual_inf,seconds\n")

    prev = None
    report = SolveReport(FeFunction(mesh, np.zeros(mesh.num_nodes)), 0)
    for it in range(1, max_iter + 1):
        v = st.assemble(policy.index, f_nodes, g_nodes).solve()
        step = float("inf") if prev is None else float(np.abs(v - prev).max())
        if prev is not None:
            report.monotone_violation = max(report.monotone_violation, float((v - prev).max()))
        ham, arg = st.hamiltonian(v, f_int)
        residual = float(np.abs(ham).max()) if len(ham) else 0.0
        report.steps.append(step)
        report.residuals.append(residual)
        report.iterations = it
        elapsed = time.perf_counter() - t0
        if trace is not None:
            trace.write(f"{it},{step!r},{residual!r},{elapsed:.6f}\n")
        logger.debug("howard it=%d step=%.3e residual=%.3e", it, step, residual)
        prev = v
        report.solution = FeFunction(mesh, v)
        report.policy = policy
        if step < tol:
            report.converged = True
            break
        policy = Policy(grid, arg)
    report.seconds = time.perf_counter() - t0
    if not report.converged:
        logger.warning(
            "howard: no convergence after %d iterations (step %.3e)",
            report.iterations,
            report.final_step,
        )
        if raise_on_failure:
            raise MaxIterError(report)
    return report
