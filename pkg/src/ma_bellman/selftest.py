"""Fast self-checks of the oracles, the assembled systems and the solver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controls import build_control_grid, exact_hamiltonian, grid_hamiltonian, monge_ampere_residual
from .discretization import StencilConfig, WideStencil
from .howard import howard_solve
from .mesh import coarse_mesh, refine_uniform


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def check_oracle(rng: np.random.Generator, n: int = 200) -> CheckResult:
    """Grid sup never exceeds the exact Hamiltonian and stays close to it."""
    grid = build_control_grid(128, 65)
    worst = -np.inf
    for _ in range(n):
        A = rng.uniform(-5, 5, (2, 2))
        A = 0.5 * (A + A.T)
        f = rng.uniform(0, 10)
        exact = exact_hamiltonian(A, f)
        gap = exact - grid_hamiltonian(A, f, grid)[0]
        if gap < -1e-12:
            return CheckResult("oracle", False, f"grid sup exceeds exact value by {-gap:.2e}")
        worst = max(worst, gap / (1 + np.abs(A).max() + f))
    return CheckResult("oracle", bool(worst <= 5e-3), f"max scaled gap {worst:.2e}")


def check_equivalence(rng: np.random.Generator, n: int = 200) -> CheckResult:
    """Zero sets of the Bellman and Monge-Ampere operators agree on PSD data."""
    for _ in range(n):
        q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        mu = rng.uniform(0, 5, 2)
        A = q @ np.diag(mu) @ q.T
        f = 2 * np.sqrt(mu.prod()) * (1.0 if rng.random() < 0.5 else rng.uniform(0, 2))
        zero_h = abs(exact_hamiltonian(A, f)) <= 1e-9
        zero_m = abs(monge_ampere_residual(A, f)) <= 1e-9
        if zero_h != zero_m:
            return CheckResult("equivalence", False, f"mismatch at mu={mu}, f={f}")
    return CheckResult("equivalence", True, f"{n} samples")


def check_m_matrix(rng: np.random.Generator, n: int = 10) -> CheckResult:
    """Random policies assemble to M-matrices obeying the maximum principle."""
    mesh = refine_uniform(coarse_mesh())
    grid = build_control_grid(16, 5)
    st = WideStencil(mesh, grid, StencilConfig(2.0))
    inner = ~mesh.boundary
    for _ in range(n):
        system = st.assemble(
            rng.integers(0, len(grid), st.num_interior),
            np.zeros(mesh.num_nodes),
            rng.normal(size=mesh.num_nodes),
        )
        if not system.is_m_matrix_pattern():
            return CheckResult("m-matrix", False, "sign pattern violated")
        rhs = -system.rhs
        rhs[inner] = -rng.uniform(0, 1, inner.sum())
        v = system.solve(rhs)
        if v[inner].max() > v[~inner].max() + 1e-9:
            return CheckResult("m-matrix", False, "maximum principle violated")
    return CheckResult("m-matrix", True, f"{n} random policies")


def check_affine(rng: np.random.Generator) -> CheckResult:
    """Howard's method reproduces affine boundary data exactly when f = 0."""
    mesh = coarse_mesh()
    grid = build_control_grid(16, 5)
    c = rng.normal(size=3)

    def g(x):
        return c[0] + x @ c[1:]

    rep = howard_solve(mesh, grid, 0.0, g, StencilConfig(2.0))
    exact = g(mesh.points)
    err = np.abs(rep.solution.values - exact).max() / np.abs(exact).max()
    return CheckResult("affine", bool(rep.converged and err <= 1e-7), f"relative error {err:.1e}")


CHECKS: tuple[Callable[[np.random.Generator], CheckResult], ...] = (
    check_oracle,
    check_equivalence,
    check_m_matrix,
    check_affine,
)


def run_selftest(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for check in CHECKS:
        try:
            results.append(check(rng))
        except Exception as exc:  # a crash is a failed check, not an abort
            results.append(CheckResult(check.__name__[6:], False, f"{type(exc).__name__}: {exc}"))
    return results
