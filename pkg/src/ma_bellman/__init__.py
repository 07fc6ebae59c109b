"""Monge-Ampere solver through its Bellman reformulation.

Monotone wide-stencil semi-Lagrangian discretization on unstructured
triangular meshes, solved with Howard's policy iteration.
"""

from .controls import (
    ISOTROPIC,
    Control,
    ControlGrid,
    build_control_grid,
    control_to_matrix,
    exact_hamiltonian,
    grid_hamiltonian,
    monge_ampere_residual,
)
from .discretization import (
    PolicySystem,
    StencilConfig,
    WideStencil,
    assemble_policy_system,
    discrete_hamiltonian_at_node,
    scheme_residual,
    stencil_size,
)
from .experiments import (
    ErrorReport,
    ProblemSpec,
    convergence_study,
    error_norms,
    nonsmooth_problem,
    quartic_problem,
)
from .geometry import DomainGeometry
from .howard import MaxIterError, Policy, SolveReport, howard_solve, policy_improve, policy_solve
from .mesh import (
    FeFunction,
    FePoint,
    Mesh,
    MeshError,
    build_domain_mesh,
    clamp_to_domain,
    coarse_mesh,
    eval_p1,
    locate_point,
    read_mesh,
    refine_uniform,
    refined_levels,
    write_mesh,
)

__version__ = "0.1.0"

__all__ = [
    "ISOTROPIC",
    "Control",
    "ControlGrid",
    "DomainGeometry",
    "ErrorReport",
    "FeFunction",
    "FePoint",
    "MaxIterError",
    "Mesh",
    "MeshError",
    "Policy",
    "PolicySystem",
    "ProblemSpec",
    "SolveReport",
    "StencilConfig",
    "WideStencil",
    "assemble_policy_system",
    "build_control_grid",
    "build_domain_mesh",
    "clamp_to_domain",
    "coarse_mesh",
    "control_to_matrix",
    "convergence_study",
    "discrete_hamiltonian_at_node",
    "error_norms",
    "eval_p1",
    "exact_hamiltonian",
    "grid_hamiltonian",
    "howard_solve",
    "locate_point",
    "monge_ampere_residual",
    "nonsmooth_problem",
    "policy_improve",
    "policy_solve",
    "quartic_problem",
    "read_mesh",
    "refine_uniform",
    "refined_levels",
    "scheme_residual",
    "stencil_size",
    "write_mesh",
]
