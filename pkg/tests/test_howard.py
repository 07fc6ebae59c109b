import io

import numpy as np
import pytest

from ma_bellman import (
    FeFunction,
    StencilConfig,
    WideStencil,
    build_control_grid,
    howard_solve,
    nonsmooth_problem,
    quartic_problem,
    scheme_residual,
)
from ma_bellman.howard import MaxIterError, Policy, policy_improve, policy_solve

TOL = 1e-6


def affine(x):
    return 3 * x[:, 0] - 2 * x[:, 1] + 1


@pytest.fixture(scope="module")
def quartic0(mesh0, grid):
    spec = quartic_problem()
    cfg = StencilConfig(2.0)
    st_ = WideStencil(mesh0, grid, cfg)
    return spec, cfg, st_, howard_solve(mesh0, grid, spec.f, spec.g, cfg, stencil=st_)


@pytest.fixture(scope="module")
def nonsmooth0(mesh0, grid):
    spec = nonsmooth_problem()
    cfg = StencilConfig(4.0)
    st_ = WideStencil(mesh0, grid, cfg)
    return spec, cfg, st_, howard_solve(mesh0, grid, spec.f, spec.g, cfg, stencil=st_)


def sup(field, mesh):
    return float(np.abs(np.broadcast_to(field(mesh.points), mesh.num_nodes)).max())


class TestHoward:
    def test_zero_data(self, mesh0, grid):
        rep = howard_solve(mesh0, grid, 0.0, 0.0, StencilConfig(2.0))
        assert rep.converged and rep.iterations <= 2
        assert np.all(rep.solution.values == 0)

    @pytest.mark.parametrize("case", ["quartic0", "nonsmooth0"])
    def test_converges_with_small_residual(self, case, mesh0, grid, request):
        spec, cfg, st_, rep = request.getfixturevalue(case)
        assert rep.converged
        assert rep.final_step < TOL
        assert 3 <= rep.iterations <= 10
        assert len(rep.steps) == len(rep.residuals) == rep.iterations
        assert rep.steps[0] == float("inf")
        res = scheme_residual(mesh0, rep.solution, grid, spec.f, spec.g, cfg, stencil=st_)
        scale = 1 + sup(spec.f, mesh0) + sup(spec.g, mesh0)
        assert np.abs(res).max() <= 10 * TOL * scale

    @pytest.mark.parametrize("case", ["quartic0", "nonsmooth0"])
    def test_monotone_decrease(self, case, request):
        rep = request.getfixturevalue(case)[3]
        assert rep.monotone_violation <= 1e-9

    def test_quartic_iteration_count(self, quartic0):
        assert quartic0[3].iterations == pytest.approx(5, abs=2)

    def test_independent_of_initial_policy(self, mesh0, grid, quartic0, rng):
        spec, cfg, st_, rep = quartic0
        for start in (Policy.constant(grid, st_.num_interior, 0), Policy(grid, rng.integers(0, len(grid), st_.num_interior))):
            other = howard_solve(mesh0, grid, spec.f, spec.g, cfg, stencil=st_, initial_policy=start)
            assert other.converged
            assert np.abs(other.solution.values - rep.solution.values).max() <= 10 * TOL

    @pytest.mark.parametrize("case", ["quartic0", "nonsmooth0"])
    def test_comparison_function(self, case, mesh0, request, rng):
        # u_h - I_h zeta with zeta = M/2 |x - p|^2, M > sup f / 2, has its minimum on the boundary
        spec, _, _, rep = request.getfixturevalue(case)
        M = sup(spec.f, mesh0) / 2 + 1
        for p in [(0.0, 0.0), (1.0, 1.0), tuple(rng.uniform(-1, 1, 2))]:
            zeta = 0.5 * M * ((mesh0.points - p) ** 2).sum(axis=1)
            w = rep.solution.values - zeta
            assert w[mesh0.interior_nodes].min() >= w[mesh0.boundary_nodes].min() - 1e-9

    def test_negative_source_rejected(self, mesh0, grid):
        with pytest.raises(ValueError):
            howard_solve(mesh0, grid, -1.0, 0.0, StencilConfig(2.0))

    def test_max_iter(self, mesh0, grid):
        spec = quartic_problem()
        rep = howard_solve(mesh0, grid, spec.f, spec.g, StencilConfig(2.0), max_iter=2)
        assert not rep.converged and rep.iterations == 2
        with pytest.raises(MaxIterError) as info:
            howard_solve(mesh0, grid, spec.f, spec.g, StencilConfig(2.0), max_iter=2, raise_on_failure=True)
        assert info.value.report.iterations == 2

    def test_trace(self, mesh0, grid):
        spec = quartic_problem()
        buf = io.StringIO()
        rep = howard_solve(mesh0, grid, spec.f, spec.g, StencilConfig(2.0), trace=buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "iter,step_inf,residual_inf,seconds"
        assert len(lines) == rep.iterations + 1
        for i, line in enumerate(lines[1:], start=1):
            it, step, res, secs = line.split(",")
            assert int(it) == i
            assert float(step) == rep.steps[i - 1]
            assert float(res) == rep.residuals[i - 1]
            assert float(secs) >= 0


class TestPolicyImprove:
    def test_zero_ties_to_index_zero(self, mesh0, small_grid):
        v = FeFunction(mesh0, np.zeros(mesh0.num_nodes))
        pol = policy_improve(mesh0, v, small_grid, 0.0, 0.0, StencilConfig(2.0))
        assert np.all(pol.index == 0)

    def test_members_of_grid(self, mesh0, small_grid, rng):
        v = FeFunction(mesh0, rng.normal(size=mesh0.num_nodes))
        pol = policy_improve(mesh0, v, small_grid, 1.0, 0.0, StencilConfig(2.0))
        assert len(pol) == mesh0.interior_nodes.size
        assert pol.index.min() >= 0 and pol.index.max() < len(small_grid)

    def test_improvement_is_greedy(self, mesh0, small_grid, rng):
        # the improved policy attains the Hamiltonian, every other policy is below it
        cfg = StencilConfig(2.0)
        st_ = WideStencil(mesh0, small_grid, cfg)
        v = FeFunction(mesh0, rng.normal(size=mesh0.num_nodes))
        f = rng.uniform(0, 2, mesh0.num_nodes)
        pol = policy_improve(mesh0, v, small_grid, f, 0.0, cfg, stencil=st_)
        ham = st_.hamiltonian(v.values, f[st_.nodes])[0]

        def action(idx):
            system = st_.assemble(idx, f, np.zeros(mesh0.num_nodes))
            return (system.matrix @ v.values + system.rhs)[st_.nodes]

        np.testing.assert_allclose(action(pol.index), ham, atol=1e-9 * (1 + np.abs(ham).max()))
        for _ in range(5):
            other = rng.integers(0, len(small_grid), st_.num_interior)
            assert np.all(action(other) <= ham + 1e-9 * (1 + np.abs(ham).max()))


class TestPolicySolve:
    def test_zero(self, mesh0, small_grid, rng):
        pol = Policy(small_grid, rng.integers(0, len(small_grid), mesh0.interior_nodes.size))
        v = policy_solve(mesh0, pol, 0.0, 0.0, StencilConfig(2.0))
        assert np.abs(v.values).max() == 0

    def test_affine(self, mesh1, small_grid, rng):
        for _ in range(3):
            pol = Policy(small_grid, rng.integers(0, len(small_grid), mesh1.interior_nodes.size))
            v = policy_solve(mesh1, pol, 0.0, affine, StencilConfig(2.0))
            assert np.abs(v.values - affine(mesh1.points)).max() <= 1e-8

    def test_boundary_values_exact(self, mesh0, small_grid, rng):
        pol = Policy(small_grid, rng.integers(0, len(small_grid), mesh0.interior_nodes.size))
        g = rng.normal(size=mesh0.num_nodes)
        v = policy_solve(mesh0, pol, 1.0, g, StencilConfig(2.0))
        assert np.array_equal(v.values[mesh0.boundary], g[mesh0.boundary])


def test_stability_across_levels(levels, grid):
    spec = nonsmooth_problem()
    top = [
        np.abs(howard_solve(mesh, grid, spec.f, spec.g, StencilConfig(4.0)).solution.values).max()
        for mesh in levels[:3]
    ]
    bound = 2 * top[0] + sup(spec.g, levels[0])
    assert max(top) <= bound


def test_grid_choice_does_not_change_scheme_solution_much(mesh0):
    spec = quartic_problem()
    coarse = howard_solve(mesh0, build_control_grid(16, 9), spec.f, spec.g, StencilConfig(2.0))
    fine = howard_solve(mesh0, build_control_grid(64, 33), spec.f, spec.g, StencilConfig(2.0))
    # a finer control grid raises the discrete Hamiltonian, so the solution can only go down
    assert np.all(fine.solution.values <= coarse.solution.values + 1e-9)
