import numpy as np
import pytest

from momentddp import conic, ddp
from momentddp.casestudies import two_stage_scalar_problem, zero_cost_problem
from momentddp.ddp import (
    DdpOptions,
    cut_invalidation_scalar,
    dual_pair_check,
    forward_simulation,
    initial_backward,
    run,
)
from momentddp.gridp import GridSpec, solve_dp
from momentddp.relax import (
    DiracSpec,
    UniformSpec,
    build_undecomposed_sdp,
    certificate_residuals,
    moments_of_distribution,
    sampled_bellman_margin,
    sampled_dominance_margin,
    terminal_epigraph,
)


@pytest.fixture(scope="module")
def toy_run():
    problem = two_stage_scalar_problem()
    options = DdpOptions(epsilon=1e-5, max_iterations=60)
    return problem, run(problem, 4, options)


@pytest.fixture(scope="module")
def toy_rho_k():
    problem = two_stage_scalar_problem()
    prog, _ = build_undecomposed_sdp(problem, 4)
    sol = conic.solve(prog, conic.SolverSettings(gap_tol=1e-7, feas_tol=1e-7))
    assert sol.optimal
    return sol.obj_primal


@pytest.fixture(scope="module")
def toy_grid_value():
    problem = two_stage_scalar_problem()
    grid = GridSpec.from_problem(problem, 2001, 2001)
    vf = solve_dp(problem, grid)
    return float(vf.value(0, [1.0]))


class TestZeroProblem:
    def test_converges_immediately(self):
        problem = zero_cost_problem()
        result = run(problem, 2, DdpOptions(epsilon=1e-6, max_iterations=5))
        assert result.converged
        assert len(result.history) == 1
        rec = result.history[0]
        assert rec.upper_bound == pytest.approx(0.0, abs=1e-6)
        assert rec.lower_bound == pytest.approx(0.0, abs=1e-6)

    def test_initial_cuts_are_zero(self):
        problem = zero_cost_problem()
        stack = initial_backward(problem, 2)
        for t in range(problem.T):
            cut = stack.cuts[t][0].cut
            for coeff in cut.terms.values():
                assert abs(coeff) < 1e-5

    def test_forward_masses(self):
        problem = zero_cost_problem()
        stack = initial_backward(problem, 2)
        q0 = moments_of_distribution(problem.nu0, 2)
        fwd = forward_simulation(problem, stack, q0, 2)
        assert fwd["upper_bound"] == pytest.approx(0.0, abs=1e-6)
        for q in fwd["state_moments"]:
            assert q.mass == pytest.approx(1.0, abs=1e-6)


class TestTwoStageScalar:
    def test_converges(self, toy_run):
        problem, result = toy_run
        assert result.converged
        gap = result.upper_bound - result.lower_bound
        assert gap < 1e-5

    def test_sandwich(self, toy_run, toy_rho_k, toy_grid_value):
        _, result = toy_run
        theta = result.lower_bound
        assert theta >= toy_rho_k - 1e-5
        assert theta <= toy_grid_value + 1e-3

    def test_lower_bound_monotone(self, toy_run):
        _, result = toy_run
        lbs = [rec.lower_bound for rec in result.history]
        for a, b in zip(lbs, lbs[1:]):
            assert b >= a - 1e-7 * (1 + abs(a))

    def test_upper_bound_floor(self, toy_run, toy_rho_k):
        _, result = toy_run
        for rec in result.history:
            assert rec.upper_bound >= toy_rho_k - 1e-6

    def test_lower_bound_ceiling(self, toy_run, toy_grid_value):
        _, result = toy_run
        for rec in result.history:
            assert rec.lower_bound <= toy_grid_value + 1e-3

    def test_initial_cut_under_approximates(self):
        problem = two_stage_scalar_problem()
        stack = initial_backward(problem, 4)
        cut = stack.cuts[1][0].cut
        for xv in np.linspace(-2, 2, 21):
            assert cut.eval([xv]) <= 1.5 * xv * xv + 1e-5

    def test_cut_invalidation(self, toy_run):
        problem, result = toy_run
        for rec in result.history:
            if rec.upper_bound - rec.lower_bound > 1e-6:
                scalar = cut_invalidation_scalar(rec, result.stack, t=1)
                assert scalar < 1e-7

    def test_upper_bound_recompute(self, toy_run):
        problem, result = toy_run
        for rec in result.history:
            assert rec.recompute_upper_bound(problem) == pytest.approx(
                rec.upper_bound, abs=1e-9
            )

    def test_cut_soundness(self, toy_run):
        problem, result = toy_run
        for t in range(problem.T):
            stage = problem.stages[t]
            epi = result.stack.epigraph(t + 1)
            for rec in result.stack.cuts[t]:
                assert sampled_bellman_margin(
                    stage, rec.cut, rec.bridge, seed=rec.iteration
                ) >= -1e-5
                assert sampled_dominance_margin(
                    epi, rec.bridge, seed=rec.iteration
                ) >= -1e-5

    def test_final_cuts_under_approximate_dp(self, toy_run):
        problem, result = toy_run
        grid = GridSpec.from_problem(problem, 41, 401)
        vf = solve_dp(problem, grid)
        for t in range(problem.T):
            for x in vf.axes[0]:
                cutval = result.stack.cut_max(t, [x])
                assert cutval <= vf.value(t, [x]) + 1e-3

    def test_reproducibility(self):
        problem = two_stage_scalar_problem()
        options = DdpOptions(epsilon=1e-5, max_iterations=10)
        a = run(problem, 4, options)
        b = run(problem, 4, options)
        assert len(a.history) == len(b.history)
        for ra, rb in zip(a.history, b.history):
            assert ra.upper_bound == rb.upper_bound
            assert ra.lower_bound == rb.lower_bound
            for qa, qb in zip(ra.state_moments, rb.state_moments):
                assert np.array_equal(qa.values, qb.values)


class TestDualPairCheck:
    def test_zero_problem(self):
        problem = zero_cost_problem()
        stack = ddp.ValueFunctionStack.fresh(problem)
        q = moments_of_distribution(UniformSpec(((-1.0, 1.0),)), 2)
        report = dual_pair_check(
            problem.stages[1], q, stack.epigraph(2), 2
        )
        assert report["gap"] is not None
        assert report["gap"] <= 1e-7

    def test_two_stage_terminal(self):
        problem = two_stage_scalar_problem()
        epi = terminal_epigraph(problem)
        q = moments_of_distribution(DiracSpec((0.5,)), 4)
        report = dual_pair_check(problem.stages[1], q, epi, 4)
        assert report["gap"] is not None
        assert report["gap"] <= 1e-6


class TestErrors:
    def test_stage_error_carries_context(self):
        # An epigraph cap far below attainable cost makes the backward
        # program infeasible, which must abort with stage diagnostics.
        from momentddp.relax import EpigraphSet, SemialgebraicSet
        from momentddp.poly import Polynomial

        problem = two_stage_scalar_problem()
        bad_epi = EpigraphSet(
            SemialgebraicSet.box([(-2.0, 2.0)]),
            -5.0,  # y <= -5 but y >= x^2: empty set
            [Polynomial.monomial(1, (2,))],
        )
        q = moments_of_distribution(UniformSpec(((-2.0, 2.0),)), 4)
        from momentddp.relax import build_forward_sdp

        prog, _ = build_forward_sdp(problem.stages[1], q, bad_epi, 4)
        with pytest.raises(ddp.DdpStageError) as err:
            ddp.solve_with_retry(prog, DdpOptions(), "forward", 1, 3)
        assert err.value.stage == 1
        assert err.value.iteration == 3
