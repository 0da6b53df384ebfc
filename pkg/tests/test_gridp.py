import numpy as np
import pytest

from momentddp.casestudies import two_stage_scalar_problem, zero_cost_problem
from momentddp.gridp import INFEASIBLE, GridSpec, GridValueFunction, rollout, solve_dp


def brute_force_two_stage(xs, us):
    """Independent oracle: hand-expanded backward induction for
    f = x + u, l = x^2 + u^2, H = x^2 on [-2, 2] boxes."""
    H = xs**2
    v1 = np.empty_like(xs)
    for i, x in enumerate(xs):
        nxt = x + us
        ok = (nxt >= -2) & (nxt <= 2)
        v1[i] = np.min(x**2 + us[ok] ** 2 + np.interp(nxt[ok], xs, H))
    v0 = np.empty_like(xs)
    for i, x in enumerate(xs):
        nxt = x + us
        ok = (nxt >= -2) & (nxt <= 2)
        v0[i] = np.min(x**2 + us[ok] ** 2 + np.interp(nxt[ok], xs, v1))
    return v0, v1


class TestSolveDp:
    def test_zero_cost_all_zero(self):
        problem = zero_cost_problem()
        grid = GridSpec.from_problem(problem, 11, 11)
        vf = solve_dp(problem, grid)
        for table in vf.tables:
            assert np.allclose(table, 0.0)

    def test_two_stage_matches_brute_force(self):
        problem = two_stage_scalar_problem()
        grid = GridSpec.from_problem(problem, 21, 201)
        vf = solve_dp(problem, grid)
        xs = np.linspace(-2, 2, 21)
        us = np.linspace(-2, 2, 201)
        v0, v1 = brute_force_two_stage(xs, us)
        assert np.allclose(vf.tables[1], v1, atol=1e-9)
        assert np.allclose(vf.tables[0], v0, atol=1e-9)

    def test_grid_optimality_exhaustive(self):
        # No enumerated control improves the stored value at any grid state.
        problem = two_stage_scalar_problem()
        grid = GridSpec.from_problem(problem, 9, 41)
        vf = solve_dp(problem, grid)
        us = np.linspace(-2, 2, 41)
        for t in (0, 1):
            stage = problem.stages[t]
            for x in vf.axes[0]:
                stored = vf.value(t, [x])
                for u in us:
                    nxt = stage.f[0].eval([x, u])
                    if not -2 <= nxt <= 2:
                        continue
                    cand = stage.l.eval([x, u]) + vf.value(t + 1, [nxt])
                    assert cand >= stored - 1e-9

    def test_infeasible_states_marked(self):
        # Shrink the next-stage box so edge states cannot stay inside.
        from momentddp.poly import Polynomial
        from momentddp.relax import (
            DiracSpec,
            MultistageProblem,
            SemialgebraicSet,
            StageModel,
        )

        n = 2
        x = Polynomial.variable(n, 0)
        u = Polynomial.variable(n, 1)
        f = [x + u]
        l = Polynomial.zero(n)
        C = SemialgebraicSet.box([(-1.0, 1.0), (-0.05, 0.05)])
        X = SemialgebraicSet.box([(-1.0, 1.0)])
        stage = StageModel(1, 1, f, l, C, X)
        problem = MultistageProblem(
            [stage],
            Polynomial.zero(1),
            SemialgebraicSet.box([(0.5, 0.6)]),
            DiracSpec((0.55,)),
        )
        grid = GridSpec.from_problem(problem, 21, 21)
        vf = solve_dp(problem, grid)
        assert vf.tables[0][0] == INFEASIBLE  # x = -1 cannot reach [0.5, 0.6]
        assert vf.value(0, [0.55]) < INFEASIBLE

    def test_table_rows_export(self):
        problem = zero_cost_problem()
        grid = GridSpec.from_problem(problem, 5, 5)
        vf = solve_dp(problem, grid)
        rows = list(vf.table_rows())
        assert len(rows) == 3 * 5
        assert rows[0][0] == 0


class TestRollout:
    def test_rollout_matches_dp_value_at_grid_point(self):
        problem = two_stage_scalar_problem()
        grid = GridSpec.from_problem(problem, 41, 401)
        vf = solve_dp(problem, grid)
        x0 = [1.0]  # grid-aligned
        roll = rollout(problem, vf, x0, grid)
        total = roll.total_cost + problem.H.eval(roll.states[-1])
        assert total == pytest.approx(vf.value(0, x0), abs=1e-6)

    def test_zero_cost_rollout(self):
        problem = zero_cost_problem()
        grid = GridSpec.from_problem(problem, 11, 11)
        vf = solve_dp(problem, grid)
        roll = rollout(problem, vf, [0.5], grid)
        assert roll.total_cost == 0.0

    def test_infeasible_start_rejected(self):
        problem = two_stage_scalar_problem()
        grid = GridSpec.from_problem(problem, 11, 11)
        vf = solve_dp(problem, grid)
        with pytest.raises(ValueError):
            rollout(problem, vf, [5.0], grid)
