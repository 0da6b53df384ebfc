import numpy as np
import pytest
import scipy.sparse as sp

from momentddp.conic import (
    ConicProgram,
    ConicStatus,
    SolverSettings,
    free,
    nonneg,
    psd,
    smat,
    solve,
    svec,
    svec_dim,
    verify,
)


def make_prog(c, A, b, blocks):
    return ConicProgram(np.asarray(c, float), sp.csr_matrix(np.asarray(A, float)),
                        np.asarray(b, float), blocks)


class TestSvec:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        M = rng.normal(size=(4, 4))
        M = M + M.T
        assert np.allclose(smat(svec(M), 4), M)

    def test_inner_product_preserved(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(3, 3))
        A = A + A.T
        B = rng.normal(size=(3, 3))
        B = B + B.T
        assert svec(A) @ svec(B) == pytest.approx(np.trace(A @ B))

    def test_dim(self):
        assert svec_dim(4) == 10


class TestLinearPrograms:
    def test_scalar_equality(self):
        # min x s.t. x = 2, x >= 0
        prog = make_prog([1.0], [[1.0]], [2.0], [nonneg(1)])
        sol = solve(prog)
        assert sol.status is ConicStatus.OPTIMAL
        assert sol.obj_primal == pytest.approx(2.0, abs=1e-7)
        assert sol.primal[0] == pytest.approx(2.0, abs=1e-7)

    def test_two_variable_lp(self):
        # min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0 -> optimum at x1 = 1
        prog = make_prog([1.0, 2.0], [[1.0, 1.0]], [1.0], [nonneg(2)])
        sol = solve(prog)
        assert sol.optimal
        assert sol.obj_primal == pytest.approx(1.0, abs=1e-7)

    def test_free_variable(self):
        # min x over free scalar pinned to 3
        prog = make_prog([1.0], [[1.0]], [3.0], [free(1)])
        sol = solve(prog)
        assert sol.optimal
        assert sol.primal[0] == pytest.approx(3.0, abs=1e-7)

    def test_mixed_free_and_cone(self):
        # min t s.t. t - x = 0, x = 5, t free, x >= 0
        prog = make_prog(
            [1.0, 0.0],
            [[1.0, -1.0], [0.0, 1.0]],
            [0.0, 5.0],
            [free(1), nonneg(1)],
        )
        sol = solve(prog)
        assert sol.optimal
        assert sol.obj_primal == pytest.approx(5.0, abs=1e-6)


class TestSemidefinitePrograms:
    def test_trace_minimization_against_eigensolver(self):
        # min <diag(1,2), X> s.t. trace(X) = 1, X psd.
        # Oracle: objective is min eigenvalue of diag(1,2) by Rayleigh.
        C = np.diag([1.0, 2.0])
        cvec = svec(C)
        A = svec(np.eye(2))[None, :]
        prog = make_prog(cvec, A, [1.0], [psd(2)])
        sol = solve(prog)
        oracle = float(np.linalg.eigvalsh(C)[0])
        assert sol.optimal
        assert sol.obj_primal == pytest.approx(oracle, abs=1e-7)
        X = smat(sol.primal, 2)
        assert X[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_random_trace_objectives(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            B = rng.normal(size=(3, 3))
            C = B + B.T
            prog = make_prog(
                svec(C), svec(np.eye(3))[None, :], [1.0], [psd(3)]
            )
            sol = solve(prog)
            assert sol.optimal
            oracle = float(np.linalg.eigvalsh(C)[0])
            assert sol.obj_primal == pytest.approx(oracle, abs=1e-6)

    def test_schur_complement_bound(self):
        # min t s.t. [[1, 2], [2, t]] psd  ->  t = 4.
        # Rows pin X11 = 1, X12 = sqrt(2)*2/sqrt(2); objective picks X22.
        c = np.zeros(3)
        c[2] = 1.0
        A = np.zeros((2, 3))
        A[0, 0] = 1.0
        A[1, 1] = 1.0
        b = [1.0, np.sqrt(2.0) * 2.0]
        prog = make_prog(c, A, b, [psd(2)])
        sol = solve(prog)
        assert sol.optimal
        assert sol.obj_primal == pytest.approx(4.0, abs=1e-6)

    def test_psd_plus_nonneg(self):
        # min trace(X) + z s.t. X11 = 2, z = 1
        n = svec_dim(2)
        c = np.concatenate([svec(np.eye(2)), [1.0]])
        A = np.zeros((2, n + 1))
        A[0, 0] = 1.0
        A[1, n] = 1.0
        prog = make_prog(c, A, [2.0, 1.0], [psd(2), nonneg(1)])
        sol = solve(prog)
        assert sol.optimal
        assert sol.obj_primal == pytest.approx(3.0, abs=1e-6)


class TestInfeasibility:
    def test_primal_infeasible_psd_scalar(self):
        prog = make_prog([0.0], [[1.0]], [-1.0], [psd(1)])
        sol = solve(prog)
        assert sol.status is ConicStatus.PRIMAL_INFEASIBLE

    def test_primal_infeasible_nonneg(self):
        # x1 + x2 = -3 with x >= 0
        prog = make_prog([1.0, 1.0], [[1.0, 1.0]], [-3.0], [nonneg(2)])
        sol = solve(prog)
        assert sol.status is ConicStatus.PRIMAL_INFEASIBLE

    def test_primal_infeasibility_certificate(self):
        prog = make_prog([0.0], [[1.0]], [-1.0], [psd(1)])
        sol = solve(prog)
        # Farkas: A'y + s = 0 with s in cone and b'y > 0.
        assert float(prog.b @ sol.dual) == pytest.approx(1.0, rel=1e-6)
        assert np.linalg.norm(prog.A.T @ sol.dual + sol.slack) < 1e-6

    def test_dual_infeasible_unbounded(self):
        # min -x1 s.t. x1 - x2 = 0, x >= 0: unbounded below.
        prog = make_prog([-1.0, 0.0], [[1.0, -1.0]], [0.0], [nonneg(2)])
        sol = solve(prog)
        assert sol.status is ConicStatus.DUAL_INFEASIBLE
        # Improving ray: A x = 0, c'x < 0, x in cone.
        assert np.linalg.norm(prog.A @ sol.primal) < 1e-6
        assert float(prog.c @ sol.primal) == pytest.approx(-1.0, rel=1e-6)


class TestInvariants:
    def _random_feasible_sdp(self, rng, p=3, m=4):
        # Build a program with known strictly feasible primal and dual.
        d = svec_dim(p)
        A = rng.normal(size=(m, d))
        X0 = np.eye(p)
        b = A @ svec(X0)
        y0 = rng.normal(size=m)
        S0 = np.eye(p) * (1.0 + rng.uniform())
        c = A.T @ y0 + svec(S0)
        return make_prog(c, A, b, [psd(p)])

    def test_weak_duality_and_cone_membership(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            prog = self._random_feasible_sdp(rng)
            sol = solve(prog)
            assert sol.optimal
            assert sol.obj_primal >= sol.obj_dual - 1e-7 * (
                1 + abs(sol.obj_primal)
            )
            X = smat(sol.primal, 3)
            emin = np.linalg.eigvalsh(X)[0]
            assert emin >= -1e-7 * (1 + np.linalg.norm(X))

    def test_determinism(self):
        rng = np.random.default_rng(13)
        prog = self._random_feasible_sdp(rng)
        a = solve(prog)
        b = solve(prog)
        assert a.status == b.status
        assert a.obj_primal == b.obj_primal
        assert a.obj_dual == b.obj_dual
        assert np.array_equal(a.primal, b.primal)
        assert np.array_equal(a.dual, b.dual)

    def test_iteration_limit(self):
        prog = make_prog([1.0], [[1.0]], [2.0], [nonneg(1)])
        sol = solve(prog, SolverSettings(max_iter=1))
        assert sol.status is ConicStatus.ITERATION_LIMIT


class TestVerify:
    def test_exact_point_zero_residuals(self):
        prog = make_prog([1.0], [[1.0]], [2.0], [nonneg(1)])
        sol = solve(prog)
        sol.primal = np.array([2.0])
        sol.dual = np.array([1.0])
        sol.slack = np.array([0.0])
        rep = verify(prog, sol)
        assert rep.eq_residual == 0.0
        assert rep.dual_residual == 0.0

    def test_solver_output_small_residuals(self):
        C = np.diag([1.0, 2.0])
        prog = make_prog(
            svec(C), svec(np.eye(2))[None, :], [1.0], [psd(2)]
        )
        sol = solve(prog)
        rep = verify(prog, sol)
        assert rep.eq_residual <= 1e-7
        assert rep.dual_residual <= 1e-7
        assert rep.worst_cone_violation <= 1e-7

    def test_perturbed_solution_flagged(self):
        C = np.diag([1.0, 2.0])
        prog = make_prog(
            svec(C), svec(np.eye(2))[None, :], [1.0], [psd(2)]
        )
        sol = solve(prog)
        sol.primal = sol.primal + 1e-3
        rep = verify(prog, sol)
        assert rep.eq_residual >= 1e-4


class TestValidation:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_prog([1.0, 1.0], [[1.0, 1.0]], [1.0], [nonneg(1)])

    def test_zero_row_rejected(self):
        with pytest.raises(ValueError):
            make_prog([1.0], [[0.0]], [1.0], [nonneg(1)])

    def test_dump_text(self):
        prog = make_prog([1.0], [[1.0]], [2.0], [nonneg(1)])
        text = prog.dump_text()
        assert "nn size=1" in text
        assert "= 2" in text
