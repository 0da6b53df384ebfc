"""Standard-form linear-conic programs and an embedded primal-dual solver.

Programs are stated as

    minimize    c'x
    subject to  A x = b,   x in K,

where K is an ordered product of positive-semidefinite, non-negative, and
free blocks.  PSD blocks are stored in scaled symmetric vectorization
(lower triangle, column-major, off-diagonal entries multiplied by sqrt(2)),
so Euclidean inner products of svec vectors equal trace inner products of
the matrices they represent.

The solver is a homogeneous self-dual embedding interior-point method with
Nesterov-Todd scaling and a Mehrotra predictor-corrector step.  It detects
primal and dual infeasibility through the embedding and is deterministic:
identical inputs and settings produce bit-identical outputs.
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

SQRT2 = math.sqrt(2.0)


def svec_dim(p: int) -> int:
    return p * (p + 1) // 2


@lru_cache(maxsize=None)
def _svec_indices(p: int):
    rows, cols = [], []
    for j in range(p):
        for i in range(j, p):
            rows.append(i)
            cols.append(j)
    I = np.array(rows, dtype=np.intp)
    J = np.array(cols, dtype=np.intp)
    diag = I == J
    return I, J, diag


def svec(M: np.ndarray) -> np.ndarray:
    """Scaled symmetric vectorization of a symmetric matrix."""
    p = M.shape[0]
    I, J, diag = _svec_indices(p)
    v = M[I, J].copy()
    v[~diag] *= SQRT2
    return v


def smat(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of `svec`."""
    I, J, diag = _svec_indices(p)
    vals = np.asarray(v).copy()
    M = np.zeros((p, p), dtype=vals.dtype)
    vals[~diag] /= SQRT2
    M[I, J] = vals
    M[J, I] = vals
    return M


def _symkron(Q: np.ndarray) -> np.ndarray:
    """Dense matrix of u -> svec(Q @ smat(u) @ Q) in svec coordinates."""
    p = Q.shape[0]
    I, J, diag = _svec_indices(p)
    n = np.where(diag, 0.5, 1.0 / SQRT2)
    QII = Q[np.ix_(I, I)]
    QJJ = Q[np.ix_(J, J)]
    QIJ = Q[np.ix_(I, J)]
    QJI = Q[np.ix_(J, I)]
    return 2.0 * np.outer(n, n) * (QII * QJJ + QIJ * QJI)


class BlockKind(enum.Enum):
    PSD = "psd"
    NONNEG = "nn"
    FREE = "free"


@dataclass(frozen=True)
class Block:
    """One cone block: PSD(n) is an n x n matrix block, the others vectors."""

    kind: BlockKind
    size: int

    @property
    def dim(self) -> int:
        """Length of the variable segment this block occupies."""
        if self.kind is BlockKind.PSD:
            return svec_dim(self.size)
        return self.size


def psd(n: int) -> Block:
    return Block(BlockKind.PSD, n)


def nonneg(n: int) -> Block:
    return Block(BlockKind.NONNEG, n)


def free(n: int) -> Block:
    return Block(BlockKind.FREE, n)


class ConicProgram:
    """Immutable standard-form problem: min c'x s.t. Ax = b, x in K."""

    def __init__(self, c, A, b, blocks, row_labels=None):
        self.c = np.asarray(c, dtype=float)
        self.A = sp.csr_matrix(A)
        self.b = np.asarray(b, dtype=float)
        self.blocks = tuple(blocks)
        self.row_labels = tuple(row_labels) if row_labels is not None else None
        self.validate()

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def block_slices(self):
        out = []
        start = 0
        for blk in self.blocks:
            out.append((blk, slice(start, start + blk.dim)))
            start += blk.dim
        return out

    def validate(self):
        total = sum(blk.dim for blk in self.blocks)
        if total != self.c.shape[0]:
            raise ValueError(
                f"block dims sum to {total} but objective has {self.c.shape[0]}"
            )
        if self.A.shape != (self.b.shape[0], self.c.shape[0]):
            raise ValueError(
                f"A has shape {self.A.shape}, expected "
                f"({self.b.shape[0]}, {self.c.shape[0]})"
            )
        row_nnz = np.diff(self.A.indptr)
        if np.any(row_nnz == 0):
            bad = int(np.nonzero(row_nnz == 0)[0][0])
            label = self.row_labels[bad] if self.row_labels else bad
            raise ValueError(f"equality row {label} is identically zero")

    def dump_text(self) -> str:
        """Self-describing text dump for external cross-checking."""
        out = io.StringIO()
        out.write(f"conic program: {self.m} equality rows, {self.n} scalars\n")
        out.write("objective:")
        for v in self.c:
            out.write(f" {v:.17g}")
        out.write("\nblocks:\n")
        for blk, sl in self.block_slices():
            out.write(f"  {blk.kind.value} size={blk.size} cols={sl.start}:{sl.stop}\n")
        out.write("rows:\n")
        coo = self.A.tocoo()
        per_row = [[] for _ in range(self.m)]
        for i, j, v in zip(coo.row, coo.col, coo.data):
            per_row[i].append((j, v))
        for i in range(self.m):
            label = self.row_labels[i] if self.row_labels else str(i)
            entries = " ".join(
                f"{j}:{v:.17g}" for j, v in sorted(per_row[i])
            )
            out.write(f"  [{label}] {entries} = {self.b[i]:.17g}\n")
        return out.getvalue()


class ConicStatus(enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class ConicSolution:
    status: ConicStatus
    primal: np.ndarray
    dual: np.ndarray
    slack: np.ndarray
    obj_primal: float
    obj_dual: float
    gap: float
    residuals: tuple  # (primal feas, dual feas, relative gap)
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status is ConicStatus.OPTIMAL


@dataclass
class SolverSettings:
    gap_tol: float = 1e-8
    feas_tol: float = 1e-8
    max_iter: int = 200
    step_fraction: float = 0.99
    regularization: float = 1e-10
    refinement_steps: int = 2
    # Extended-precision endgame: once the barrier parameter drops below the
    # trigger (or the double-precision step collapses), refactor the KKT
    # system in longdouble, provided the reduced system is within the cap.
    extended_dim_cap: int = 250
    extended_trigger: float = 1e-3
    # Give up once this many consecutive iterations fail to improve the
    # worst-case optimality measure by at least 20 percent.
    stall_iterations: int = 12


@dataclass
class ResidualReport:
    """Recomputed-from-scratch feasibility and optimality measures."""

    eq_residual: float
    dual_residual: float
    min_cone_margins: list  # per block: min eigenvalue / min entry / None
    gap: float
    rel_gap: float

    @property
    def worst_cone_violation(self) -> float:
        margins = [m for m in self.min_cone_margins if m is not None]
        return max(0.0, -min(margins)) if margins else 0.0


def verify(prog: ConicProgram, sol: ConicSolution) -> ResidualReport:
    """Recompute residuals independently of solver internals."""
    x, y, s = sol.primal, sol.dual, sol.slack
    eq = float(np.linalg.norm(prog.A @ x - prog.b))
    dres = float(np.linalg.norm(prog.A.T @ y + s - prog.c))
    margins = []
    for blk, sl in prog.block_slices():
        if blk.kind is BlockKind.PSD:
            M = smat(x[sl], blk.size)
            margins.append(float(np.linalg.eigvalsh(M)[0]))
        elif blk.kind is BlockKind.NONNEG:
            margins.append(float(np.min(x[sl])) if blk.size else None)
        else:
            margins.append(None)
    pobj = float(prog.c @ x)
    dobj = float(prog.b @ y)
    gap = pobj - dobj
    rel = abs(gap) / (1.0 + abs(pobj) + abs(dobj))
    return ResidualReport(eq, dres, margins, gap, rel)


# ---------------------------------------------------------------------------
# Per-block cone computations for the interior-point iteration.


class _PsdOps:
    def __init__(self, p):
        self.p = p
        self.dim = svec_dim(p)
        self.degree = p

    def identity(self):
        return svec(np.eye(self.p))

    @staticmethod
    def _safe_cholesky(M):
        try:
            return np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            # Near-boundary iterate: floor the spectrum and continue.
            w, V = np.linalg.eigh(M)
            floor = max(1e-14, 1e-12 * float(np.max(np.abs(w))))
            w = np.maximum(w, floor)
            return np.linalg.cholesky((V * w) @ V.T)

    def scaling(self, x, s):
        X = smat(x, self.p)
        S = smat(s, self.p)
        Lx = self._safe_cholesky(X)
        Ls = self._safe_cholesky(S)
        U, sv, Vt = np.linalg.svd(Ls.T @ Lx)
        if np.min(sv) <= 0:
            raise np.linalg.LinAlgError("NT scaling lost positive definiteness")
        isqrt = 1.0 / np.sqrt(sv)
        R = Lx @ (Vt.T * isqrt)
        Rinv = (isqrt[:, None] * U.T) @ Ls.T
        return {"R": R, "Rinv": Rinv, "lam": sv}

    def lam_vec(self, sc):
        return svec(np.diag(sc["lam"]))

    def ginv_matrix(self, sc):
        R = sc["R"]
        return _symkron(R @ R.T)

    def apply_g(self, sc, u):
        Rinv = sc["Rinv"]
        Qt = Rinv.T @ Rinv
        return svec(Qt @ smat(u, self.p) @ Qt)

    def apply_winv(self, sc, u):
        Rinv = sc["Rinv"]
        return svec(Rinv.T @ smat(u, self.p) @ Rinv)

    def apply_winvT(self, sc, u):
        Rinv = sc["Rinv"]
        return svec(Rinv @ smat(u, self.p) @ Rinv.T)

    def apply_w(self, sc, u):
        R = sc["R"]
        return svec(R.T @ smat(u, self.p) @ R)

    def jordan_prod(self, u, v):
        U = smat(u, self.p)
        V = smat(v, self.p)
        return svec(0.5 * (U @ V + V @ U))

    def jordan_div_lam(self, sc, d):
        lam = sc["lam"]
        D = smat(d, self.p)
        Z = 2.0 * D / np.add.outer(lam, lam)
        return svec(Z)

    def lam_sq(self, sc):
        return svec(np.diag(sc["lam"] ** 2))

    def step_to_boundary(self, x, d):
        """Largest alpha with mat(x) + alpha mat(d) psd, on true iterates."""
        X = smat(x, self.p)
        D = smat(d, self.p)
        try:
            w = sla.eigh(D, X, eigvals_only=True)
        except (np.linalg.LinAlgError, sla.LinAlgError):
            # X numerically singular: fall back to a floored inverse scaling.
            wx, V = np.linalg.eigh(X)
            wx = np.maximum(wx, max(1e-14, 1e-12 * float(np.max(np.abs(wx)))))
            T = V * (1.0 / np.sqrt(wx))
            w = np.linalg.eigvalsh(T.T @ D @ T)
        emin = float(np.min(w))
        return math.inf if emin >= 0 else 1.0 / (-emin)


class _NonnegOps:
    def __init__(self, n):
        self.n = n
        self.dim = n
        self.degree = n

    def identity(self):
        return np.ones(self.n)

    def scaling(self, x, s):
        floor_x = max(1e-300, 1e-14 * float(np.max(np.abs(x), initial=0.0)))
        floor_s = max(1e-300, 1e-14 * float(np.max(np.abs(s), initial=0.0)))
        x = np.maximum(x, floor_x)
        s = np.maximum(s, floor_s)
        w = np.sqrt(x / s)
        return {"w": w, "lam": np.sqrt(x * s)}

    def lam_vec(self, sc):
        return sc["lam"]

    def ginv_matrix(self, sc):
        return sc["w"] ** 2  # diagonal, returned as a vector

    def apply_g(self, sc, u):
        return u / sc["w"] ** 2

    def apply_winv(self, sc, u):
        return u / sc["w"]

    def apply_winvT(self, sc, u):
        return u / sc["w"]

    def apply_w(self, sc, u):
        return u * sc["w"]

    def jordan_prod(self, u, v):
        return u * v

    def jordan_div_lam(self, sc, d):
        return d / sc["lam"]

    def lam_sq(self, sc):
        return sc["lam"] ** 2

    def step_to_boundary(self, x, d):
        neg = d < 0
        if not np.any(neg):
            return math.inf
        return float(np.min(-x[neg] / d[neg]))


def _cone_ops(blocks):
    ops = []
    for blk, sl in blocks:
        if blk.kind is BlockKind.PSD:
            ops.append((_PsdOps(blk.size), sl))
        elif blk.kind is BlockKind.NONNEG:
            ops.append((_NonnegOps(blk.size), sl))
    return ops


def _lu_factor_xp(M):
    """Partial-pivoting LU usable at dtypes LAPACK does not cover."""
    M = M.copy()
    n = M.shape[0]
    piv = np.arange(n)
    for k in range(n - 1):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if p != k:
            M[[k, p]] = M[[p, k]]
            piv[[k, p]] = piv[[p, k]]
        if M[k, k] != 0.0:
            M[k + 1 :, k] /= M[k, k]
            M[k + 1 :, k + 1 :] -= np.outer(M[k + 1 :, k], M[k, k + 1 :])
    return M, piv


def _lu_solve_xp(LU, piv, b):
    x = b[piv].astype(LU.dtype)
    n = LU.shape[0]
    for k in range(1, n):
        x[k] -= LU[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):
        if k + 1 < n:
            x[k] -= LU[k, k + 1 :] @ x[k + 1 :]
        x[k] /= LU[k, k]
    return x


class _KktSolver:
    """Schur-complement solve of the scaled Newton system.

        -G dx_c + (A' dy)_c = h_c      (cone columns)
                 (A' dy)_f  = h_f      (free columns)
        A dx                = h2

    Cone columns are eliminated through G^{-1}, leaving a quasi-definite
    system in (dy, dx_f) that is factored densely with static regularization
    and polished by iterative refinement.  When the double-precision endgame
    stalls on a small system, the factorization and solves escalate to
    extended precision.
    """

    def __init__(self, prog, cone_ops, free_slices, settings):
        self.prog = prog
        self.cone_ops = cone_ops
        self.free_slices = free_slices
        self.settings = settings
        self.m = prog.m
        A = prog.A.tocsc()
        self.A_blocks = [np.asarray(A[:, sl].todense()) for _, sl in cone_ops]
        free_cols = [np.asarray(A[:, sl].todense()) for sl in free_slices]
        self.Af = (
            np.hstack(free_cols) if free_cols else np.zeros((self.m, 0))
        )
        self.nf = self.Af.shape[1]
        self.extended = False

    def prepare(self, scalings, extended=False):
        m, nf = self.m, self.nf
        self.extended = extended
        dtype = np.longdouble if extended else np.float64
        S = np.zeros((m, m), dtype=dtype)
        self.ginv = []
        for (ops, sl), Ab, sc in zip(self.cone_ops, self.A_blocks, scalings):
            K = ops.ginv_matrix(sc)
            if extended:
                K = K.astype(np.longdouble)
                Ab = Ab.astype(np.longdouble)
            if K.ndim == 1:
                AK = Ab * K[None, :]
            else:
                AK = Ab @ K
            S += AK @ Ab.T
            self.ginv.append(K)
        delta = self.settings.regularization
        M = np.zeros((m + nf, m + nf), dtype=dtype)
        M[:m, :m] = S + delta * np.eye(m)
        if nf:
            M[:m, m:] = self.Af
            M[m:, :m] = self.Af.T
            M[m:, m:] = -delta * np.eye(nf)
        self.S = S
        self.scalings = scalings
        if extended:
            self.lu = _lu_factor_xp(M)
        else:
            self.lu = sla.lu_factor(M)

    def _lu_solve(self, rhs):
        if self.extended:
            return _lu_solve_xp(self.lu[0], self.lu[1], rhs)
        return sla.lu_solve(self.lu, np.asarray(rhs, dtype=np.float64))

    def _solve_once(self, h_cone, h_free, h2):
        m, nf = self.m, self.nf
        dtype = np.longdouble if self.extended else np.float64
        rhs = np.empty(m + nf, dtype=dtype)
        rhs[:m] = h2
        for (ops, sl), Ab, K, sc in zip(
            self.cone_ops, self.A_blocks, self.ginv, self.scalings
        ):
            hc = np.asarray(h_cone[sl], dtype=dtype)
            gi = hc * K if K.ndim == 1 else K @ hc
            rhs[:m] += Ab @ gi
        if nf:
            rhs[m:] = h_free
        sol = self._lu_solve(rhs)
        resid = rhs - self._apply_reduced(sol)
        cand = sol + self._lu_solve(resid)
        if np.linalg.norm(
            np.asarray(rhs - self._apply_reduced(cand), dtype=np.float64)
        ) < np.linalg.norm(np.asarray(resid, dtype=np.float64)):
            sol = cand
        dy = sol[:m]
        dx = np.zeros(self.prog.n, dtype=dtype)
        for (ops, sl), Ab, K, sc in zip(
            self.cone_ops, self.A_blocks, self.ginv, self.scalings
        ):
            v = Ab.T @ dy - h_cone[sl]
            dx[sl] = v * K if K.ndim == 1 else K @ v
        if nf:
            start = m
            for sl in self.free_slices:
                width = sl.stop - sl.start
                dx[sl] = sol[start : start + width]
                start += width
        return dx, dy

    def _apply_reduced(self, v):
        m, nf = self.m, self.nf
        out = np.empty(m + nf, dtype=v.dtype)
        out[:m] = self.S @ v[:m]
        if nf:
            out[:m] += self.Af @ v[m:]
            out[m:] = self.Af.T @ v[:m]
        return out

    def _matvec_A(self, v):
        if self.extended:
            if not hasattr(self, "_A_dense"):
                self._A_dense = self.prog.A.toarray()
            return self._A_dense @ v
        return self.prog.A @ v

    def _rmatvec_A(self, v):
        if self.extended:
            if not hasattr(self, "_A_dense"):
                self._A_dense = self.prog.A.toarray()
            return self._A_dense.T @ v
        return self.prog.A.T @ v

    def _full_residual(self, dx, dy, h_cone, h_free, h2):
        """Residual of the unreduced scaled Newton system.

        Applying G block-wise is numerically exact, so refining at this level
        corrects rounding committed while forming the Schur complement.
        """
        r_cone = np.zeros(self.prog.n, dtype=dx.dtype)
        AT_dy = self._rmatvec_A(dy)
        for (ops, sl), sc in zip(self.cone_ops, self.scalings):
            r_cone[sl] = h_cone[sl] + ops.apply_g(sc, dx[sl]) - AT_dy[sl]
        r_free = np.zeros(h_free.shape[0], dtype=dx.dtype)
        start = 0
        for sl in self.free_slices:
            width = sl.stop - sl.start
            r_free[start : start + width] = h_free[start : start + width] - AT_dy[sl]
            start += width
        r2 = h2 - self._matvec_A(dx)
        return r_cone, r_free, r2

    @staticmethod
    def _res_norm(parts):
        return math.sqrt(
            sum(float(np.asarray(p, dtype=np.float64) @ np.asarray(p, dtype=np.float64)) for p in parts)
        )

    def solve(self, h_cone, h_free, h2):
        """Return (dx, dy) with guarded iterative refinement on the full
        system; corrections are kept only while they shrink the residual."""
        dx, dy = self._solve_once(h_cone, h_free, h2)
        res = self._full_residual(dx, dy, h_cone, h_free, h2)
        best_norm = self._res_norm(res)
        for _ in range(self.settings.refinement_steps):
            if best_norm == 0.0:
                break
            cx, cy = self._solve_once(*res)
            cand_x = dx + cx
            cand_y = dy + cy
            cand_res = self._full_residual(cand_x, cand_y, h_cone, h_free, h2)
            cand_norm = self._res_norm(cand_res)
            if cand_norm >= best_norm:
                break
            dx, dy, res, best_norm = cand_x, cand_y, cand_res, cand_norm
        return np.asarray(dx, dtype=np.float64), np.asarray(dy, dtype=np.float64)


def _equilibrate(prog: ConicProgram, rounds=8):
    """Ruiz equilibration with block-uniform column scaling on cone blocks.

    Scaling every svec coordinate of a PSD block by one common factor is a
    similarity-free rescaling of the matrix variable, so cone membership is
    preserved in both the primal and the dual after unscaling.
    """
    A = prog.A.tocoo()
    m, n = A.shape
    d_row = np.ones(m)
    d_col = np.ones(n)
    col_groups = []
    for blk, sl in prog.block_slices():
        if blk.kind is BlockKind.FREE or blk.kind is BlockKind.NONNEG:
            col_groups.extend([slice(j, j + 1) for j in range(sl.start, sl.stop)])
        else:
            col_groups.append(sl)
    data, rows, cols = A.data.copy(), A.row, A.col
    for _ in range(rounds):
        vals = np.abs(data) * d_row[rows] * d_col[cols]
        row_max = np.zeros(m)
        np.maximum.at(row_max, rows, vals)
        row_max[row_max == 0] = 1.0
        d_row /= np.sqrt(row_max)
        vals = np.abs(data) * d_row[rows] * d_col[cols]
        col_max = np.zeros(n)
        np.maximum.at(col_max, cols, vals)
        for sl in col_groups:
            g = float(np.max(col_max[sl], initial=0.0))
            if g > 0:
                d_col[sl] /= math.sqrt(g)
    A_s = sp.csr_matrix(
        (data * d_row[rows] * d_col[cols], (rows, cols)), shape=A.shape
    )
    return A_s, d_row, d_col


def solve(prog: ConicProgram, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve a conic program via the homogeneous self-dual embedding.

    The problem data is equilibrated internally; all reported quantities are
    mapped back to and measured in the original data.
    """
    settings = settings or SolverSettings()
    prog.validate()
    A_s, d_row, d_col = _equilibrate(prog)
    scaled = ConicProgram.__new__(ConicProgram)
    scaled.c = prog.c * d_col
    scaled.A = A_s
    scaled.b = prog.b * d_row
    scaled.blocks = prog.blocks
    scaled.row_labels = prog.row_labels
    sol = _solve_hsde(scaled, settings, prog, d_row, d_col)
    if sol.status in (ConicStatus.NUMERICAL_FAILURE, ConicStatus.ITERATION_LIMIT):
        sol = _polish(prog, sol, settings)
    return sol


def _cone_margins_ok(prog, v, tol):
    for blk, sl in prog.block_slices():
        if blk.kind is BlockKind.PSD:
            block = smat(v[sl], blk.size)
            emin = float(np.linalg.eigvalsh(block)[0])
            if emin < -tol * (1.0 + float(np.linalg.norm(block))):
                return False
        elif blk.kind is BlockKind.NONNEG and blk.size:
            lo = float(np.min(v[sl]))
            if lo < -tol * (1.0 + float(np.max(np.abs(v[sl])))):
                return False
    return True


def _polish(prog, sol, settings):
    """Final feasibility restoration for stalled iterates.

    The iterate is often a tiny distance from the equality manifold when the
    degenerate endgame stops making progress.  Project the primal onto
    A x = b and rebuild the slack from the dual equation; keep each side
    only if it verifiably improves feasibility without leaving the cone
    beyond the feasibility tolerance.
    """
    x, y, s = sol.primal, sol.dual, sol.slack
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        return sol
    A_dense = prog.A.toarray()
    r = prog.b - A_dense @ x
    corr, *_ = np.linalg.lstsq(A_dense, r, rcond=None)
    x_new = x + corr
    if np.linalg.norm(prog.A @ x_new - prog.b) < np.linalg.norm(r) and \
            _cone_margins_ok(prog, x_new, settings.feas_tol):
        x = x_new
    s_new = prog.c - prog.A.T @ y
    free_ok = True
    for blk, sl in prog.block_slices():
        if blk.kind is BlockKind.FREE and blk.size:
            if float(np.max(np.abs(s_new[sl]))) > settings.feas_tol * (
                1.0 + float(np.linalg.norm(prog.c))
            ):
                free_ok = False
    if free_ok and _cone_margins_ok(prog, s_new, settings.feas_tol):
        for blk, sl in prog.block_slices():
            if blk.kind is BlockKind.FREE:
                s_new[sl] = 0.0
        s = s_new
    pobj = float(prog.c @ x)
    dobj = float(prog.b @ y)
    pres = float(np.linalg.norm(prog.A @ x - prog.b)) / (
        1.0 + np.linalg.norm(prog.b)
    )
    dres = float(np.linalg.norm(prog.A.T @ y + s - prog.c)) / (
        1.0 + np.linalg.norm(prog.c)
    )
    relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
    if max(pres, dres, relgap) <= max(
        sol.residuals[0], sol.residuals[1], sol.residuals[2]
    ):
        sol = ConicSolution(
            sol.status, x, y, s, pobj, dobj, pobj - dobj,
            (pres, dres, relgap), sol.iterations,
        )
        if (
            pres <= settings.feas_tol
            and dres <= settings.feas_tol
            and relgap <= settings.gap_tol
        ):
            sol.status = ConicStatus.OPTIMAL
    return sol


def _solve_hsde(prog, settings, orig, d_row, d_col) -> ConicSolution:
    """HSDE iteration on equilibrated data, termination on original data."""
    n, m = prog.n, prog.m
    c, b, A = prog.c, prog.b, prog.A

    slices = prog.block_slices()
    cone_ops = _cone_ops(slices)
    free_slices = [sl for blk, sl in slices if blk.kind is BlockKind.FREE]
    cone_slices = [sl for ops, sl in cone_ops]
    nu = sum(ops.degree for ops, _ in cone_ops)

    x = np.zeros(n)
    s = np.zeros(n)
    for ops, sl in cone_ops:
        e = ops.identity()
        x[sl] = e
        s[sl] = e
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0

    norm_b = 1.0 + np.linalg.norm(orig.b)
    norm_c = 1.0 + np.linalg.norm(orig.c)

    kkt = _KktSolver(prog, cone_ops, free_slices, settings)

    def cone_dot(u, v):
        return sum(float(u[sl] @ v[sl]) for sl in cone_slices)

    best = None
    best_merit = math.inf
    use_extended = False
    stall_mark = math.inf
    stall_count = 0

    for iteration in range(settings.max_iter):
        rp = A @ x - b * tau
        rdvec = A.T @ y + s - c * tau
        rg = float(c @ x - b @ y + kappa)
        mu = (cone_dot(x, s) + tau * kappa) / (nu + 1)

        xh = (x / tau) * d_col
        yh = (y / tau) * d_row
        sh = (s / tau) / d_col
        pres = float(np.linalg.norm(orig.A @ xh - orig.b)) / norm_b
        dres = float(np.linalg.norm(orig.A.T @ yh + sh - orig.c)) / norm_c
        pobj = float(orig.c @ xh)
        dobj = float(orig.b @ yh)
        relgap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
        merit = max(pres, dres, relgap)
        if merit < best_merit:
            best_merit = merit
            best = ConicSolution(
                ConicStatus.ITERATION_LIMIT,
                xh,
                yh,
                sh,
                pobj,
                dobj,
                pobj - dobj,
                (pres, dres, relgap),
                iteration,
            )
        if merit < 0.8 * stall_mark:
            stall_mark = merit
            stall_count = 0
        else:
            stall_count += 1
            if stall_count >= settings.stall_iterations:
                best.status = ConicStatus.NUMERICAL_FAILURE
                return best

        if (
            pres <= settings.feas_tol
            and dres <= settings.feas_tol
            and relgap <= settings.gap_tol
        ):
            best = ConicSolution(
                ConicStatus.OPTIMAL,
                xh,
                yh,
                sh,
                pobj,
                dobj,
                pobj - dobj,
                (pres, dres, relgap),
                iteration,
            )
            return best

        y_orig = y * d_row
        s_orig = s / d_col
        by = float(orig.b @ y_orig)
        if by > 0:
            infres = float(np.linalg.norm(orig.A.T @ y_orig + s_orig)) / by
            if infres <= settings.feas_tol * norm_c:
                return ConicSolution(
                    ConicStatus.PRIMAL_INFEASIBLE,
                    np.full(n, np.nan),
                    y_orig / by,
                    s_orig / by,
                    math.nan,
                    1.0,
                    math.nan,
                    (pres, dres, relgap),
                    iteration,
                )
        x_orig = x * d_col
        cx = float(orig.c @ x_orig)
        if cx < 0:
            infres = float(np.linalg.norm(orig.A @ x_orig)) / (-cx)
            if infres <= settings.feas_tol * norm_b:
                return ConicSolution(
                    ConicStatus.DUAL_INFEASIBLE,
                    x_orig / (-cx),
                    np.full(m, np.nan),
                    np.full(n, np.nan),
                    -1.0,
                    math.nan,
                    math.nan,
                    (pres, dres, relgap),
                    iteration,
                )

        try:
            scalings = [ops.scaling(x[sl], s[sl]) for ops, sl in cone_ops]
        except np.linalg.LinAlgError:
            best.status = ConicStatus.NUMERICAL_FAILURE
            return best

        lam_sq = np.zeros(n)
        for (ops, sl), sc in zip(cone_ops, scalings):
            lam_sq[sl] = ops.lam_sq(sc)

        h_cone1 = np.zeros(n)
        h_free1 = np.zeros(sum(sl.stop - sl.start for sl in free_slices))
        for sl in cone_slices:
            h_cone1[sl] = c[sl]
        start = 0
        for sl in free_slices:
            width = sl.stop - sl.start
            h_free1[start : start + width] = c[sl]
            start += width

        def direction(x1, y1, denom, d_cone, d5):
            w1 = np.zeros(n)
            for (ops, sl), sc in zip(cone_ops, scalings):
                z = ops.jordan_div_lam(sc, d_cone[sl])
                w1[sl] = ops.apply_winv(sc, z)
            h_cone = np.zeros(n)
            for sl in cone_slices:
                h_cone[sl] = -rdvec[sl] - w1[sl]
            h_free = np.zeros(h_free1.shape[0])
            start = 0
            for sl in free_slices:
                width = sl.stop - sl.start
                h_free[start : start + width] = -rdvec[sl]
                start += width
            x2, y2 = kkt.solve(h_cone, h_free, -rp)
            dtau = (-rg - float(c @ x2) + float(b @ y2) - d5 / tau) / denom
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            # Recover ds from the dual-feasibility equation itself so that
            # equation holds to machine precision even when the scaled
            # Schur solve is ill-conditioned near the cone boundary.
            ds = np.zeros(n)
            ATdy = A.T @ dy
            for sl in cone_slices:
                ds[sl] = -rdvec[sl] - ATdy[sl] + c[sl] * dtau
            dkappa = (d5 - kappa * dtau) / tau
            return dx, dy, ds, dtau, dkappa

        def max_step(dx, ds, dtau, dkappa):
            alpha = 1.0
            for ops, sl in cone_ops:
                alpha = min(alpha, ops.step_to_boundary(x[sl], dx[sl]))
                alpha = min(alpha, ops.step_to_boundary(s[sl], ds[sl]))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        def compute_step():
            # Base solve shared by both directions of this iteration.
            x1, y1 = kkt.solve(h_cone1, h_free1, b)
            # Analytically c'x1 - b'y1 = -x1' G x1 <= 0; the quadratic form
            # keeps the sign when cancellation would destroy the
            # inner-product version.
            quad = 0.0
            for (ops, sl), sc in zip(cone_ops, scalings):
                quad += float(x1[sl] @ ops.apply_g(sc, x1[sl]))
            denom = -quad - kappa / tau

            dxa, dya, dsa, dta, dka = direction(
                x1, y1, denom, -lam_sq, -tau * kappa
            )
            alpha_aff = max_step(dxa, dsa, dta, dka)
            mu_aff = (
                cone_dot(x + alpha_aff * dxa, s + alpha_aff * dsa)
                + (tau + alpha_aff * dta) * (kappa + alpha_aff * dka)
            ) / (nu + 1)
            sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3

            d_cone = sigma * mu * _cone_identity(cone_ops, n) - lam_sq
            for (ops, sl), sc in zip(cone_ops, scalings):
                dxs = ops.apply_winvT(sc, dxa[sl])
                dss = ops.apply_w(sc, dsa[sl])
                d_cone[sl] -= ops.jordan_prod(dxs, dss)
            d5 = sigma * mu - tau * kappa - dta * dka
            dx, dy, ds, dtau, dkappa = direction(x1, y1, denom, d_cone, d5)
            alpha = min(1.0, settings.step_fraction * max_step(dx, ds, dtau, dkappa))
            return dx, dy, ds, dtau, dkappa, alpha

        small_system = m + kkt.nf <= settings.extended_dim_cap
        if not use_extended and small_system and mu < settings.extended_trigger:
            use_extended = True
        try:
            kkt.prepare(scalings, extended=use_extended)
            dx, dy, ds, dtau, dkappa, alpha = compute_step()
            if (
                not use_extended
                and small_system
                and (alpha < 1e-3 or not np.isfinite(alpha))
            ):
                use_extended = True
                kkt.prepare(scalings, extended=True)
                dx, dy, ds, dtau, dkappa, alpha = compute_step()
        except (np.linalg.LinAlgError, ValueError):
            best.status = ConicStatus.NUMERICAL_FAILURE
            return best

        if not np.isfinite(alpha) or alpha <= 1e-14:
            best.status = ConicStatus.NUMERICAL_FAILURE
            return best

        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        if tau <= 0 or kappa < 0 or not np.isfinite(tau):
            best.status = ConicStatus.NUMERICAL_FAILURE
            return best

    best.status = ConicStatus.ITERATION_LIMIT
    return best


def _cone_identity(cone_ops, n):
    e = np.zeros(n)
    for ops, sl in cone_ops:
        e[sl] = ops.identity()
    return e
