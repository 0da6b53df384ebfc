"""Forward moment relaxations and backward SOS programs for one stage.

The forward builder produces a semidefinite program over truncated moments of
the stage's state-action occupation measure and the next state distribution;
the backward builder produces the sum-of-squares program whose solution is a
polynomial lower bound (cut) on the stage's cost-to-go.  Built from the same
data the two programs are exact conic duals of each other.

Time is a stage index in this data model, not a numeric state.  The stage-t
value polynomial therefore appears as two coefficient blocks in the backward
program: the cut itself, evaluated at the current stage, and a bridge
polynomial evaluated after the transition, which the epigraph constraint ties
to the next stage's cuts.  Dually, the forward program carries two families
of moment-consistency rows: the occupation measure's state marginal matches
the incoming distribution, and the next distribution matches the pushforward
through the dynamics.  Summing a matched pair of rows recovers the single
combined row L(x^a - f(x,u)^a) + q_next^a = q_in^a.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from momentddp import conic
from momentddp.conic import Block, ConicProgram, free, nonneg, psd
from momentddp.poly import Polynomial, monomial_basis, n_monomials

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# Semialgebraic sets and stage data


class SemialgebraicSet:
    """Set {z : g_j(z) >= 0 for all j} with optional box metadata.

    `bounds` records the smallest axis-aligned box containing all box-type
    constraints; it drives rejection sampling, ybar estimation, and unit-box
    scaling.  A Putinar ball constraint can be appended explicitly.
    """

    def __init__(self, nvars, inequalities=(), bounds=None, ball_radius=None):
        self.nvars = int(nvars)
        self.inequalities = list(inequalities)
        for g in self.inequalities:
            if g.nvars != self.nvars:
                raise ValueError("inequality in wrong variable space")
        self.bounds = list(bounds) if bounds is not None else None
        self.ball_radius = ball_radius

    @classmethod
    def box(cls, bounds) -> "SemialgebraicSet":
        bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        n = len(bounds)
        gs = []
        for i, (lo, hi) in enumerate(bounds):
            if not lo < hi:
                raise ValueError(f"empty box interval for variable {i}")
            xi = Polynomial.variable(n, i)
            gs.append(xi - lo)
            gs.append(hi - xi)
        return cls(n, gs, bounds=bounds)

    def with_ball(self, radius=None) -> "SemialgebraicSet":
        """Append the Putinar ball constraint R^2 - sum z_i^2 >= 0.

        The default radius is 1.1 times the larger of the box diagonal and
        the farthest corner norm, so the ball always contains the box and is
        never active on it.
        """
        if self.bounds is None and radius is None:
            raise ValueError("need box bounds or an explicit radius")
        if radius is None:
            diag = math.sqrt(sum((hi - lo) ** 2 for lo, hi in self.bounds))
            corner = math.sqrt(
                sum(max(lo * lo, hi * hi) for lo, hi in self.bounds)
            )
            radius = 1.1 * max(diag, corner)
        ball = Polynomial.constant(self.nvars, radius**2)
        for i in range(self.nvars):
            ball = ball - Polynomial.monomial(self.nvars, tuple(
                2 if j == i else 0 for j in range(self.nvars)
            ))
        out = SemialgebraicSet(
            self.nvars, self.inequalities + [ball], self.bounds, radius
        )
        return out

    def contains(self, point, tol=0.0) -> bool:
        return all(g.eval(point) >= -tol for g in self.inequalities)

    def sample(self, n, rng, max_tries=1000):
        """Rejection-sample n feasible points from the bounding box."""
        if self.bounds is None:
            raise ValueError("set has no box bounds to sample from")
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        out = []
        for _ in range(max_tries):
            pts = rng.uniform(lo, hi, size=(max(64, n), self.nvars))
            ok = np.ones(pts.shape[0], dtype=bool)
            for g in self.inequalities:
                ok &= g.eval_many(pts) >= 0.0
            out.extend(pts[ok])
            if len(out) >= n:
                return np.array(out[:n])
        raise RuntimeError("rejection sampling failed to fill the quota")


class StageModel:
    """One stage: dynamics, cost, feasible set over (x,u), state set over x."""

    def __init__(self, n_x, n_u, dynamics, cost, feasible_set, state_set):
        self.n_x = int(n_x)
        self.n_u = int(n_u)
        self.f = list(dynamics)
        self.l = cost
        self.C = feasible_set
        self.X = state_set
        nxu = self.n_x + self.n_u
        if len(self.f) != self.n_x:
            raise ValueError("need one dynamics component per state")
        for fi in self.f:
            if fi.nvars != nxu:
                raise ValueError("dynamics must be polynomials in (x, u)")
        if self.l.nvars != nxu:
            raise ValueError("cost must be a polynomial in (x, u)")
        if self.C.nvars != nxu or self.X.nvars != self.n_x:
            raise ValueError("feasible/state set dimensions do not match")
        self._fpow = {(0,) * self.n_x: Polynomial.constant(nxu, 1.0)}

    @property
    def kappa(self) -> int:
        """Highest degree over dynamics components (at least 1)."""
        return max(1, max(fi.degree for fi in self.f))

    def f_power(self, alpha) -> Polynomial:
        """f(x,u)^alpha = prod_i f_i^alpha_i, cached."""
        alpha = tuple(alpha)
        if alpha not in self._fpow:
            i = next(j for j, a in enumerate(alpha) if a > 0)
            prev = tuple(a - (1 if j == i else 0) for j, a in enumerate(alpha))
            self._fpow[alpha] = self.f_power(prev) * self.f[i]
        return self._fpow[alpha]


@dataclass(frozen=True)
class DiracSpec:
    point: tuple

    @property
    def nvars(self):
        return len(self.point)


@dataclass(frozen=True)
class UniformSpec:
    bounds: tuple  # ((lo, hi), ...)

    @property
    def nvars(self):
        return len(self.bounds)


class MultistageProblem:
    """Finite-horizon problem: T stage models, terminal cost, terminal set."""

    def __init__(self, stages, terminal_cost, terminal_set, initial_state,
                 metadata=None):
        self.stages = list(stages)
        self.H = terminal_cost
        self.X_T = terminal_set
        self.nu0 = initial_state
        self.metadata = dict(metadata or {})
        if not self.stages:
            raise ValueError("need at least one stage")
        n_x = self.stages[0].n_x
        for st in self.stages:
            if st.n_x != n_x:
                raise ValueError("all stages must share the state dimension")
        if self.H.nvars != n_x or self.X_T.nvars != n_x:
            raise ValueError("terminal data dimension mismatch")

    @property
    def T(self) -> int:
        return len(self.stages)

    @property
    def n_x(self) -> int:
        return self.stages[0].n_x

    def state_set(self, t) -> SemialgebraicSet:
        """State set at stage t, 0 <= t <= T (stage T is the terminal set)."""
        if t == self.T:
            return self.X_T
        return self.stages[t].X

    def ybar(self, t) -> float:
        """Epigraph cap for stage t: twice the worst remaining-cost bound."""
        total = self.H.max_abs_on_box(self.X_T.bounds)
        for tau in range(t, self.T):
            st = self.stages[tau]
            total += st.l.max_abs_on_box(st.C.bounds)
        return 2.0 * max(total, 1.0e-6)


# ---------------------------------------------------------------------------
# Moment vectors


class MomentVector:
    """Truncated moment sequence indexed by graded-lex monomials.

    `space` tags the variable space: "x" for state moments, "xu" for
    state-action occupation moments, "xy" for state-epigraph moments with the
    epigraph coordinate last.
    """

    def __init__(self, space, nvars, order, values):
        self.space = space
        self.nvars = int(nvars)
        self.order = int(order)
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (n_monomials(self.nvars, self.order),):
            raise ValueError("moment vector has wrong length")

    @property
    def mass(self) -> float:
        return float(self.values[0])

    def entry(self, exponents) -> float:
        exponents = tuple(exponents)
        if sum(exponents) > self.order:
            raise ValueError("moment degree exceeds truncation order")
        basis = monomial_basis(self.nvars, self.order)
        return float(self.values[basis.index(exponents)])

    def integrate(self, p: Polynomial) -> float:
        """L_m(p): pair a polynomial's coefficients with the moments."""
        if p.nvars != self.nvars:
            raise ValueError("polynomial lives in a different space")
        if p.degree > self.order:
            raise ValueError("polynomial degree exceeds truncation order")
        total = 0.0
        basis = _index_of(self.nvars, self.order)
        for mono, coeff in p.terms.items():
            total += coeff * self.values[basis[mono]]
        return total

    def restrict(self, keep, space="x") -> "MomentVector":
        """Marginal moments over a subset of variables (others at degree 0)."""
        keep = list(keep)
        sub_basis = monomial_basis(len(keep), self.order)
        idx = _index_of(self.nvars, self.order)
        vals = np.empty(len(sub_basis))
        for j, mono in enumerate(sub_basis):
            full = [0] * self.nvars
            for var, e in zip(keep, mono):
                full[var] = e
            vals[j] = self.values[idx[tuple(full)]]
        return MomentVector(space, len(keep), self.order, vals)


@lru_cache(maxsize=None)
def _index_of(nvars, order):
    return {m: i for i, m in enumerate(monomial_basis(nvars, order))}


def moments_of_distribution(spec, order, space="x") -> MomentVector:
    """Exact moments of a Dirac or uniform-box distribution up to `order`."""
    if isinstance(spec, DiracSpec):
        point = np.asarray(spec.point, dtype=float)
        basis = monomial_basis(len(point), order)
        vals = np.array(
            [np.prod([x**e for x, e in zip(point, m) if e]) if sum(m) else 1.0
             for m in basis]
        )
        return MomentVector(space, len(point), order, vals)
    if isinstance(spec, UniformSpec):
        bounds = spec.bounds
        n = len(bounds)
        # 1-D moments: E[x^e] over U[lo, hi].
        one_d = []
        for lo, hi in bounds:
            ms = [
                (hi ** (e + 1) - lo ** (e + 1)) / ((e + 1) * (hi - lo))
                for e in range(order + 1)
            ]
            one_d.append(ms)
        basis = monomial_basis(n, order)
        vals = np.array(
            [np.prod([one_d[i][e] for i, e in enumerate(m)]) for m in basis]
        )
        return MomentVector(space, n, order, vals)
    raise TypeError(f"unsupported distribution spec {spec!r}")


def moment_matrix(m: MomentVector, k: int) -> np.ndarray:
    """Moment matrix M_k(m): entry (i, j) is the moment of mono_i * mono_j."""
    if 2 * k > m.order:
        raise ValueError("moment matrix order exceeds vector truncation")
    basis = monomial_basis(m.nvars, k)
    idx = _index_of(m.nvars, m.order)
    M = np.empty((len(basis), len(basis)))
    for i, a in enumerate(basis):
        for j in range(i + 1):
            b = basis[j]
            M[i, j] = M[j, i] = m.values[idx[_madd(a, b)]]
    return M


def localizing_matrix(m: MomentVector, g: Polynomial, k: int) -> np.ndarray:
    """Localizing matrix M_{k-dg}(g m) with dg = ceil(deg(g)/2)."""
    if g.nvars != m.nvars:
        raise ValueError("localizer lives in a different space")
    if g.degree > 2 * k:
        raise ValueError("localizer degree exceeds relaxation order")
    dg = (g.degree + 1) // 2
    basis = monomial_basis(m.nvars, k - dg)
    idx = _index_of(m.nvars, m.order)
    M = np.empty((len(basis), len(basis)))
    for i, a in enumerate(basis):
        for j in range(i + 1):
            b = basis[j]
            ab = _madd(a, b)
            v = 0.0
            for gamma, coeff in g.terms.items():
                v += coeff * m.values[idx[_madd(ab, gamma)]]
            M[i, j] = M[j, i] = v
    return M


def _madd(a, b):
    return tuple(x + y for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# Epigraph sets


class EpigraphSet:
    """Set Y_t = {(x, y) : x in X_t, y <= ybar, y >= V_i(x) for all cuts}."""

    def __init__(self, state_set: SemialgebraicSet, ybar: float, cuts):
        self.X = state_set
        self.ybar = float(ybar)
        self.cuts = list(cuts)
        if not self.cuts:
            raise ValueError("epigraph set needs at least one cut")
        for V in self.cuts:
            if V.nvars != state_set.nvars:
                raise ValueError("cut lives in a different state space")

    @property
    def n_x(self):
        return self.X.nvars

    def add_cut(self, V: Polynomial):
        if V.nvars != self.n_x:
            raise ValueError("cut lives in a different state space")
        self.cuts.append(V)

    def cut_max(self, x) -> float:
        return max(V.eval(x) for V in self.cuts)

    def cut_max_many(self, pts) -> np.ndarray:
        vals = np.stack([V.eval_many(pts) for V in self.cuts])
        return vals.max(axis=0)

    def bounds_xy(self):
        if self.X.bounds is None:
            raise ValueError("state set has no box bounds")
        return list(self.X.bounds) + [(-self.ybar, self.ybar)]

    def constraint_polys(self):
        """Constraints over (x, y), epigraph coordinate last, ball appended."""
        n = self.n_x + 1
        xmap = list(range(self.n_x))
        y = Polynomial.variable(n, self.n_x)
        polys = [g.lift(n, xmap) for g in self.X.inequalities]
        polys.append(self.ybar - y)
        for V in self.cuts:
            polys.append(y - V.lift(n, xmap))
        bounds = self.bounds_xy()
        diag = math.sqrt(sum((hi - lo) ** 2 for lo, hi in bounds))
        corner = math.sqrt(sum(max(lo * lo, hi * hi) for lo, hi in bounds))
        radius = 1.1 * max(diag, corner)
        ball = Polynomial.constant(n, radius**2)
        for i in range(n):
            ball = ball - Polynomial.monomial(
                n, tuple(2 if j == i else 0 for j in range(n))
            )
        polys.append(ball)
        return polys


def terminal_epigraph(problem: MultistageProblem) -> EpigraphSet:
    """Y_T, parameterized by the terminal cost as its sole cut."""
    return EpigraphSet(problem.X_T, problem.ybar(problem.T), [problem.H])


# ---------------------------------------------------------------------------
# Program builders


@dataclass
class ForwardMap:
    """Index bookkeeping to read moments back out of a forward solution."""

    n_x: int
    n_u: int
    order: int
    cut_degree: int
    m_slice: slice
    q_slice: slice
    block_info: list  # (label, Block, slice)
    cost: Polynomial

    def extract_m(self, sol) -> MomentVector:
        return MomentVector(
            "xu", self.n_x + self.n_u, self.order, sol.primal[self.m_slice]
        )

    def extract_q(self, sol) -> MomentVector:
        return MomentVector(
            "xy", self.n_x + 1, self.order, sol.primal[self.q_slice]
        )

    def stage_cost(self, sol) -> float:
        return self.extract_m(sol).integrate(self.cost)


def _cut_degree(stage: StageModel, order: int, cut_degree=None) -> int:
    if order % 2 or order < 2:
        raise ValueError("relaxation order 2k must be an even integer >= 2")
    d = order // stage.kappa
    if cut_degree is not None:
        d = min(d, int(cut_degree))
    if d < 1:
        raise ValueError(
            f"dynamics degree {stage.kappa} too high for order {order}"
        )
    return d


def _check_degrees(stage: StageModel, order: int):
    if stage.l.degree > order:
        raise ValueError("stage cost degree exceeds relaxation order")
    for g in stage.C.inequalities:
        if g.degree > order:
            raise ValueError("constraint degree exceeds relaxation order")


class _ProgramAssembler:
    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []
        self.b = []
        self.labels = []
        self.ncols = 0
        self.blocks = []
        self.block_info = []

    def add_free(self, label, n):
        sl = slice(self.ncols, self.ncols + n)
        self.blocks.append(free(n))
        self.block_info.append((label, self.blocks[-1], sl))
        self.ncols += n
        return sl

    def add_psd(self, label, p):
        blk = psd(p)
        sl = slice(self.ncols, self.ncols + blk.dim)
        self.blocks.append(blk)
        self.block_info.append((label, blk, sl))
        self.ncols += blk.dim
        return sl

    def new_row(self, label, rhs):
        self.labels.append(label)
        self.b.append(rhs)
        return len(self.b) - 1

    def put(self, row, col, val):
        if val != 0.0:
            self.rows.append(row)
            self.cols.append(col)
            self.vals.append(val)

    def build(self, c):
        A = sp.coo_matrix(
            (self.vals, (self.rows, self.cols)),
            shape=(len(self.b), self.ncols),
        ).tocsr()
        return ConicProgram(c, A, np.array(self.b), self.blocks, self.labels)


def _svec_positions(p):
    # (i, j, scale) for lower-triangular svec order, off-diagonals sqrt(2).
    out = []
    for j in range(p):
        for i in range(j, p):
            out.append((i, j, 1.0 if i == j else SQRT2))
    return out


def _add_definition_rows(asm, label, var_slice, var_space_index, basis, g, sl):
    """Rows tying a PSD block to the localizing map of g against a moment
    vector stored in the free segment `var_slice`.  g = 1 gives the moment
    matrix itself."""
    positions = _svec_positions(len(basis))
    for pos, (i, j, scale) in enumerate(positions):
        row = asm.new_row((label, i, j), 0.0)
        asm.put(row, sl.start + pos, 1.0)
        ab = _madd(basis[i], basis[j])
        for gamma, coeff in g.terms.items():
            col = var_slice.start + var_space_index[_madd(ab, gamma)]
            asm.put(row, col, -scale * coeff)


def build_forward_sdp(stage: StageModel, q_in: MomentVector,
                      epi_next: EpigraphSet, order: int,
                      cut_degree=None):
    """Single-stage moment relaxation.

    Decision variables are the occupation moments m over (x, u) and the next
    state-epigraph moments q over (x, y); the objective is the stage cost
    plus the expected epigraph coordinate.  Moment-consistency rows pin m's
    state marginal to `q_in` and q's state block to the pushforward of m
    through the dynamics, for all state exponents up to the cut degree; both
    mass entries are normalized to one.
    """
    n_x, n_u = stage.n_x, stage.n_u
    nxu, nxy = n_x + n_u, n_x + 1
    k = order // 2
    D = _cut_degree(stage, order, cut_degree)
    _check_degrees(stage, order)
    if q_in.nvars != n_x or q_in.order < D:
        raise ValueError("q_in must carry state moments up to the cut degree")
    if abs(q_in.mass - 1.0) > 1e-6:
        raise ValueError("q_in is not a probability moment vector")

    asm = _ProgramAssembler()
    n_m = n_monomials(nxu, order)
    n_q = n_monomials(nxy, order)
    m_sl = asm.add_free(("m",), n_m)
    q_sl = asm.add_free(("q",), n_q)

    idx_xu = _index_of(nxu, order)
    idx_xy = _index_of(nxy, order)
    x_basis_D = monomial_basis(n_x, D)

    # Mass normalizations.
    row = asm.new_row(("mass_m",), 1.0)
    asm.put(row, m_sl.start, 1.0)
    row = asm.new_row(("mass_q",), 1.0)
    asm.put(row, q_sl.start, 1.0)

    # State-marginal and pushforward consistency rows.
    for alpha in x_basis_D:
        if sum(alpha) == 0:
            continue
        row = asm.new_row(("marg", alpha), q_in.entry(alpha))
        xu_alpha = alpha + (0,) * n_u
        asm.put(row, m_sl.start + idx_xu[xu_alpha], 1.0)

        row = asm.new_row(("push", alpha), 0.0)
        xy_alpha = alpha + (0,)
        asm.put(row, q_sl.start + idx_xy[xy_alpha], 1.0)
        for mono, coeff in stage.f_power(alpha).terms.items():
            asm.put(row, m_sl.start + idx_xu[mono], -coeff)

    # Moment matrix and localizing matrices for m over C_t.
    one_xu = Polynomial.constant(nxu, 1.0)
    sl = asm.add_psd(("moment_m",), n_monomials(nxu, k))
    _add_definition_rows(
        asm, ("def_moment_m",), m_sl, idx_xu, monomial_basis(nxu, k), one_xu, sl
    )
    for j, g in enumerate(stage.C.inequalities):
        dg = (g.degree + 1) // 2
        if k - dg < 0:
            raise ValueError("constraint degree exceeds relaxation order")
        basis = monomial_basis(nxu, k - dg)
        sl = asm.add_psd(("loc_m", j), len(basis))
        _add_definition_rows(asm, ("def_loc_m", j), m_sl, idx_xu, basis, g, sl)

    # Moment matrix and localizing matrices for q over Y_{t+1}.
    one_xy = Polynomial.constant(nxy, 1.0)
    sl = asm.add_psd(("moment_q",), n_monomials(nxy, k))
    _add_definition_rows(
        asm, ("def_moment_q",), q_sl, idx_xy, monomial_basis(nxy, k), one_xy, sl
    )
    for s, v in enumerate(epi_next.constraint_polys()):
        dv = (v.degree + 1) // 2
        if k - dv < 0:
            raise ValueError("epigraph constraint degree exceeds order")
        basis = monomial_basis(nxy, k - dv)
        sl = asm.add_psd(("loc_q", s), len(basis))
        _add_definition_rows(asm, ("def_loc_q", s), q_sl, idx_xy, basis, v, sl)

    c = np.zeros(asm.ncols)
    for mono, coeff in stage.l.terms.items():
        c[m_sl.start + idx_xu[mono]] += coeff
    y_mono = (0,) * n_x + (1,)
    c[q_sl.start + idx_xy[y_mono]] += 1.0

    prog = asm.build(c)
    fmap = ForwardMap(
        n_x, n_u, order, D, m_sl, q_sl, asm.block_info, stage.l
    )
    return prog, fmap


@dataclass
class BackwardMap:
    """Index bookkeeping for the SOS program: cut, bridge, Gram blocks."""

    n_x: int
    order: int
    cut_degree: int
    u_slice: slice
    b_slice: slice
    gram_info: list  # (label, multiplier poly, basis, slice, space nvars)

    def extract_cut(self, sol) -> Polynomial:
        basis = monomial_basis(self.n_x, self.cut_degree)
        return Polynomial(
            self.n_x, dict(zip(basis, sol.primal[self.u_slice]))
        )

    def extract_bridge(self, sol) -> Polynomial:
        basis = monomial_basis(self.n_x, self.cut_degree)
        return Polynomial(
            self.n_x, dict(zip(basis, sol.primal[self.b_slice]))
        )

    def gram_polynomials(self, sol):
        """Reconstruct every sigma multiplier as (label, g, sigma, min_eig)."""
        out = []
        for label, g, basis, sl, nvars in self.gram_info:
            P = conic.smat(sol.primal[sl], len(basis))
            sigma = Polynomial.zero(nvars)
            for i, a in enumerate(basis):
                for j, b in enumerate(basis):
                    sigma = sigma + Polynomial.monomial(
                        nvars, _madd(a, b), P[i, j]
                    )
            out.append((label, g, sigma, float(np.linalg.eigvalsh(P)[0])))
        return out


def _add_gram_columns(asm, label, row_base, idx, basis, g, sl):
    """Subtract a Gram-parameterized sigma * g from the matching rows."""
    positions = _svec_positions(len(basis))
    for pos, (i, j, scale) in enumerate(positions):
        ab = _madd(basis[i], basis[j])
        for gamma, coeff in g.terms.items():
            w = _madd(ab, gamma)
            asm.put(row_base[idx[w]], sl.start + pos, -scale * coeff)


def build_backward_sos(stage: StageModel, q_obj: MomentVector,
                       epi_next: EpigraphSet, order: int,
                       cut_degree=None):
    """Single-stage SOS program generating a new value-function cut.

    Maximizes the pairing of the cut with the supplied state moments subject
    to two Putinar identities: the Bellman certificate over the stage's
    feasible set, and epigraph dominance of the bridge block over the next
    stage's cut envelope.  Coefficients are matched monomial by monomial.
    """
    n_x, n_u = stage.n_x, stage.n_u
    nxu, nxy = n_x + n_u, n_x + 1
    k = order // 2
    D = _cut_degree(stage, order, cut_degree)
    _check_degrees(stage, order)
    if q_obj.nvars != n_x or q_obj.order < D:
        raise ValueError("q_obj must carry state moments up to the cut degree")

    asm = _ProgramAssembler()
    v_basis = monomial_basis(n_x, D)
    n_v = len(v_basis)
    u_sl = asm.add_free(("cut",), n_v)
    b_sl = asm.add_free(("bridge",), n_v)

    idx_xu = _index_of(nxu, order)
    idx_xy = _index_of(nxy, order)
    basis_xu = monomial_basis(nxu, order)
    basis_xy = monomial_basis(nxy, order)

    # Rows first (monomial matching), then Gram columns fill them in.
    rows_xu = [asm.new_row(("xu", w), -stage.l.coefficient(w))
               for w in basis_xu]
    y_mono = (0,) * n_x + (1,)
    rows_xy = [asm.new_row(("xy", w), -(1.0 if w == y_mono else 0.0))
               for w in basis_xy]

    # Cut and bridge coefficient columns.
    for col, beta in enumerate(v_basis):
        xu_beta = beta + (0,) * n_u
        asm.put(rows_xu[idx_xu[xu_beta]], u_sl.start + col, -1.0)
        for mono, coeff in stage.f_power(beta).terms.items():
            asm.put(rows_xu[idx_xu[mono]], b_sl.start + col, coeff)
        xy_beta = beta + (0,)
        asm.put(rows_xy[idx_xy[xy_beta]], b_sl.start + col, -1.0)

    gram_info = []
    one_xu = Polynomial.constant(nxu, 1.0)
    basis = monomial_basis(nxu, k)
    sl = asm.add_psd(("sigma0",), len(basis))
    gram_info.append((("sigma0",), one_xu, basis, sl, nxu))
    _add_gram_columns(asm, ("sigma0",), rows_xu, idx_xu, basis, one_xu, sl)
    for j, g in enumerate(stage.C.inequalities):
        dg = (g.degree + 1) // 2
        if k - dg < 0:
            raise ValueError("constraint degree exceeds relaxation order")
        basis = monomial_basis(nxu, k - dg)
        sl = asm.add_psd(("sigma", j), len(basis))
        gram_info.append((("sigma", j), g, basis, sl, nxu))
        _add_gram_columns(asm, ("sigma", j), rows_xu, idx_xu, basis, g, sl)

    one_xy = Polynomial.constant(nxy, 1.0)
    basis = monomial_basis(nxy, k)
    sl = asm.add_psd(("eta0",), len(basis))
    gram_info.append((("eta0",), one_xy, basis, sl, nxy))
    _add_gram_columns(asm, ("eta0",), rows_xy, idx_xy, basis, one_xy, sl)
    for s, v in enumerate(epi_next.constraint_polys()):
        dv = (v.degree + 1) // 2
        if k - dv < 0:
            raise ValueError("epigraph constraint degree exceeds order")
        basis = monomial_basis(nxy, k - dv)
        sl = asm.add_psd(("eta", s), len(basis))
        gram_info.append((("eta", s), v, basis, sl, nxy))
        _add_gram_columns(asm, ("eta", s), rows_xy, idx_xy, basis, v, sl)

    c = np.zeros(asm.ncols)
    for col, beta in enumerate(v_basis):
        c[u_sl.start + col] = -q_obj.entry(beta)

    prog = asm.build(c)
    bmap = BackwardMap(n_x, order, D, u_sl, b_sl, gram_info)
    return prog, bmap


def backward_value(sol) -> float:
    """The SOS objective theta (the builder minimizes its negation)."""
    return -sol.obj_primal


def build_undecomposed_sdp(problem: MultistageProblem, order: int,
                           cut_degree=None):
    """Joint two-stage moment relaxation; its value is the rho*_k oracle.

    The chained variables are (m_0, q_1, m_1, q_2) with q vectors reduced to
    state moments; every stage-wise forward solution is feasible here, which
    is the upper-bound floor property the oracle exists to test.
    """
    if problem.T != 2:
        raise ValueError("undecomposed oracle is defined for T = 2")
    k = order // 2
    asm = _ProgramAssembler()

    n_x = problem.n_x
    q0 = moments_of_distribution(problem.nu0, order)

    free_m, free_q = [], []
    for t, stage in enumerate(problem.stages):
        _check_degrees(stage, order)
        nxu = stage.n_x + stage.n_u
        free_m.append(asm.add_free(("m", t), n_monomials(nxu, order)))
        free_q.append(asm.add_free(("q", t + 1), n_monomials(n_x, order)))

    idx_x = _index_of(n_x, order)
    for t, stage in enumerate(problem.stages):
        nxu = stage.n_x + stage.n_u
        idx_xu = _index_of(nxu, order)
        D = _cut_degree(stage, order, cut_degree)
        m_sl = free_m[t]
        q_sl = free_q[t]

        row = asm.new_row(("mass_m", t), 1.0)
        asm.put(row, m_sl.start, 1.0)
        row = asm.new_row(("mass_q", t + 1), 1.0)
        asm.put(row, q_sl.start, 1.0)

        for alpha in monomial_basis(n_x, D):
            if sum(alpha) == 0:
                continue
            xu_alpha = alpha + (0,) * stage.n_u
            if t == 0:
                row = asm.new_row(("marg", t, alpha), q0.entry(alpha))
                asm.put(row, m_sl.start + idx_xu[xu_alpha], 1.0)
            else:
                row = asm.new_row(("marg", t, alpha), 0.0)
                asm.put(row, m_sl.start + idx_xu[xu_alpha], 1.0)
                asm.put(row, free_q[t - 1].start + idx_x[alpha], -1.0)

            row = asm.new_row(("push", t, alpha), 0.0)
            asm.put(row, q_sl.start + idx_x[alpha], 1.0)
            for mono, coeff in stage.f_power(alpha).terms.items():
                asm.put(row, m_sl.start + idx_xu[mono], -coeff)

        one_xu = Polynomial.constant(nxu, 1.0)
        sl = asm.add_psd(("moment_m", t), n_monomials(nxu, k))
        _add_definition_rows(
            asm, ("def_moment_m", t), m_sl, idx_xu,
            monomial_basis(nxu, k), one_xu, sl,
        )
        for j, g in enumerate(stage.C.inequalities):
            dg = (g.degree + 1) // 2
            basis = monomial_basis(nxu, k - dg)
            sl = asm.add_psd(("loc_m", t, j), len(basis))
            _add_definition_rows(
                asm, ("def_loc_m", t, j), m_sl, idx_xu, basis, g, sl
            )

        one_x = Polynomial.constant(n_x, 1.0)
        state_set = problem.state_set(t + 1)
        sl = asm.add_psd(("moment_q", t + 1), n_monomials(n_x, k))
        _add_definition_rows(
            asm, ("def_moment_q", t + 1), q_sl, idx_x,
            monomial_basis(n_x, k), one_x, sl,
        )
        for j, g in enumerate(state_set.inequalities):
            dg = (g.degree + 1) // 2
            basis = monomial_basis(n_x, k - dg)
            sl = asm.add_psd(("loc_q", t + 1, j), len(basis))
            _add_definition_rows(
                asm, ("def_loc_q", t + 1, j), q_sl, idx_x, basis, g, sl
            )

    c = np.zeros(asm.ncols)
    for t, stage in enumerate(problem.stages):
        idx_xu = _index_of(stage.n_x + stage.n_u, order)
        for mono, coeff in stage.l.terms.items():
            c[free_m[t].start + idx_xu[mono]] += coeff
    for mono, coeff in problem.H.terms.items():
        c[free_q[1].start + idx_x[mono]] += coeff

    prog = asm.build(c)
    return prog, {"m": free_m, "q": free_q}


def affine_restriction(backward, forward):
    """Restrict a matched 2k = 4 program pair to affine value functions.

    Backward: appends rows that zero every cut and bridge coefficient of
    total degree two or more.  Forward: deletes the marginal and pushforward
    consistency rows with state exponent of total degree two or more (their
    dual variables are exactly the zeroed coefficients).  Mass rows stay.
    """
    bprog, bmap = backward
    fprog, fmap = forward

    v_basis = monomial_basis(bmap.n_x, bmap.cut_degree)
    A = bprog.A.tolil(copy=True)
    b = list(bprog.b)
    labels = list(bprog.row_labels)
    extra_rows = []
    for col, beta in enumerate(v_basis):
        if sum(beta) >= 2:
            for sl, tag in ((bmap.u_slice, "cut"), (bmap.b_slice, "bridge")):
                row = np.zeros(bprog.n)
                row[sl.start + col] = 1.0
                extra_rows.append(row)
                b.append(0.0)
                labels.append(("zero", tag, beta))
    if extra_rows:
        A = sp.vstack([A.tocsr(), sp.csr_matrix(np.array(extra_rows))])
    new_backward = ConicProgram(bprog.c, A, np.array(b), bprog.blocks, labels)

    keep = np.array(
        [
            not (lbl[0] in ("marg", "push") and sum(lbl[-1]) >= 2)
            for lbl in fprog.row_labels
        ]
    )
    A = fprog.A[keep]
    b = fprog.b[keep]
    labels = [lbl for lbl, k_ in zip(fprog.row_labels, keep) if k_]
    new_forward = ConicProgram(fprog.c, A, b, fprog.blocks, labels)
    return (new_backward, bmap), (new_forward, fmap)


# ---------------------------------------------------------------------------
# Certificate and soundness checks


def certificate_residuals(stage: StageModel, epi_next: EpigraphSet,
                          bmap: BackwardMap, sol):
    """Coefficient-wise residuals of both Putinar identities.

    Rebuilds l - U(x) + B(f(x,u)) and y - B(x) from the extracted cut and
    bridge, and the right-hand sides from the solved Gram matrices; returns
    the two max-abs coefficient differences.
    """
    U = bmap.extract_cut(sol)
    B = bmap.extract_bridge(sol)
    nxu = stage.n_x + stage.n_u
    nxy = stage.n_x + 1
    xmap = list(range(stage.n_x))

    lhs_xu = stage.l - U.lift(nxu, xmap) + B.compose(stage.f)
    y = Polynomial.variable(nxy, stage.n_x)
    lhs_xy = y - B.lift(nxy, xmap)

    rhs_xu = Polynomial.zero(nxu)
    rhs_xy = Polynomial.zero(nxy)
    for label, g, sigma, _ in bmap.gram_polynomials(sol):
        if label[0] in ("sigma0", "sigma"):
            rhs_xu = rhs_xu + sigma * g
        else:
            rhs_xy = rhs_xy + sigma * g
    return lhs_xu.max_coeff_diff(rhs_xu), lhs_xy.max_coeff_diff(rhs_xy)


def sampled_bellman_margin(stage: StageModel, cut: Polynomial,
                           bridge: Polynomial, n=1000, seed=0) -> float:
    """Min over feasible samples of l(x,u) - V(x) + V(f(x,u)).

    V is evaluated at the current stage through the cut block and after the
    transition through the bridge block, which is the stage-index reading of
    the auxiliary-time formulation.  Non-negative up to solver tolerance.
    """
    rng = np.random.default_rng(seed)
    pts = stage.C.sample(n, rng)
    xs = pts[:, : stage.n_x]
    fx = np.stack([fi.eval_many(pts) for fi in stage.f], axis=1)
    vals = (
        stage.l.eval_many(pts)
        - cut.eval_many(xs)
        + bridge.eval_many(fx)
    )
    return float(vals.min())


def sampled_dominance_margin(epi_next: EpigraphSet, bridge: Polynomial,
                             n=1000, seed=0) -> float:
    """Min over sampled states of (pointwise max of cuts) - bridge."""
    rng = np.random.default_rng(seed)
    pts = epi_next.X.sample(n, rng)
    return float((epi_next.cut_max_many(pts) - bridge.eval_many(pts)).min())


def forward_psd_margins(fmap: ForwardMap, stage: StageModel,
                        epi_next: EpigraphSet, sol) -> list:
    """Min eigenvalues of every moment and localizing matrix, recomputed
    from the extracted moment vectors (independent of the solver's blocks)."""
    m = fmap.extract_m(sol)
    q = fmap.extract_q(sol)
    k = fmap.order // 2
    out = [float(np.linalg.eigvalsh(moment_matrix(m, k))[0])]
    for g in stage.C.inequalities:
        out.append(float(np.linalg.eigvalsh(localizing_matrix(m, g, k))[0]))
    out.append(float(np.linalg.eigvalsh(moment_matrix(q, k))[0]))
    for v in epi_next.constraint_polys():
        out.append(float(np.linalg.eigvalsh(localizing_matrix(q, v, k))[0]))
    return out
