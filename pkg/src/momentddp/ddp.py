"""The Moment DDP orchestrator.

An initial backward recursion seeds every stage with one cut, then the loop
alternates a forward simulation (propagating state moments through the
single-stage relaxations, yielding the upper bound) with a backward recursion
(appending one new cut per stage, yielding the lower bound) until the bound
gap falls below the tolerance.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from momentddp import conic, relax
from momentddp.conic import ConicStatus, SolverSettings
from momentddp.poly import Polynomial
from momentddp.relax import (
    EpigraphSet,
    MomentVector,
    MultistageProblem,
    UniformSpec,
    backward_value,
    build_backward_sos,
    build_forward_sdp,
    moments_of_distribution,
    terminal_epigraph,
)


class DdpStageError(RuntimeError):
    """A stage subproblem failed to solve even after the tolerance retry."""

    def __init__(self, kind, stage, iteration, solution):
        self.kind = kind
        self.stage = stage
        self.iteration = iteration
        self.solution = solution
        super().__init__(
            f"{kind} subproblem at stage {stage} (iteration {iteration}) "
            f"ended with status {solution.status.value}, "
            f"residuals {solution.residuals}"
        )


@dataclass
class CutRecord:
    """One backward solve: the installed cut plus its certificate context."""

    stage: int
    iteration: int
    cut: Polynomial
    bridge: Polynomial
    theta: float
    status: ConicStatus


@dataclass
class IterationRecord:
    iteration: int
    forward_values: list      # rho_{t,z} per stage
    upper_bound: float        # rho_UB,z
    backward_values: list     # theta_{t,z} per stage
    lower_bound: float        # theta_LB,z = theta_{0,z}
    state_moments: list       # q_{t,z} as x-space MomentVectors, t = 0..T
    occupation_moments: list  # m_{t,z} per stage
    epi_moments: list         # q over (x, y) per stage transition
    solver_statuses: list

    def recompute_upper_bound(self, problem) -> float:
        total = 0.0
        for stage, mhat in zip(problem.stages, self.occupation_moments):
            total += mhat.integrate(stage.l)
        total += self.state_moments[-1].integrate(problem.H)
        return total


@dataclass
class ValueFunctionStack:
    """Per-stage epigraph sets and the accumulated cut lists.

    Epigraph sets exist for stages 1..T (stage T holds the terminal cost as
    its sole cut); cut lists exist for stages 0..T-1.  Appending is the only
    mutation.
    """

    problem: MultistageProblem
    epigraphs: dict = field(default_factory=dict)   # t -> EpigraphSet, 1..T
    cuts: dict = field(default_factory=dict)        # t -> [CutRecord], 0..T-1

    @classmethod
    def fresh(cls, problem) -> "ValueFunctionStack":
        stack = cls(problem)
        stack.epigraphs[problem.T] = terminal_epigraph(problem)
        for t in range(problem.T):
            stack.cuts[t] = []
        return stack

    def epigraph(self, t) -> EpigraphSet:
        return self.epigraphs[t]

    def install_cut(self, t, record: CutRecord):
        self.cuts[t].append(record)
        if t == 0:
            return
        if t not in self.epigraphs:
            self.epigraphs[t] = EpigraphSet(
                self.problem.stages[t].X,
                self.problem.ybar(t),
                [record.cut],
            )
        else:
            self.epigraphs[t].add_cut(record.cut)

    def cut_polynomials(self, t):
        return [rec.cut for rec in self.cuts[t]]

    def cut_max(self, t, x) -> float:
        return max(rec.cut.eval(x) for rec in self.cuts[t])


@dataclass
class DdpOptions:
    epsilon: float = 1e-4
    max_iterations: int = 200
    affine_restriction: bool = False
    # Stage solves stop at 1e-6; healthy instances overshoot well past the
    # threshold on their final step, while degenerate ones stall just above
    # it and are accepted by the 10x-looser retry.
    solver: SolverSettings = field(
        default_factory=lambda: SolverSettings(gap_tol=1e-6, feas_tol=1e-6)
    )
    retry_factor: float = 10.0


@dataclass
class DdpResult:
    stack: ValueFunctionStack
    history: list  # IterationRecord
    converged: bool

    @property
    def lower_bound(self):
        return self.history[-1].lower_bound if self.history else None

    @property
    def upper_bound(self):
        return self.history[-1].upper_bound if self.history else None


def solve_with_retry(prog, options: DdpOptions, kind, stage, iteration):
    """Solve a stage program; on a non-optimal status retry once with the
    solver tolerances loosened by the retry factor, then raise."""
    sol = conic.solve(prog, options.solver)
    if sol.optimal:
        return sol
    loose = copy.copy(options.solver)
    loose.gap_tol *= options.retry_factor
    loose.feas_tol *= options.retry_factor
    sol = conic.solve(prog, loose)
    if sol.optimal:
        return sol
    raise DdpStageError(kind, stage, iteration, sol)


def _cut_degree_cap(options) -> int | None:
    return 1 if options.affine_restriction else None


def default_initial_moments(problem: MultistageProblem, order: int):
    """Uniform moments over each stage's state box, the suggested default
    when nothing is known about the optimal trajectory."""
    out = {}
    for t in range(problem.T):
        X = problem.state_set(t)
        if X.bounds is None:
            raise ValueError(f"state set at stage {t} has no box bounds")
        out[t] = moments_of_distribution(
            UniformSpec(tuple(X.bounds)), order
        )
    return out


def initial_backward(problem, order, q_init=None, options=None) -> ValueFunctionStack:
    """Initial backward recursion: one cut per stage against fresh epigraphs."""
    options = options or DdpOptions()
    q_init = q_init or default_initial_moments(problem, order)
    stack = ValueFunctionStack.fresh(problem)
    cap = _cut_degree_cap(options)
    for t in range(problem.T - 1, -1, -1):
        stage = problem.stages[t]
        prog, bmap = build_backward_sos(
            stage, q_init[t], stack.epigraph(t + 1), order, cut_degree=cap
        )
        sol = solve_with_retry(prog, options, "backward", t, 0)
        stack.install_cut(
            t,
            CutRecord(
                t, 0, bmap.extract_cut(sol), bmap.extract_bridge(sol),
                backward_value(sol), sol.status,
            ),
        )
    return stack


def forward_simulation(problem, stack, q0, order, options=None, iteration=0):
    """One forward pass; returns per-stage moments and the upper bound."""
    options = options or DdpOptions()
    cap = _cut_degree_cap(options)
    q_states = [q0]
    occupations = []
    epi_moments = []
    values = []
    statuses = []
    q_in = q0
    for t, stage in enumerate(problem.stages):
        prog, fmap = build_forward_sdp(
            stage, q_in, stack.epigraph(t + 1), order, cut_degree=cap
        )
        sol = solve_with_retry(prog, options, "forward", t, iteration)
        statuses.append(sol.status)
        m = fmap.extract_m(sol)
        q = fmap.extract_q(sol)
        occupations.append(m)
        epi_moments.append(q)
        values.append(sol.obj_primal)
        q_in = q.restrict(list(range(stage.n_x)))
        q_states.append(q_in)
    upper = sum(m.integrate(st.l) for m, st in zip(occupations, problem.stages))
    upper += q_states[-1].integrate(problem.H)
    return {
        "state_moments": q_states,
        "occupation_moments": occupations,
        "epi_moments": epi_moments,
        "stage_values": values,
        "upper_bound": upper,
        "statuses": statuses,
    }


def backward_recursion(problem, stack, state_moments, order, options=None,
                       iteration=0):
    """One backward sweep: appends a cut per stage, returns the stage values.

    Stage t is solved against the epigraph set that already contains the cut
    this sweep just produced for stage t + 1.
    """
    options = options or DdpOptions()
    cap = _cut_degree_cap(options)
    thetas = [0.0] * problem.T
    statuses = [None] * problem.T
    for t in range(problem.T - 1, -1, -1):
        stage = problem.stages[t]
        prog, bmap = build_backward_sos(
            stage, state_moments[t], stack.epigraph(t + 1), order,
            cut_degree=cap,
        )
        sol = solve_with_retry(prog, options, "backward", t, iteration)
        statuses[t] = sol.status
        theta = backward_value(sol)
        thetas[t] = theta
        stack.install_cut(
            t,
            CutRecord(
                t, iteration, bmap.extract_cut(sol),
                bmap.extract_bridge(sol), theta, sol.status,
            ),
        )
    return thetas, statuses


def run(problem: MultistageProblem, order: int, options: DdpOptions | None = None,
        q_init=None) -> DdpResult:
    """Full Moment DDP: initial backward recursion, then alternate forward
    simulation and backward recursion until the bound gap is below epsilon
    or the iteration budget runs out."""
    options = options or DdpOptions()
    stack = initial_backward(problem, order, q_init=q_init, options=options)
    q0 = moments_of_distribution(problem.nu0, order)
    history = []
    converged = False
    for z in range(1, options.max_iterations + 1):
        fwd = forward_simulation(
            problem, stack, q0, order, options=options, iteration=z
        )
        thetas, bstat = backward_recursion(
            problem, stack, fwd["state_moments"], order,
            options=options, iteration=z,
        )
        record = IterationRecord(
            iteration=z,
            forward_values=fwd["stage_values"],
            upper_bound=fwd["upper_bound"],
            backward_values=thetas,
            lower_bound=thetas[0],
            state_moments=fwd["state_moments"],
            occupation_moments=fwd["occupation_moments"],
            epi_moments=fwd["epi_moments"],
            solver_statuses=fwd["statuses"] + bstat,
        )
        history.append(record)
        if record.upper_bound - record.lower_bound < options.epsilon:
            converged = True
            break
    return DdpResult(stack, history, converged)


def dual_pair_check(stage, q, epi, order, options=None):
    """Build the forward SDP and backward SOS from identical data and report
    the value gap; the finite pair has no duality gap when both solve."""
    options = options or DdpOptions()
    cap = _cut_degree_cap(options)
    fprog, _ = build_forward_sdp(stage, q, epi, order, cut_degree=cap)
    bprog, _ = build_backward_sos(stage, q, epi, order, cut_degree=cap)
    fsol = conic.solve(fprog, options.solver)
    bsol = conic.solve(bprog, options.solver)
    report = {
        "forward_status": fsol.status,
        "backward_status": bsol.status,
        "rho": fsol.obj_primal if fsol.optimal else None,
        "theta": backward_value(bsol) if bsol.optimal else None,
        "gap": None,
    }
    if fsol.optimal and bsol.optimal:
        report["gap"] = abs(fsol.obj_primal - backward_value(bsol))
    return report


def cut_invalidation_scalar(record: IterationRecord, stack, t=1) -> float:
    """L_q(y) - <V_new, q> for the forward epigraph moments at stage t and
    the cut appended right after them; negative exactly when the moments
    violate the new cut's localizing constraint."""
    q = record.epi_moments[t - 1]
    n_x = stack.problem.stages[0].n_x
    y_mono = (0,) * n_x + (1,)
    ly = q.entry(y_mono)
    new_cut = next(
        rec.cut for rec in stack.cuts[t] if rec.iteration == record.iteration
    )
    qx = q.restrict(list(range(n_x)))
    return ly - qx.integrate(new_cut)
