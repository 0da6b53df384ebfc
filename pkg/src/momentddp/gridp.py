"""Discretized dynamic-programming oracle and policy rollout.

Backward induction over a product grid with multilinear interpolation of the
next stage's value table; used as ground truth for validating cuts and
policies at low state dimension.  Control minimization is a dense grid
search: deterministic, derivative-free, and immune to the local-optimum
traps a smooth solver can fall into on non-convex cut envelopes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

INFEASIBLE = 1e12  # large-but-finite sentinel so arithmetic stays total
_FEAS_TOL = 1e-9


@dataclass
class GridSpec:
    state_points: tuple   # points per state dimension
    state_ranges: tuple   # (lo, hi) per state dimension
    control_points: tuple
    control_ranges: tuple
    chunk: int = 200_000  # control-mesh rows processed per slab

    def __post_init__(self):
        if any(p < 2 for p in self.state_points):
            raise ValueError("need at least two grid points per state")
        if any(p < 2 for p in self.control_points):
            raise ValueError("need at least two grid points per control")

    @classmethod
    def from_problem(cls, problem, state_points, control_points):
        n_x = problem.n_x
        n_u = problem.stages[0].n_u
        xr = tuple(problem.state_set(0).bounds)
        ur = tuple(problem.stages[0].C.bounds[n_x:])
        sp = (state_points,) * n_x if np.isscalar(state_points) else tuple(state_points)
        cp = (control_points,) * n_u if np.isscalar(control_points) else tuple(control_points)
        return cls(sp, xr, cp, ur)

    @property
    def n_controls(self) -> int:
        out = 1
        for p in self.control_points:
            out *= p
        return out

    def state_axes(self):
        return [
            np.linspace(lo, hi, p)
            for p, (lo, hi) in zip(self.state_points, self.state_ranges)
        ]

    def control_mesh(self) -> np.ndarray:
        axes = [
            np.linspace(lo, hi, p)
            for p, (lo, hi) in zip(self.control_points, self.control_ranges)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


class GridValueFunction:
    """Per-stage value tables over the state grid, multilinear interpolation."""

    def __init__(self, axes, tables):
        self.axes = [np.asarray(a) for a in axes]
        self.tables = [np.asarray(t) for t in tables]

    @property
    def n_stages(self):
        return len(self.tables) - 1

    def value(self, t, x) -> float:
        return float(self.value_many(t, np.asarray(x, dtype=float)[None, :])[0])

    def value_many(self, t, pts) -> np.ndarray:
        """Interpolated values at stage t; queries clamp to the grid box."""
        table = self.tables[t]
        pts = np.asarray(pts, dtype=float)
        if len(self.axes) == 1:
            xs = np.clip(pts[:, 0], self.axes[0][0], self.axes[0][-1])
            return np.interp(xs, self.axes[0], table)
        from scipy.interpolate import RegularGridInterpolator

        interp = RegularGridInterpolator(
            self.axes, table, method="linear", bounds_error=False,
            fill_value=None,
        )
        clamped = np.column_stack([
            np.clip(pts[:, i], a[0], a[-1]) for i, a in enumerate(self.axes)
        ])
        return np.asarray(interp(clamped))

    def table_rows(self):
        """(stage, state coordinates..., value) rows for CSV export."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        coords = np.stack([g.ravel() for g in grids], axis=1)
        for t, table in enumerate(self.tables):
            vals = table.ravel()
            for point, v in zip(coords, vals):
                yield (t, *point, v)


def _stage_feasible_costs(stage, x, controls, next_lo, next_hi, chunk):
    """Cost and next state over the control mesh, with infeasible entries
    masked; evaluated in slabs to bound memory."""
    n = controls.shape[0]
    cost = np.empty(n)
    nxt = np.empty((n, stage.n_x))
    feas = np.ones(n, dtype=bool)
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        pts = np.empty((sl.stop - sl.start, stage.n_x + stage.n_u))
        pts[:, : stage.n_x] = x
        pts[:, stage.n_x :] = controls[sl]
        ok = np.ones(sl.stop - sl.start, dtype=bool)
        for g in stage.C.inequalities:
            ok &= g.eval_many(pts) >= -_FEAS_TOL
        fx = np.stack([fi.eval_many(pts) for fi in stage.f], axis=1)
        for i in range(stage.n_x):
            ok &= (fx[:, i] >= next_lo[i] - _FEAS_TOL) & (
                fx[:, i] <= next_hi[i] + _FEAS_TOL
            )
        cost[sl] = stage.l.eval_many(pts)
        nxt[sl] = fx
        feas[sl] = ok
    return cost, nxt, feas


def solve_dp(problem, grid: GridSpec) -> GridValueFunction:
    """Backward induction on the grid.

    The terminal table is the terminal cost; interior stages minimize the
    stage cost plus the interpolated next table over the control mesh,
    excluding transitions that violate a constraint or leave the state box.
    States with no feasible control carry the infeasible sentinel, which
    certifies or refutes stage-wise viability empirically.
    """
    axes = grid.state_axes()
    shape = tuple(len(a) for a in axes)
    state_grid = np.meshgrid(*axes, indexing="ij")
    states = np.stack([g.ravel() for g in state_grid], axis=1)
    controls = grid.control_mesh()

    tables = [None] * (problem.T + 1)
    tables[problem.T] = problem.H.eval_many(states).reshape(shape)
    vf = GridValueFunction(axes, [np.zeros(shape)] * (problem.T + 1))

    for t in range(problem.T - 1, -1, -1):
        stage = problem.stages[t]
        next_bounds = problem.state_set(t + 1).bounds
        next_lo = np.array([b[0] for b in next_bounds])
        next_hi = np.array([b[1] for b in next_bounds])
        vf.tables[t + 1] = tables[t + 1]
        vals = np.empty(states.shape[0])
        for i, x in enumerate(states):
            cost, nxt, feas = _stage_feasible_costs(
                stage, x, controls, next_lo, next_hi, grid.chunk
            )
            if not feas.any():
                vals[i] = INFEASIBLE
                continue
            cont = vf.value_many(t + 1, nxt[feas])
            vals[i] = float((cost[feas] + cont).min())
        tables[t] = vals.reshape(shape)
    return GridValueFunction(axes, tables)


@dataclass
class Rollout:
    states: list
    controls: list
    stage_costs: list

    @property
    def total_cost(self) -> float:
        return float(sum(self.stage_costs))


class _CutValueSource:
    def __init__(self, stack):
        self.stack = stack

    def value_many(self, t, pts):
        if t >= self.stack.problem.T:
            return self.stack.problem.H.eval_many(pts)
        cuts = self.stack.cut_polynomials(t)
        return np.stack([V.eval_many(pts) for V in cuts]).max(axis=0)


def rollout(problem, value_source, x0, grid: GridSpec) -> Rollout:
    """Greedy single-stage rollout from x0.

    At each stage the control minimizes stage cost plus the cost-to-go of
    the next state, where the cost-to-go comes from either a grid table or
    the point-wise maximum of a cut stack; minimization is a dense search
    over the control mesh.
    """
    if isinstance(value_source, GridValueFunction):
        source = value_source
    else:
        source = _CutValueSource(value_source)
    controls_mesh = grid.control_mesh()
    x = np.asarray(x0, dtype=float)
    if not problem.state_set(0).contains(x, tol=1e-9):
        raise ValueError(f"initial state {x0} is outside the state set")
    states = [x.copy()]
    us = []
    costs = []
    for t, stage in enumerate(problem.stages):
        next_bounds = problem.state_set(t + 1).bounds
        next_lo = np.array([b[0] for b in next_bounds])
        next_hi = np.array([b[1] for b in next_bounds])
        cost, nxt, feas = _stage_feasible_costs(
            stage, x, controls_mesh, next_lo, next_hi, grid.chunk
        )
        if not feas.any():
            raise RuntimeError(f"no feasible control at stage {t} from {x}")
        idx_feas = np.nonzero(feas)[0]
        total = cost[idx_feas] + source.value_many(t + 1, nxt[idx_feas])
        best = idx_feas[int(np.argmin(total))]
        us.append(controls_mesh[best].copy())
        costs.append(float(cost[best]))
        x = nxt[best].copy()
        states.append(x)
    return Rollout(states, us, costs)
