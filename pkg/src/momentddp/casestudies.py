"""Problem constructors: reference instances and borehole storage models.

The storage models couple a borehole (charged from the cooling loop,
discharged through a heat pump whose efficiency is an affine function of the
borehole temperature) with a gas boiler and an electric chiller that serve as
unconstrained-but-priced alternatives.  Boiler and chiller power are
eliminated through the heating and cooling balances, leaving temperature
states and the storage charge/discharge pair as decision variables.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from importlib import resources

import numpy as np

from momentddp.poly import Polynomial
from momentddp.relax import (
    DiracSpec,
    MultistageProblem,
    SemialgebraicSet,
    StageModel,
    UniformSpec,
)


# ---------------------------------------------------------------------------
# Reference instances used across the test and acceptance suites.


def two_stage_scalar_problem() -> MultistageProblem:
    """Scalar two-stage instance: f = x + u, l = x^2 + u^2, H = x^2.

    Boxes [-2, 2] on state and control, Dirac initial state at x0 = 1.
    """
    n = 2  # (x, u)
    x = Polynomial.variable(n, 0)
    u = Polynomial.variable(n, 1)
    f = [x + u]
    l = x * x + u * u
    C = SemialgebraicSet.box([(-2.0, 2.0), (-2.0, 2.0)]).with_ball()
    X = SemialgebraicSet.box([(-2.0, 2.0)])
    stage = StageModel(1, 1, f, l, C, X)
    stage2 = StageModel(1, 1, f, l, C, X)
    H = Polynomial.monomial(1, (2,))
    return MultistageProblem(
        [stage, stage2],
        H,
        SemialgebraicSet.box([(-2.0, 2.0)]),
        DiracSpec((1.0,)),
        metadata={"name": "two_stage_scalar"},
    )


def zero_cost_problem(T=2) -> MultistageProblem:
    """Zero stage and terminal cost; anything feasible is optimal at 0."""
    n = 2
    x = Polynomial.variable(n, 0)
    f = [x]
    l = Polynomial.zero(n)
    C = SemialgebraicSet.box([(-1.0, 1.0), (-1.0, 1.0)]).with_ball()
    X = SemialgebraicSet.box([(-1.0, 1.0)])
    stages = [StageModel(1, 1, f, l, C, X) for _ in range(T)]
    H = Polynomial.zero(1)
    return MultistageProblem(
        stages,
        H,
        SemialgebraicSet.box([(-1.0, 1.0)]),
        UniformSpec(((-1.0, 1.0),)),
        metadata={"name": "zero_cost"},
    )


# ---------------------------------------------------------------------------
# Borehole storage case studies.


@dataclass(frozen=True)
class BoreholeParams:
    """Energy system data; defaults are the single-storage configuration."""

    electricity_price: float = 0.096   # $/kWh
    gas_price: float = 0.063           # $/kWh
    cop_intercept: float = 3.0         # a(x) = intercept + slope * x
    cop_slope: float = 0.1             # 1/degC
    hp_capacity: float = 60.0          # kW, discharge through the heat pump
    boiler_efficiency: float = 0.7
    boiler_capacity: float = 285.0     # kW
    chiller_cop: float = 5.0
    chiller_capacity: float = 150.0    # kW
    conductivities: tuple = (0.621,)   # kW/degC, one per borehole
    inertia: float = 14805.0           # kWh/degC
    charge_capacity: float = 100.0     # kW
    ambient: float = 12.0              # degC
    temp_low: float = 0.0
    temp_high: float = 12.0
    dt_hours: float = 730.0
    horizon: int = 12
    # The conduction term is implemented with the sign as printed in the
    # model; flip to -1 to pull the temperature toward ambient instead.
    conduction_sign: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least one stage")
        positives = {
            "electricity_price": self.electricity_price,
            "gas_price": self.gas_price,
            "hp_capacity": self.hp_capacity,
            "boiler_efficiency": self.boiler_efficiency,
            "boiler_capacity": self.boiler_capacity,
            "chiller_cop": self.chiller_cop,
            "chiller_capacity": self.chiller_capacity,
            "inertia": self.inertia,
            "charge_capacity": self.charge_capacity,
            "dt_hours": self.dt_hours,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.temp_low < self.temp_high:
            raise ValueError("temperature range is empty")
        if any(lam <= 0 for lam in self.conductivities):
            raise ValueError("conductivities must be positive")

    @property
    def n_boreholes(self) -> int:
        return len(self.conductivities)

    def cop_poly(self, nvars, xvar) -> Polynomial:
        return Polynomial(
            nvars,
            {
                (0,) * nvars: self.cop_intercept,
                tuple(1 if i == xvar else 0 for i in range(nvars)): self.cop_slope,
            },
        )

    def cop_range(self):
        vals = (
            self.cop_intercept + self.cop_slope * self.temp_low,
            self.cop_intercept + self.cop_slope * self.temp_high,
        )
        lo, hi = min(vals), max(vals)
        if lo <= 0:
            raise ValueError("COP must stay positive over the temperature range")
        return lo, hi


MULTI_STORAGE_OVERRIDES = dict(
    boiler_capacity=855.0,
    chiller_capacity=450.0,
    # +-10 percent around the nominal conductivity, one borehole each.
    conductivities=(0.621 * 0.9, 0.621, 0.621 * 1.1),
)


def multi_storage_params(**overrides) -> BoreholeParams:
    merged = dict(MULTI_STORAGE_OVERRIDES)
    merged.update(overrides)
    return BoreholeParams(**merged)


@dataclass(frozen=True)
class DemandProfile:
    heat: tuple   # kW per stage
    cool: tuple   # kW per stage

    def __post_init__(self):
        if len(self.heat) != len(self.cool):
            raise ValueError("heating and cooling profiles differ in length")
        if any(d < 0 for d in self.heat) or any(d < 0 for d in self.cool):
            raise ValueError("demand must be non-negative")

    def __len__(self):
        return len(self.heat)

    def scaled(self, factor) -> "DemandProfile":
        return DemandProfile(
            tuple(factor * d for d in self.heat),
            tuple(factor * d for d in self.cool),
        )


def load_demand_csv(path, horizon=None) -> DemandProfile:
    """Read `stage,d_heat_kw,d_cool_kw` rows into a demand profile."""
    heat, cool = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"stage", "d_heat_kw", "d_cool_kw"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"demand file must have columns {sorted(required)}"
            )
        for row in reader:
            try:
                heat.append(float(row["d_heat_kw"]))
                cool.append(float(row["d_cool_kw"]))
            except (TypeError, ValueError) as err:
                raise ValueError(f"bad demand row {row}") from err
    if horizon is not None and len(heat) != horizon:
        raise ValueError(
            f"demand file has {len(heat)} stages, expected {horizon}"
        )
    return DemandProfile(tuple(heat), tuple(cool))


def bundled_demand() -> DemandProfile:
    """Synthetic monthly profile starting in May: cooling dominates through
    September, heating peaks midwinter."""
    with resources.as_file(
        resources.files("momentddp").joinpath("data/demand_single.csv")
    ) as path:
        return load_demand_csv(path, horizon=12)


def bundled_cop_samples():
    with resources.as_file(
        resources.files("momentddp").joinpath("data/cop_samples.csv")
    ) as path:
        out = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append((float(row["inlet_temp_c"]), float(row["cop"])))
        return out


def fit_cop(samples):
    """Least-squares affine fit a(x) = a0 + a1 x to (temperature, COP) data.

    Returns the fitted polynomial (one variable), the coefficient pair, and
    the residual norm.
    """
    pts = np.asarray(samples, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (temperature, cop) samples")
    if np.ptp(pts[:, 0]) == 0.0:
        raise ValueError("temperature samples are all identical")
    A = np.column_stack([np.ones(pts.shape[0]), pts[:, 0]])
    coeffs, *_ = np.linalg.lstsq(A, pts[:, 1], rcond=None)
    residual = float(np.linalg.norm(A @ coeffs - pts[:, 1]))
    poly = Polynomial(1, {(0,): coeffs[0], (1,): coeffs[1]})
    return poly, (float(coeffs[0]), float(coeffs[1])), residual


def _affine_map(poly, boxes, nvars):
    """Substitute raw = lo + width * unit into a raw-space polynomial."""
    subs = []
    for i, (lo, hi) in enumerate(boxes):
        subs.append(
            Polynomial(
                nvars,
                {
                    tuple(1 if j == i else 0 for j in range(nvars)): hi - lo,
                    (0,) * nvars: lo,
                },
            )
        )
    return poly.compose(subs)


def _build_storage(params: BoreholeParams, demand: DemandProfile,
                   scaled: bool) -> MultistageProblem:
    nb = params.n_boreholes
    n_x = nb
    n_u = 2 * nb
    n = n_x + n_u
    if len(demand) != params.horizon:
        raise ValueError(
            f"demand has {len(demand)} stages, horizon is {params.horizon}"
        )

    xs = [Polynomial.variable(n, i) for i in range(nb)]
    u_ins = [Polynomial.variable(n, nb + i) for i in range(nb)]
    u_outs = [Polynomial.variable(n, 2 * nb + i) for i in range(nb)]
    cops = [params.cop_poly(n, i) for i in range(nb)]
    a_min, _ = params.cop_range()

    rate = params.dt_hours / params.inertia
    temp_box = (params.temp_low, params.temp_high)
    x_boxes = [temp_box] * nb

    stages = []
    scalings = []
    for t in range(params.horizon):
        d_heat = demand.heat[t]
        d_cool = demand.cool[t]

        # Discharge through the HP: a(x) u_out <= d_heat, so a conservative
        # control box is d_heat / min COP; charging is capped by the cooling
        # balance since the chiller cannot run backwards.
        u_out_hi = min(params.hp_capacity, d_heat / a_min) if d_heat > 0 else 0.0
        u_in_hi = min(params.charge_capacity, d_cool)
        u_in_lo = max(0.0, d_cool - params.chiller_cop * params.chiller_capacity)
        if u_in_hi <= u_in_lo:
            warnings.warn(
                f"stage {t}: cooling balance leaves no room for charging"
            )
            u_in_hi = u_in_lo + 1e-9
        if u_out_hi <= 0.0:
            warnings.warn(f"stage {t}: no heating demand, discharge pinned")
            u_out_hi = 1e-9
        u_boxes = [(u_in_lo, u_in_hi)] * nb + [(0.0, u_out_hi)] * nb
        boxes = x_boxes + u_boxes

        # Eliminated variables.
        hp_heat = sum(
            (cops[i] * u_outs[i] for i in range(nb)), Polynomial.zero(n)
        )
        total_in = sum(u_ins, Polynomial.zero(n))
        u_b = (d_heat - hp_heat) * (1.0 / params.boiler_efficiency)
        u_ch = (d_cool - total_in) * (1.0 / params.chiller_cop)

        cost = (
            params.electricity_price
            * (sum(u_outs, Polynomial.zero(n)) + u_ch)
            + params.gas_price * u_b
        )
        dynamics = [
            xs[i]
            + rate
            * (
                params.conduction_sign
                * params.conductivities[i]
                * (xs[i] - params.ambient)
                - cops[i] * u_outs[i]
                + u_ins[i]
            )
            for i in range(nb)
        ]

        extra = [
            u_b,
            params.boiler_capacity - u_b,
            u_ch,
            params.chiller_capacity - u_ch,
        ]

        if not scaled:
            C = SemialgebraicSet.box(boxes)
            C.inequalities.extend(extra)
            C = C.with_ball()
            X = SemialgebraicSet.box(x_boxes)
            stages.append(StageModel(n_x, n_u, dynamics, cost, C, X))
            scalings.append(boxes)
            continue

        # Unit-box scaling: raw = lo + width * unit for every variable.
        f_scaled = [
            (_affine_map(fi, boxes, n) - temp_box[0])
            * (1.0 / (temp_box[1] - temp_box[0]))
            for fi in dynamics
        ]
        cost_scaled = _affine_map(cost, boxes, n)
        extra_scaled = [_affine_map(g, boxes, n) for g in extra]
        C = SemialgebraicSet.box([(0.0, 1.0)] * n)
        C.inequalities.extend(extra_scaled)
        C = C.with_ball()
        X = SemialgebraicSet.box([(0.0, 1.0)] * n_x)
        stages.append(StageModel(n_x, n_u, f_scaled, cost_scaled, C, X))
        scalings.append(boxes)

    H = Polynomial.zero(n_x)
    if scaled:
        cost_scale = sum(
            st.l.max_abs_on_box(st.C.bounds) for st in stages
        )
        cost_scale = max(cost_scale, 1e-9)
        for st in stages:
            st.l = st.l * (1.0 / cost_scale)
        X_T = SemialgebraicSet.box([(0.0, 1.0)] * n_x)
        nu0 = UniformSpec(((0.0, 1.0),) * n_x)
    else:
        cost_scale = 1.0
        X_T = SemialgebraicSet.box(x_boxes)
        nu0 = UniformSpec(tuple(x_boxes))

    problem = MultistageProblem(
        stages,
        H,
        X_T,
        nu0,
        metadata={
            "name": "single_storage" if nb == 1 else "multi_storage",
            "params": params,
            "demand": demand,
            "scaled": scaled,
            "cost_scale": cost_scale,
            "variable_boxes": scalings,
            "state_box": temp_box,
        },
    )
    _warn_if_demand_unservable(problem, params, demand)
    return problem


def _warn_if_demand_unservable(problem, params, demand):
    """Coarse grid probe for stages whose demand exceeds total capacity."""
    for t, stage in enumerate(problem.stages):
        pts = _probe_grid(stage.C.bounds)
        feasible = np.ones(pts.shape[0], dtype=bool)
        for g in stage.C.inequalities:
            feasible &= g.eval_many(pts) >= -1e-9
        if not feasible.any():
            warnings.warn(
                f"stage {t}: no feasible control found at grid resolution; "
                "demand likely exceeds capacity"
            )


def _probe_grid(bounds, per_dim=7):
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def build_single_storage(params: BoreholeParams | None = None,
                         demand: DemandProfile | None = None,
                         scaled: bool = True) -> MultistageProblem:
    """Single-borehole problem: one temperature state, two controls after
    eliminating the boiler and chiller powers through the balances."""
    params = params or BoreholeParams()
    if params.n_boreholes != 1:
        raise ValueError("single-storage model needs exactly one conductivity")
    demand = demand or bundled_demand()
    return _build_storage(params, demand, scaled)


def build_multi_storage(params: BoreholeParams | None = None,
                        demand: DemandProfile | None = None,
                        scaled: bool = True,
                        demand_factor: float = 3.0) -> MultistageProblem:
    """Three-borehole problem: three states and six controls after
    elimination; demand defaults to the single-storage profile tripled."""
    params = params or multi_storage_params()
    if params.n_boreholes != 3:
        raise ValueError("multi-storage model needs exactly three conductivities")
    if demand is None:
        demand = bundled_demand().scaled(demand_factor)
    return _build_storage(params, demand, scaled)


def unscale_state(problem, unit_x):
    """Map a unit-box state back to physical temperatures."""
    lo, hi = problem.metadata["state_box"]
    return lo + (hi - lo) * np.asarray(unit_x, dtype=float)


def scale_state(problem, raw_x):
    lo, hi = problem.metadata["state_box"]
    return (np.asarray(raw_x, dtype=float) - lo) / (hi - lo)
