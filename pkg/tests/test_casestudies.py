import numpy as np
import pytest

from momentddp.casestudies import (
    BoreholeParams,
    DemandProfile,
    build_multi_storage,
    build_single_storage,
    bundled_cop_samples,
    bundled_demand,
    fit_cop,
    load_demand_csv,
    multi_storage_params,
)
from momentddp.poly import Polynomial


class TestParams:
    def test_defaults_match_energy_system_data(self):
        p = BoreholeParams()
        assert p.electricity_price == 0.096
        assert p.gas_price == 0.063
        assert p.hp_capacity == 60.0
        assert p.boiler_efficiency == 0.7
        assert p.boiler_capacity == 285.0
        assert p.chiller_cop == 5.0
        assert p.chiller_capacity == 150.0
        assert p.conductivities == (0.621,)
        assert p.inertia == 14805.0
        assert p.charge_capacity == 100.0
        assert p.ambient == 12.0
        assert (p.temp_low, p.temp_high) == (0.0, 12.0)
        assert p.dt_hours == 730.0
        assert p.horizon == 12

    def test_multi_storage_overrides(self):
        p = multi_storage_params()
        assert p.boiler_capacity == 855.0
        assert p.chiller_capacity == 450.0
        assert p.conductivities == pytest.approx(
            (0.621 * 0.9, 0.621, 0.621 * 1.1)
        )

    def test_validation(self):
        with pytest.raises(ValueError):
            BoreholeParams(inertia=-1.0)
        with pytest.raises(ValueError):
            BoreholeParams(temp_low=5.0, temp_high=5.0)

    def test_dynamics_rate_value(self):
        p = BoreholeParams()
        assert p.dt_hours / p.inertia == pytest.approx(730.0 / 14805.0)
        assert 730.0 / 14805.0 == pytest.approx(0.0493077, abs=1e-7)


class TestCopFit:
    def test_exact_affine_recovery(self):
        samples = [(x, 3.0 + 0.1 * x) for x in [0.0, 3.0, 7.0, 12.0]]
        poly, (a0, a1), residual = fit_cop(samples)
        assert a0 == pytest.approx(3.0, abs=1e-10)
        assert a1 == pytest.approx(0.1, abs=1e-10)
        assert residual < 1e-10

    def test_matches_normal_equations(self):
        samples = bundled_cop_samples()
        pts = np.asarray(samples)
        A = np.column_stack([np.ones(len(pts)), pts[:, 0]])
        ref = np.linalg.solve(A.T @ A, A.T @ pts[:, 1])
        _, (a0, a1), _ = fit_cop(samples)
        assert a0 == pytest.approx(ref[0], abs=1e-8)
        assert a1 == pytest.approx(ref[1], abs=1e-8)

    def test_constant_data_zero_slope(self):
        samples = [(0.0, 3.5), (6.0, 3.5), (12.0, 3.5)]
        _, (a0, a1), _ = fit_cop(samples)
        assert a1 == pytest.approx(0.0, abs=1e-12)
        assert a0 == pytest.approx(3.5)

    def test_rank_deficient_rejected(self):
        with pytest.raises(ValueError):
            fit_cop([(5.0, 3.0), (5.0, 3.2)])


class TestDemand:
    def test_bundled_profile_shape(self):
        d = bundled_demand()
        assert len(d) == 12
        # Cooling exceeds heating from May through September (stages 0-4).
        for t in range(5):
            assert d.cool[t] > d.heat[t]
        # Heating peaks midwinter.
        assert max(d.heat) == d.heat[8]

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "demand.csv"
        path.write_text(
            "stage,d_heat_kw,d_cool_kw\n0,1,2\n1,3,4\n"
        )
        d = load_demand_csv(path)
        assert d.heat == (1.0, 3.0)
        assert d.cool == (2.0, 4.0)

    def test_wrong_length_rejected(self, tmp_path):
        path = tmp_path / "demand.csv"
        path.write_text("stage,d_heat_kw,d_cool_kw\n0,1,2\n")
        with pytest.raises(ValueError):
            load_demand_csv(path, horizon=12)

    def test_negative_demand_rejected(self):
        with pytest.raises(ValueError):
            DemandProfile((1.0,), (-2.0,))

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "demand.csv"
        path.write_text("stage,heat\n0,1\n")
        with pytest.raises(ValueError):
            load_demand_csv(path)


class TestSingleStorage:
    def test_dimensions(self):
        problem = build_single_storage()
        assert problem.T == 12
        assert problem.n_x == 1
        assert problem.stages[0].n_u == 2

    def test_boiler_elimination_example(self):
        # With boiler efficiency 0.7, 7 kW of unmet heat needs 10 kW of gas.
        p = BoreholeParams()
        demand = DemandProfile((7.0,) * 12, (10.0,) * 12)
        problem = build_single_storage(p, demand, scaled=False)
        stage = problem.stages[0]
        # u_b appears as the first extra inequality; at u_out = 0 it should
        # equal d_heat / a_b = 10.
        u_b = stage.C.inequalities[2 * 3]  # after 3 box pairs
        assert u_b.eval([5.0, 0.0, 0.0]) == pytest.approx(10.0)

    def test_dynamics_match_printed_model(self):
        p = BoreholeParams()
        problem = build_single_storage(scaled=False)
        stage = problem.stages[0]
        rng = np.random.default_rng(0)
        for _ in range(50):
            x, u_in, u_out = rng.uniform([0, 0, 0], [12, 60, 16])
            a = p.cop_intercept + p.cop_slope * x
            expected = x + (p.dt_hours / p.inertia) * (
                0.621 * (x - 12.0) - a * u_out + u_in
            )
            assert stage.f[0].eval([x, u_in, u_out]) == pytest.approx(
                expected, rel=1e-12
            )

    def test_elimination_consistency(self):
        p = BoreholeParams()
        problem = build_single_storage(scaled=False)
        rng = np.random.default_rng(1)
        for t in (0, 6, 11):
            stage = problem.stages[t]
            d_heat = problem.metadata["demand"].heat[t]
            d_cool = problem.metadata["demand"].cool[t]
            pts = stage.C.sample(1000, rng)
            for x, u_in, u_out in pts:
                a = p.cop_intercept + p.cop_slope * x
                u_b = (d_heat - a * u_out) / p.boiler_efficiency
                u_ch = (d_cool - u_in) / p.chiller_cop
                # Heating balance holds by construction of u_b.
                assert a * u_out + p.boiler_efficiency * u_b == pytest.approx(
                    d_heat, abs=1e-10
                )
                assert u_in + p.chiller_cop * u_ch == pytest.approx(
                    d_cool, abs=1e-10
                )
                assert -1e-9 <= u_b <= p.boiler_capacity + 1e-9
                assert -1e-9 <= u_ch <= p.chiller_capacity + 1e-9

    def test_compactness(self):
        for problem in (build_single_storage(), build_single_storage(scaled=False)):
            for stage in problem.stages:
                assert stage.C.bounds is not None
                assert stage.X.bounds is not None
                for lo, hi in stage.C.bounds:
                    assert np.isfinite(lo) and np.isfinite(hi) and lo < hi

    def test_scaling_round_trip(self):
        raw = build_single_storage(scaled=False)
        scaled = build_single_storage(scaled=True)
        cost_scale = scaled.metadata["cost_scale"]
        for t in range(raw.T):
            boxes = scaled.metadata["variable_boxes"][t]
            lo = np.array([b[0] for b in boxes])
            width = np.array([b[1] - b[0] for b in boxes])
            n = len(boxes)
            # Unscale: unit = (raw - lo) / width applied to the scaled polys.
            l_back = scaled.stages[t].l.affine_change_of_variables(
                1.0 / width, -lo / width
            ) * cost_scale
            assert l_back.max_coeff_diff(raw.stages[t].l) < 1e-9 * max(
                1.0, cost_scale
            )
            x_lo, x_hi = raw.metadata["state_box"]
            f_back = scaled.stages[t].f[0].affine_change_of_variables(
                1.0 / width, -lo / width
            ) * (x_hi - x_lo) + x_lo
            assert f_back.max_coeff_diff(raw.stages[t].f[0]) < 1e-9

    def test_scaled_problem_unit_boxes(self):
        problem = build_single_storage()
        for stage in problem.stages:
            assert stage.C.bounds == [(0.0, 1.0)] * 3
        assert problem.metadata["cost_scale"] > 0

    def test_kappa_is_two(self):
        problem = build_single_storage()
        assert problem.stages[0].kappa == 2


class TestMultiStorage:
    def test_dimensions(self):
        problem = build_multi_storage()
        assert problem.n_x == 3
        assert problem.stages[0].n_u == 6
        # 9-dimensional decision space after elimination
        assert problem.n_x + problem.stages[0].n_u == 9

    def test_conductivities(self):
        problem = build_multi_storage(scaled=False)
        p = problem.metadata["params"]
        assert p.conductivities == pytest.approx((0.5589, 0.621, 0.6831))

    def test_boiler_capacity(self):
        problem = build_multi_storage()
        assert problem.metadata["params"].boiler_capacity == 855.0

    def test_demand_tripled(self):
        problem = build_multi_storage()
        base = bundled_demand()
        got = problem.metadata["demand"]
        assert got.heat == tuple(3 * h for h in base.heat)

    def test_wrong_borehole_count_rejected(self):
        with pytest.raises(ValueError):
            build_multi_storage(params=BoreholeParams())
