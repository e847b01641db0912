import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import household, series
from transactive.energy import (
    ParameterError,
    Schedule,
    check_balance,
    check_schedule,
    cost_breakdown,
    hvac_step,
    indoor_temperature,
    operating_cost,
    storage_level,
    thermal_affine,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestHvacStep:
    def test_equilibrium(self):
        assert hvac_step(25.0, 25.0, 0.0, household()) == 25.0

    def test_cancellation(self):
        p = household(thermal_capacity=1.0, thermal_resistance=1.0, hvac_mode_coeff=1.0)
        assert hvac_step(20.0, 30.0, 10.0, p) == 20.0

    def test_substitution(self):
        # C=2, R=2, eta=0.5: 22 - 0.25 * (22 - 32 + 4)
        p = household(thermal_capacity=2.0, thermal_resistance=2.0, hvac_mode_coeff=0.5)
        assert hvac_step(22.0, 32.0, 4.0, p) == pytest.approx(23.5, abs=1e-12)

    @given(finite, finite, st.floats(0, 10))
    def test_cooling_lowers_temperature(self, t_in, t_out, p_ac):
        p = household()
        assert hvac_step(t_in, t_out, p_ac, p) <= hvac_step(t_in, t_out, 0.0, p) + 1e-12


class TestTemperatureSeries:
    @given(st.lists(st.floats(0, 5), min_size=1, max_size=8), st.integers(0, 1000))
    def test_recursion_matches_affine_map(self, p_ac, seed):
        H = len(p_ac)
        rng = np.random.default_rng(seed)
        exo = series(H, t_out=rng.uniform(20, 35, H))
        p = household(H)
        temps = indoor_temperature(np.array(p_ac), exo, p)
        t = p.temp_ref
        for k in range(H):
            t = hvac_step(t, exo.outdoor_temp[k], p_ac[k], p)
            assert temps[k] == t
        c, M = thermal_affine(exo, p)
        np.testing.assert_allclose(c + M @ np.array(p_ac), temps, atol=1e-10)


class TestStorage:
    @given(st.lists(st.tuples(st.floats(0, 3), st.floats(0, 3)), min_size=1, max_size=10),
           st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.floats(0.25, 2.0))
    def test_telescoping(self, steps, eta_ch, eta_dis, h):
        p = household(len(steps), battery_capacity=100.0, charge_eff=eta_ch, discharge_eff=eta_dis,
                      soc_initial=50.0, charge_cap=3.0, discharge_cap=3.0)
        ch = np.array([s[0] for s in steps])
        dis = np.array([s[1] for s in steps])
        e = storage_level(ch, dis, p, h)
        assert e[-1] - p.soc_initial == pytest.approx(h * np.sum(eta_ch * ch - dis / eta_dis), abs=1e-9)


class TestOperatingCost:
    def test_zero_schedule(self):
        p = household(2)
        assert operating_cost(Schedule.zeros(2, t_in=p.temp_ref), p) == 0.0

    def test_grid_tariff(self):
        p = household(2, energy_price=0.1, peak_price=0.5)
        s = Schedule.zeros(2, t_in=p.temp_ref)
        s.p_g = np.array([1.0, 2.0])
        assert operating_cost(s, p) == pytest.approx(1.3, abs=1e-12)

    def test_battery_wear(self):
        p = household(2, battery_wear=0.05, energy_price=0.0, peak_price=0.0)
        s = Schedule.zeros(2, t_in=p.temp_ref)
        s.p_ch, s.p_dis = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert cost_breakdown(s, p)["battery"] == pytest.approx(0.1, abs=1e-12)

    def test_slot_hours_scale_energy_terms_only(self):
        p = household(2, energy_price=0.1, peak_price=0.5)
        s = Schedule.zeros(2, t_in=p.temp_ref)
        s.p_g = np.array([1.0, 2.0])
        # energy 0.1 * 0.5 h * 3 kW, peak unchanged
        assert operating_cost(s, p, slot_hours=0.5) == pytest.approx(0.15 + 1.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            operating_cost(Schedule.zeros(3), household(2))

    @settings(max_examples=50)
    @given(st.integers(0, 10_000), st.floats(0.01, 0.99))
    def test_convex(self, seed, theta):
        H = 4
        rng = np.random.default_rng(seed)
        p = household(H, discomfort_ac=0.05, discomfort_flex=0.03, flex_window=(1, 2), flex_ref=rng.uniform(0, 1, H),
                      battery_wear=0.02)

        def rand():
            return Schedule(*(rng.uniform(0, 3, H) for _ in range(6)), rng.uniform(0, 5, H), rng.uniform(20, 28, H))

        s1, s2 = rand(), rand()
        lhs = operating_cost(s1.blend(s2, theta), p)
        assert lhs <= theta * operating_cost(s1, p) + (1 - theta) * operating_cost(s2, p) + 1e-9

    @given(st.integers(0, 10_000))
    def test_components_non_negative(self, seed):
        H = 3
        rng = np.random.default_rng(seed)
        p = household(H, discomfort_ac=0.05, discomfort_flex=0.03, flex_window=(0, 1), battery_wear=0.02)
        s = Schedule(*(rng.uniform(0, 3, H) for _ in range(6)), rng.uniform(0, 5, H), rng.uniform(20, 28, H))
        assert all(v >= 0 for v in cost_breakdown(s, p).values())


class TestBalance:
    def test_zero(self):
        np.testing.assert_array_equal(check_balance(Schedule.zeros(2), np.zeros(2), series(2)), [0, 0])

    def test_grid_covers_load(self):
        s = Schedule.zeros(1)
        s.p_g = np.array([5.0])
        np.testing.assert_array_equal(check_balance(s, np.zeros(1), series(1, load=5.0)), [0.0])

    def test_surplus(self):
        s = Schedule.zeros(1)
        s.p_g = np.array([5.0])
        np.testing.assert_array_equal(check_balance(s, np.zeros(1), series(1, load=4.0)), [1.0])

    def test_trades_count_as_supply(self):
        s = Schedule.zeros(1)
        np.testing.assert_array_equal(check_balance(s, np.array([2.0]), series(1, load=2.0)), [0.0])


class TestValidation:
    def test_soc_fractions_ordered(self):
        with pytest.raises(ParameterError):
            household(soc_min_frac=0.5, soc_max_frac=0.5).validate()

    def test_temp_ref_inside_band(self):
        with pytest.raises(ParameterError):
            household(temp_ref=35.0).validate()

    def test_flex_total_achievable(self):
        with pytest.raises(ParameterError, match="flex_total"):
            household(2, flex_total=5.0, flex_window=(0, 1), flex_max=np.ones(2)).validate()

    def test_initial_soc_within_bounds(self):
        with pytest.raises(ParameterError, match="soc_initial"):
            household(battery_capacity=10.0, soc_min_frac=0.2, soc_initial=1.0).validate()

    def test_check_schedule_flags_violation(self):
        p = household(1)
        s = Schedule.zeros(1, t_in=p.temp_ref)
        s.p_g = np.array([20.0])
        names = {v.constraint for v in check_schedule(s, p, series(1, load=20.0))}
        assert "grid_cap" in names
