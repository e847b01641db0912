import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import household, series
from oracles import standalone_cost
from transactive.energy import check_balance, check_schedule, operating_cost
from transactive.local import (
    InfeasibleHouseholdError,
    LocalBroadcast,
    llp1_objective,
    solve_emp,
    solve_llp1,
    solve_llp2,
)
from transactive.scenario import SynthTemplate, synth_generate


def broadcast(m, H, rho1=1.0, rho2=1.0, lam=0.0, aux=0.0):
    return LocalBroadcast(np.full((m, H), aux, dtype=float), np.full((m, H), lam, dtype=float), np.zeros(m),
                          np.zeros(m), rho1, rho2)


class TestStandalone:
    def test_idle_household(self):
        p = household(2)
        s, cost = solve_emp(p, series(2))
        assert cost == pytest.approx(0.0, abs=1e-8)
        for name in ("p_re", "p_g", "p_ac", "p_f", "p_ch", "p_dis"):
            np.testing.assert_allclose(getattr(s, name), 0.0, atol=1e-7)

    def test_free_renewable_first(self):
        # any cooling would move the room off its reference, so the optimum is unique
        s, cost = solve_emp(household(1, discomfort_ac=0.05), series(1, pv=5.0, load=2.0))
        assert s.p_re[0] == pytest.approx(2.0, abs=1e-7)
        assert s.p_g[0] == pytest.approx(0.0, abs=1e-7)
        assert cost == pytest.approx(0.0, abs=1e-7)

    def test_forced_grid_purchase(self):
        s, cost = solve_emp(household(1, energy_price=0.1, peak_price=0.5), series(1, load=2.0))
        assert s.p_g[0] == pytest.approx(2.0, abs=1e-7)
        assert cost == pytest.approx(1.2, abs=1e-7)

    def test_infeasible_names_bound(self):
        with pytest.raises(InfeasibleHouseholdError, match="slot 0"):
            solve_emp(household(1, grid_cap=1.0), series(1, load=5.0))

    def test_schedules_satisfy_every_constraint(self, small_synth):
        for u in small_synth.users:
            s, _ = solve_emp(u.params, u.exo)
            assert check_schedule(s, u.params, u.exo, tol=1e-6) == []

    def test_matches_independent_model(self, small_synth):
        for u in small_synth.users:
            _, cost = solve_emp(u.params, u.exo)
            assert cost == pytest.approx(standalone_cost(u.params, u.exo), rel=1e-5, abs=1e-6)


class TestLlp1:
    def test_self_sufficient_user_stays_put(self):
        _, trades = solve_llp1(household(1), series(1, pv=3.0, load=1.0), broadcast(1, 1))
        assert abs(trades[0, 0]) < 1e-6

    def test_deficit_user_imports(self):
        # load 5 kW, grid capped at 2 kW, no renewable
        _, trades = solve_llp1(household(1, grid_cap=2.0), series(1, load=5.0), broadcast(1, 1))
        assert trades[0, 0] >= 3.0 - 1e-7

    def test_responds_to_price_signal(self):
        p, exo = household(2), series(2, pv=1.0, load=1.5)
        _, base = solve_llp1(p, exo, broadcast(1, 2))
        b = broadcast(1, 2)
        b.dual_trade[0, 1] = 5.0
        _, pushed = solve_llp1(p, exo, b)
        assert pushed[0, 1] > base[0, 1] + 1e-3

    def test_no_peers_is_standalone(self):
        p, exo = household(1), series(1, load=2.0)
        s, trades = solve_llp1(p, exo, broadcast(0, 1))
        assert trades.shape == (0, 1)
        assert operating_cost(s, p) == pytest.approx(solve_emp(p, exo)[1], abs=1e-8)

    def test_stiff_penalty_reproduces_standalone(self, small_synth):
        u = small_synth.users[0]
        H = small_synth.horizon
        s, trades = solve_llp1(u.params, u.exo, broadcast(2, H, rho1=1e6))
        assert np.max(np.abs(trades)) < 1e-3
        assert operating_cost(s, u.params) == pytest.approx(solve_emp(u.params, u.exo)[1], abs=1e-3)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 5.0))
    def test_balance_and_local_optimality(self, seed, rho1):
        sc = synth_generate(SynthTemplate(horizon=4, start_hour=9), seed=seed, n=1)
        u = sc.users[0]
        rng = np.random.default_rng(seed)
        b = LocalBroadcast(rng.normal(0, 1, (2, 4)), rng.normal(0, 0.2, (2, 4)), np.zeros(2), np.zeros(2), rho1, 1.0)
        s, trades = solve_llp1(u.params, u.exo, b)
        assert np.max(np.abs(check_balance(s, trades.sum(axis=0), u.exo))) <= 1e-6
        assert check_schedule(s, u.params, u.exo, trades.sum(axis=0), tol=1e-6) == []
        # the standalone schedule with zero trades is feasible for the same problem
        s0, _ = solve_emp(u.params, u.exo)
        assert llp1_objective(s, trades, u.params, u.exo, b) <= \
            llp1_objective(s0, np.zeros_like(trades), u.params, u.exo, b) + 1e-7


class TestLlp2:
    def test_first_iteration_root(self):
        pi = solve_llp2(1.0, broadcast(1, 1))
        assert pi[0] == pytest.approx((1 - math.sqrt(5)) / 2, abs=1e-12)

    def test_no_counterparties(self):
        assert solve_llp2(1.0, broadcast(0, 1)).size == 0

    @pytest.mark.parametrize("d", [(0.8, 0.8), (1.5, 0.3)])
    def test_pair_splits_equally(self, d):
        # iterate the pairwise exchange between two users until it settles; the
        # two-user bargaining solution pays (d1 - d2) / 2 from user 1 to user 2
        from transactive.coordinator import hlp2_update

        d = np.array(d)
        pi_hat = np.zeros((2, 2))
        gamma = np.zeros((2, 2))
        for _ in range(200):
            rep = np.zeros((2, 2))
            for i, j in ((0, 1), (1, 0)):
                b = LocalBroadcast(np.zeros((1, 1)), np.zeros((1, 1)), pi_hat[i, [j]], gamma[i, [j]], 1.0, 1.0)
                rep[i, j] = solve_llp2(d[i], b)[0]
            pi_hat, gamma = hlp2_update(rep, gamma, 1.0)
        np.testing.assert_allclose(d - pi_hat.sum(axis=1), d.sum() / 2, atol=1e-6)
        assert pi_hat[0, 1] == pytest.approx((d[0] - d[1]) / 2, abs=1e-6)
