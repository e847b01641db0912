import numpy as np
import pytest

from conftest import complementary_pair, household, scenario_of, series
from oracles import centralized_total_cost
from transactive.coordinator import TBAP, TCMP, NonConvergenceError
from transactive.scenario import CoordinatorConfig, SynthTemplate, User, synth_generate
from transactive.trading import run_trading_day


class TestSingleUser:
    def test_equals_standalone(self):
        sc = synth_generate(SynthTemplate(horizon=4, start_hour=10), seed=5, n=1)
        o = run_trading_day(sc)
        assert o.trades.shape == (1, 1, 4) and not o.trades.any()
        assert not o.payments.any()
        assert o.final_cost[0] == pytest.approx(o.standalone_cost[0], abs=1e-6)


@pytest.fixture(scope="module")
def run():
    sc = complementary_pair()
    return sc, run_trading_day(sc)


class TestComplementaryPair:
    def test_seller_supplies_buyer(self, run):
        _, o = run
        # the buyer draws its whole 3 kW deficit from the seller's 3 kW surplus
        np.testing.assert_allclose(o.trades[1, 0], 3.0, atol=1e-4)
        np.testing.assert_allclose(o.trades, -np.swapaxes(o.trades, 0, 1), atol=1e-6)

    def test_both_gain(self, run):
        _, o = run
        assert (o.final_cost <= o.standalone_cost + 1e-4).all()
        assert o.final_cost.sum() < o.standalone_cost.sum() - 1.0

    def test_gain_split_equally(self, run):
        _, o = run
        np.testing.assert_allclose(o.net_surplus(), o.surplus.sum() / 2, atol=1e-4)

    def test_matches_centralized(self, run):
        sc, o = run
        assert o.operating_cost.sum() == pytest.approx(centralized_total_cost(sc), rel=1e-3, abs=1e-6)


class TestSymmetricUsers:
    def test_no_trade_no_payment(self):
        H = 3
        twin = lambda name: User(name, household(H), series(H, pv=1.0, load=2.0))  # noqa: E731
        o = run_trading_day(scenario_of([twin("a"), twin("b")]))
        np.testing.assert_allclose(o.trades, 0.0, atol=1e-5)
        np.testing.assert_allclose(o.payments, 0.0, atol=1e-5)
        np.testing.assert_allclose(o.final_cost, o.standalone_cost, atol=1e-5)


class TestRun:
    def test_trace_is_deterministic(self, small_synth):
        a, b = run_trading_day(small_synth), run_trading_day(small_synth)
        assert [(r.phase, r.iteration, r.residual, r.dual_residual, r.rho) for r in a.trace] == \
            [(r.phase, r.iteration, r.residual, r.dual_residual, r.rho) for r in b.trace]
        assert a.matches(b, tol=0.0)

    def test_clears_and_pays(self, small_synth):
        o = run_trading_day(small_synth)
        assert max(o.clearing_error()) <= 1e-4
        assert abs(o.payments.sum()) <= 1e-6
        assert (o.final_cost <= o.standalone_cost + 1e-4).all()
        assert o.iterations[TCMP] >= 1 and o.iterations[TBAP] >= 1

    def test_cap_reports_history(self, small_synth):
        small_synth.coordinator = CoordinatorConfig(max_iter_tcmp=3)
        with pytest.raises(NonConvergenceError) as e:
            run_trading_day(small_synth)
        assert e.value.phase == TCMP
        assert [r.iteration for r in e.value.trace] == [1, 2, 3]
