import numpy as np
import pytest

from transactive.energy import ExogenousSeries, HouseholdParams
from transactive.scenario import CoordinatorConfig, Scenario, SynthTemplate, User, synth_generate


def household(H=1, **kw) -> HouseholdParams:
    """Household with no battery, no shiftable load and cost-free HVAC unless overridden."""
    base = dict(
        thermal_capacity=2.0, thermal_resistance=2.0, hvac_mode_coeff=0.5,
        temp_ref=24.0, temp_min=18.0, temp_max=30.0, discomfort_ac=0.0,
        discomfort_flex=0.0, flex_total=0.0, flex_window=(), flex_min=np.zeros(H), flex_max=np.zeros(H),
        flex_ref=np.zeros(H), grid_cap=10.0, energy_price=0.1, peak_price=0.5,
    )
    base.update(kw)
    return HouseholdParams(**base)


def series(H=1, t_out=24.0, pv=0.0, load=0.0, slot_hours=1.0) -> ExogenousSeries:
    f = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (H,)).copy()  # noqa: E731
    return ExogenousSeries(f(t_out), f(pv), f(load), slot_hours)


def scenario_of(users, rho_mode="adaptive", rho1=0.3, rho2=1.0, **kw) -> Scenario:
    H = users[0].exo.horizon
    return Scenario(users=users, horizon=H, coordinator=CoordinatorConfig(rho_mode=rho_mode, rho1=rho1, rho2=rho2),
                    **kw)


def complementary_pair(H=2) -> Scenario:
    """One household with surplus solar, one with load and no solar."""
    a = User("seller", household(H, grid_cap=10.0), series(H, pv=4.0, load=1.0))
    b = User("buyer", household(H, grid_cap=10.0), series(H, pv=0.0, load=3.0))
    return scenario_of([a, b])


@pytest.fixture
def small_synth():
    return synth_generate(SynthTemplate(horizon=6, start_hour=8), seed=3, n=3)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    lines = acceptance_log.summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
