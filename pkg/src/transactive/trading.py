"""User-side agents and the in-process trading day.

A ``UserAgent`` is everything that runs on a household node: it holds the
private parameters, solves its own subproblems and emits only fixed-point
trade and payment vectors. ``run_trading_day`` drives a ``TradingContract``
directly; the replicated runtime in ``chain`` drives the same contract
through transactions and consensus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coordinator import (
    FAILED,
    TBAP,
    TCMP,
    NonConvergenceError,
    RoundView,
    TraceRecord,
    TradingContract,
    from_fixed,
    to_fixed,
)
from .energy import Schedule, operating_cost
from .local import SURPLUS_OFFSET, LocalBroadcast, solve_emp, solve_llp1, solve_llp2
from .scenario import Scenario, User


class UserAgent:
    def __init__(self, user: User, n_users: int):
        self.user = user
        self.n_users = n_users
        self.standalone_schedule, self.standalone_cost = solve_emp(user.params, user.exo)
        self.schedule: Schedule | None = None
        self.operating_cost: float | None = None
        self.surplus: float | None = None

    @property
    def name(self) -> str:
        return self.user.name

    def respond(self, view: RoundView) -> np.ndarray:
        m, H = self.n_users - 1, self.user.exo.horizon
        if view.phase == TCMP:
            b = LocalBroadcast(from_fixed(view.aux_trade).reshape(m, H), from_fixed(view.dual_trade).reshape(m, H),
                               np.zeros(m), np.zeros(m), view.rho1, view.rho2, view.k)
            s, trades = solve_llp1(self.user.params, self.user.exo, b)
            self.schedule = s
            self.operating_cost = operating_cost(s, self.user.params, self.user.exo.slot_hours)
            return to_fixed(trades).reshape(m, H)
        if view.phase == TBAP:
            if self.surplus is None:
                # known locally only: baseline minus cost at the trading schedule
                self.surplus = self.standalone_cost - self.operating_cost
            b = LocalBroadcast(np.zeros((m, H)), np.zeros((m, H)), from_fixed(view.aux_pay), from_fixed(view.dual_pay),
                               view.rho1, view.rho2, view.k)
            return to_fixed(solve_llp2(self.surplus + SURPLUS_OFFSET, b))
        raise ValueError(f"no report expected in phase {view.phase!r}")


@dataclass
class TradingOutcome:
    names: list[str]
    standalone_cost: np.ndarray
    operating_cost: np.ndarray
    payment_total: np.ndarray
    final_cost: np.ndarray
    surplus: np.ndarray
    trades: np.ndarray  # (N, N, H) kW, positive = row user buys from column user
    payments: np.ndarray  # (N, N) $, positive = row user pays column user
    reported_trades: np.ndarray
    reported_payments: np.ndarray
    trace: list[TraceRecord]
    iterations: dict[str, int]
    rho_mode: str
    chain: dict | None = field(default=None)

    @property
    def n_users(self) -> int:
        return len(self.names)

    def clearing_error(self) -> tuple[float, float]:
        """Largest |x_ij + x_ji| over the final reported trades and payments."""
        t = self.reported_trades
        p = self.reported_payments
        et = float(np.max(np.abs(t + np.swapaxes(t, 0, 1)), initial=0.0))
        ep = float(np.max(np.abs(p + p.T), initial=0.0))
        return et, ep

    def net_surplus(self) -> np.ndarray:
        return self.surplus - self.payment_total

    def matches(self, other: "TradingOutcome", tol: float = 1e-6) -> bool:
        """Equal up to ``tol`` in every per-user figure, matrix and trace entry."""
        if self.names != other.names or self.iterations != other.iterations:
            return False
        for name in ("standalone_cost", "operating_cost", "payment_total", "final_cost", "surplus", "trades",
                     "payments", "reported_trades", "reported_payments"):
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or np.max(np.abs(a - b), initial=0.0) > tol:
                return False
        if len(self.trace) != len(other.trace):
            return False
        return all(r.phase == s.phase and r.iteration == s.iteration and abs(r.residual - s.residual) <= tol
                   for r, s in zip(self.trace, other.trace))


def build_outcome(agents: list[UserAgent], contract: TradingContract, chain: dict | None = None) -> TradingOutcome:
    payments = from_fixed(contract.frozen_payments)
    op = np.array([a.operating_cost for a in agents])
    paid = payments.sum(axis=1)
    iters = {TCMP: sum(r.phase == TCMP for r in contract.trace), TBAP: sum(r.phase == TBAP for r in contract.trace)}
    return TradingOutcome(
        names=[a.name for a in agents],
        standalone_cost=np.array([a.standalone_cost for a in agents]),
        operating_cost=op,
        payment_total=paid,
        final_cost=op + paid,
        surplus=np.array([a.surplus for a in agents]),
        trades=from_fixed(contract.frozen_trades),
        payments=payments,
        reported_trades=from_fixed(contract.last_trade_reports),
        reported_payments=from_fixed(contract.last_pay_reports),
        trace=list(contract.trace),
        iterations=iters,
        rho_mode=contract.config.rho_mode,
        chain=chain,
    )


def run_trading_day(scenario: Scenario) -> TradingOutcome:
    """Both phases in-process, in synchronous rounds."""
    scenario.validate()
    N = scenario.n_users
    agents = [UserAgent(u, N) for u in scenario.users]
    contract = TradingContract(N, scenario.horizon, scenario.coordinator)
    while contract.active:
        views = [contract.view(i) for i in range(N)]
        for i, agent in enumerate(agents):
            contract.submit(i, views[i].phase, views[i].k, agent.respond(views[i]))
    if contract.phase == FAILED:
        raise NonConvergenceError(contract.failed_phase(), contract.trace)
    return build_outcome(agents, contract)
