"""Per-user problems: the standalone schedule, the trading subproblem and the
payment subproblem. Only trade and payment vectors ever leave this module's
callers; schedules and parameters stay on the household node."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import (
    ExogenousSeries,
    HouseholdParams,
    Schedule,
    indoor_temperature,
    operating_cost,
    storage_level,
    thermal_affine,
)
from .qp import QpProblem, SolveReport, solve_log_quadratic, solve_qp

LLP_TOL = 1e-9
# Common offset ($) added to every user's surplus inside the payment barrier.
# The same constant for everyone leaves the equal-split payments unchanged,
# keeps the barrier well posed when a user's own surplus is zero or negative,
# and bounds its curvature when the total surplus is tiny.
SURPLUS_OFFSET = 1.0


class InfeasibleHouseholdError(RuntimeError):
    pass


class SolverFailure(RuntimeError):
    def __init__(self, report: SolveReport, what: str):
        super().__init__(f"{what}: {report.status} ({report.message})")
        self.report = report


@dataclass
class LocalBroadcast:
    """What the coordinator publishes to one user for the current round."""

    aux_trade: np.ndarray  # (N-1, H)
    dual_trade: np.ndarray  # (N-1, H)
    aux_pay: np.ndarray  # (N-1,)
    dual_pay: np.ndarray  # (N-1,)
    rho1: float
    rho2: float
    k: int = 1

    @classmethod
    def initial(cls, n_peers: int, H: int, rho1: float = 1.0, rho2: float = 1.0) -> "LocalBroadcast":
        return cls(np.zeros((n_peers, H)), np.zeros((n_peers, H)), np.zeros(n_peers), np.zeros(n_peers), rho1, rho2)


@dataclass
class _Layout:
    H: int
    trading: bool

    @property
    def n(self) -> int:
        return (7 if self.trading else 6) * self.H + 1

    def block(self, name: str) -> slice:
        order = ["re", "g", "ac", "f", "ch", "dis"] + (["x"] if self.trading else [])
        if name == "z":
            return slice(self.n - 1, self.n)
        i = order.index(name)
        return slice(i * self.H, (i + 1) * self.H)


def check_aggregate_feasibility(params: HouseholdParams, exo: ExogenousSeries) -> None:
    """Cheap necessary conditions; raises naming the first one that fails."""
    h = exo.slot_hours
    w = params.window_mask()
    fmin = np.where(w, params.flex_min, 0.0)
    supply = exo.renewable_avail + params.grid_cap + params.discharge_cap
    for t in range(exo.horizon):
        need = exo.inflexible_load[t] + fmin[t]
        if need > supply[t] + 1e-9:
            raise InfeasibleHouseholdError(
                f"slot {t}: inflexible plus minimum flexible load {need:.6g} kW exceeds "
                f"renewable + grid cap + discharge cap {supply[t]:.6g} kW")
    fmax_total = h * float(np.sum(params.flex_max[w]))
    if params.flex_total > fmax_total + 1e-9:
        raise InfeasibleHouseholdError(
            f"flexible demand {params.flex_total:.6g} kWh exceeds window capacity {fmax_total:.6g} kWh")
    fmin_total = h * float(np.sum(params.flex_min[w]))
    if params.flex_total < fmin_total - 1e-9:
        raise InfeasibleHouseholdError(
            f"flexible demand {params.flex_total:.6g} kWh below window minimum {fmin_total:.6g} kWh")


def build_household_qp(params: HouseholdParams, exo: ExogenousSeries, trade_weight: float = 0.0,
                       trade_anchor=None) -> tuple[QpProblem, _Layout]:
    """Assemble a user's problem.

    With ``trade_anchor`` given, a free net-import variable x[t] joins the
    balance and is penalized by trade_weight/2 * (x[t] - anchor[t])^2.
    """
    H, h = exo.horizon, exo.slot_hours
    lay = _Layout(H, trade_anchor is not None)
    n = lay.n
    S = lay.block
    P = np.zeros((n, n))
    q = np.zeros(n)
    const = 0.0
    lb = np.zeros(n)
    ub = np.full(n, np.inf)

    ub[S("re")] = exo.renewable_avail
    ub[S("g")] = params.grid_cap
    ub[S("ac")] = params.hvac_max
    w = params.window_mask()
    lb[S("f")] = np.where(w, params.flex_min, 0.0)
    ub[S("f")] = np.where(w, params.flex_max, 0.0)
    ub[S("ch")] = params.charge_cap
    ub[S("dis")] = params.discharge_cap
    ub[S("z")] = params.grid_cap

    # grid tariff: energy charge plus epigraph of the peak
    q[S("g")] = params.energy_price * h
    q[S("z")] = params.peak_price
    # battery throughput
    q[S("ch")] += params.battery_wear * h
    q[S("dis")] += params.battery_wear * h
    # flexible-load discomfort on the window
    fi = np.arange(H)[w] + S("f").start
    P[fi, fi] += 2.0 * params.discomfort_flex
    q[fi] += -2.0 * params.discomfort_flex * params.flex_ref[w]
    const += params.discomfort_flex * float(np.sum(params.flex_ref[w] ** 2))
    # HVAC discomfort through the affine temperature map
    c, M = thermal_affine(exo, params)
    ai = S("ac")
    dev = c - params.temp_ref
    P[ai, ai] += 2.0 * params.discomfort_ac * (M.T @ M)
    q[ai] += 2.0 * params.discomfort_ac * (M.T @ dev)
    const += params.discomfort_ac * float(dev @ dev)

    A_rows, b_rows = [], []
    for t in range(H):
        row = np.zeros(n)
        row[S("re").start + t] = row[S("g").start + t] = row[S("dis").start + t] = 1.0
        row[S("ac").start + t] = row[S("f").start + t] = row[S("ch").start + t] = -1.0
        if lay.trading:
            row[S("x").start + t] = 1.0
        A_rows.append(row)
        b_rows.append(exo.inflexible_load[t])
    if w.any():
        row = np.zeros(n)
        row[fi] = h
        A_rows.append(row)
        b_rows.append(params.flex_total)

    # storage level as a cumulative sum of charge/discharge
    L = np.tril(np.ones((H, H))) * h
    soc = np.zeros((H, n))
    soc[:, S("ch")] = L * params.charge_eff
    soc[:, S("dis")] = -L / params.discharge_eff
    e_lo, e_hi = params.soc_bounds()
    G_rows = [soc]
    lo = [np.full(H, e_lo - params.soc_initial)]
    hi = [np.full(H, e_hi - params.soc_initial)]
    if params.cyclic_soc and H:
        A_rows.append(soc[-1])
        b_rows.append(0.0)
    temp = np.zeros((H, n))
    temp[:, ai] = M
    G_rows.append(temp)
    lo.append(params.temp_min - c)
    hi.append(params.temp_max - c)
    peak = np.zeros((H, n))
    peak[:, S("z").start] = 1.0
    peak[np.arange(H), S("g").start + np.arange(H)] = -1.0
    G_rows.append(peak)
    lo.append(np.zeros(H))
    hi.append(np.full(H, np.inf))

    if lay.trading:
        xi = np.arange(S("x").start, S("x").stop)
        lb[xi] = -np.inf
        anchor = np.asarray(trade_anchor, dtype=float)
        P[xi, xi] += trade_weight
        q[xi] += -trade_weight * anchor
        const += 0.5 * trade_weight * float(anchor @ anchor)

    qp = QpProblem(P=P, q=q, A=np.array(A_rows).reshape(-1, n), b=np.array(b_rows), G=np.vstack(G_rows),
                   lo=np.concatenate(lo), hi=np.concatenate(hi), lb=lb, ub=ub, const=const)
    return qp, lay


def _schedule_from(x: np.ndarray, lay: _Layout, params: HouseholdParams, exo: ExogenousSeries) -> Schedule:
    S = lay.block
    p_ch, p_dis, p_ac = x[S("ch")], x[S("dis")], x[S("ac")]
    return Schedule(
        p_re=x[S("re")], p_g=x[S("g")], p_ac=p_ac, p_f=x[S("f")], p_ch=p_ch, p_dis=p_dis,
        e_b=storage_level(p_ch, p_dis, params, exo.slot_hours),
        t_in=indoor_temperature(p_ac, exo, params),
    )


def solve_emp(params: HouseholdParams, exo: ExogenousSeries) -> tuple[Schedule, float]:
    """Standalone energy management: the user's baseline schedule and cost."""
    check_aggregate_feasibility(params, exo)
    qp, lay = build_household_qp(params, exo)
    rep = solve_qp(qp, tol=LLP_TOL)
    if rep.status == "infeasible":
        raise InfeasibleHouseholdError(f"standalone problem infeasible: {rep.message}")
    if not rep.ok:
        raise SolverFailure(rep, "standalone problem")
    s = _schedule_from(rep.x, lay, params, exo)
    return s, operating_cost(s, params, exo.slot_hours)


def trade_anchor(b: LocalBroadcast) -> np.ndarray:
    """Per-peer point the trade penalty pulls toward: aux + dual / rho."""
    return b.aux_trade + b.dual_trade / b.rho1


def split_net_import(x: np.ndarray, b: LocalBroadcast) -> np.ndarray:
    """Optimal per-peer trades given the per-slot total ``x``."""
    a = trade_anchor(b)
    m = a.shape[0]
    if m == 0:
        return a
    return a + (x - a.sum(axis=0)) / m


def llp1_objective(s: Schedule, trades: np.ndarray, params: HouseholdParams, exo: ExogenousSeries,
                   b: LocalBroadcast) -> float:
    pen = 0.5 * b.rho1 * float(np.sum((b.aux_trade - trades) ** 2)) - float(np.sum(b.dual_trade * trades))
    return operating_cost(s, params, exo.slot_hours) + pen


def solve_llp1(params: HouseholdParams, exo: ExogenousSeries, b: LocalBroadcast) -> tuple[Schedule, np.ndarray]:
    """Trading subproblem: operating cost plus augmented-Lagrangian trade terms.

    Per slot the peer trades only enter the balance through their sum, so the
    problem is solved over one net-import variable per slot and split back
    across peers in closed form.
    """
    m = b.aux_trade.shape[0]
    if m == 0:
        s, _ = solve_emp(params, exo)
        return s, np.zeros((0, exo.horizon))
    if not b.rho1 > 0:
        raise ValueError("rho1 must be positive")
    anchor = trade_anchor(b).sum(axis=0)
    qp, lay = build_household_qp(params, exo, trade_weight=b.rho1 / m, trade_anchor=anchor)
    rep = solve_qp(qp, tol=LLP_TOL)
    if not rep.ok:
        raise SolverFailure(rep, "trading subproblem")
    s = _schedule_from(rep.x, lay, params, exo)
    return s, split_net_import(rep.x[lay.block("x")], b)


def solve_llp2(delta: float, b: LocalBroadcast) -> np.ndarray:
    """Payment subproblem; ``delta`` is the surplus inside the barrier (callers add SURPLUS_OFFSET)."""
    if b.aux_pay.size == 0:
        return np.zeros(0)
    return solve_log_quadratic(delta, b.aux_pay, b.dual_pay, b.rho2)
