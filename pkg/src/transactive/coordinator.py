"""Coordinator contract: auxiliary/dual updates, convergence tests and the
two-phase trading round (trade schedule, then payments).

The contract keeps its state as fixed-point integers so that every replica
computes bit-identical updates. Users convert at their own boundary.

Two forms of the pairwise update live here. ``hlp1_update``/``hlp2_update``
are the plain floating-point equations and serve as the reference; the
contract runs ``pairwise_update_fixed``, the same equations in integer
arithmetic with explicit floor rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .scenario import CoordinatorConfig

# fixed-point units per kW (trades) or per $ (payments)
FIXED_SCALE = 10**9

TCMP = "tcmp"
TBAP = "tbap"
SETTLED = "settled"
FAILED = "failed"


class ContractRejection(Exception):
    """A report the contract refuses; ``code`` is a stable machine-readable tag."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class NonConvergenceError(RuntimeError):
    def __init__(self, phase: str, trace: list["TraceRecord"]):
        last = trace[-1].residual if trace else math.nan
        super().__init__(f"{phase} did not converge within {sum(r.phase == phase for r in trace)} "
                         f"iterations (last residual {last:.3e})")
        self.phase = phase
        self.trace = trace


# --------------------------------------------------------------------------
# reference updates


def _pairwise(x: np.ndarray, dual: np.ndarray, rho: float) -> tuple[np.ndarray, np.ndarray]:
    xt = np.swapaxes(x, 0, 1)
    dt = np.swapaxes(dual, 0, 1)
    aux = (rho * (x - xt) - (dual - dt)) / (2.0 * rho)
    return aux, dual + rho * (aux - x)


def hlp1_update(p: np.ndarray, lam: np.ndarray, rho1: float) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary trades and trade duals from a full (N, N, H) report matrix.

    p_hat_ij = [rho1 (p_ij - p_ji) - (lam_ij - lam_ji)] / (2 rho1), then
    lam_ij += rho1 (p_hat_ij - p_ij).
    """
    if not rho1 > 0:
        raise ValueError("rho1 must be positive")
    return _pairwise(np.asarray(p, dtype=float), np.asarray(lam, dtype=float), rho1)


def hlp2_update(pi: np.ndarray, gamma: np.ndarray, rho2: float) -> tuple[np.ndarray, np.ndarray]:
    """Same update for the (N, N) payment matrix."""
    if not rho2 > 0:
        raise ValueError("rho2 must be positive")
    return _pairwise(np.asarray(pi, dtype=float), np.asarray(gamma, dtype=float), rho2)


def step_penalty(k: int, config: CoordinatorConfig | None = None) -> tuple[float, float]:
    """(rho1, rho2) for iteration k: 1/k in diminishing mode, constants otherwise."""
    r1, r2 = step_penalty_exact(k, config)
    return float(r1), float(r2)


def step_penalty_exact(k: int, config: CoordinatorConfig | None = None) -> tuple[Fraction, Fraction]:
    """Schedule-determined penalties. In adaptive mode this is the starting pair."""
    if k < 1:
        raise ValueError(f"iteration index must be >= 1, got {k}")
    cfg = config or CoordinatorConfig()
    if cfg.rho_mode == "diminishing":
        return Fraction(1, k), Fraction(1, k)
    # the decimal text of the configured value, so 0.3 means exactly 3/10
    return Fraction(repr(float(cfg.rho1))), Fraction(repr(float(cfg.rho2)))


BALANCE_RATIO = 25  # rebalance when the residual norms differ by more than 5x
BALANCE_ITERATIONS = 50  # penalties are frozen afterwards so the iteration settles


def balance_exponent(primal_sq: int, dual_sq: Fraction) -> int:
    """Penalty rescaling exponent: +1 doubles rho, -1 halves it.

    Doubles when the primal residual dominates the dual one by more than the
    balance ratio, halves in the opposite case, otherwise keeps rho. Inputs are
    squared norms and the comparison is exact, so every replica agrees.
    """
    if dual_sq <= 0 or primal_sq <= 0:
        return 0
    ratio = Fraction(primal_sq) / dual_sq
    if ratio > BALANCE_RATIO:
        return 1
    if ratio * BALANCE_RATIO < 1:
        return -1
    return 0


def convergence_residual(aux: np.ndarray, reports: np.ndarray) -> float:
    """Sum over users of the Euclidean norm of (aux_i - report_i)."""
    d = np.asarray(aux, dtype=float) - np.asarray(reports, dtype=float)
    d = d.reshape(d.shape[0], -1)
    return float(np.sum(np.sqrt(np.sum(d * d, axis=1))))


# --------------------------------------------------------------------------
# fixed-point versions


def to_fixed(a) -> np.ndarray:
    """Round half up to the nearest fixed-point unit."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot encode non-finite values")
    return np.floor(a * FIXED_SCALE + 0.5).astype(np.int64)


def from_fixed(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64) / FIXED_SCALE


def _big(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).astype(object)


def _back(a: np.ndarray) -> np.ndarray:
    flat = [int(v) for v in a.ravel()]
    if flat and (max(flat) >= 2**63 or min(flat) < -(2**63)):
        raise OverflowError("fixed-point value outside int64")
    return np.array(flat, dtype=np.int64).reshape(a.shape)


def pairwise_update_fixed(x: np.ndarray, dual: np.ndarray, rho: Fraction) -> tuple[np.ndarray, np.ndarray]:
    """Integer form of the pairwise update with rho = num/den.

    For i < j the auxiliary value is floor((num (x_ij - x_ji) - den (d_ij - d_ji)) / (2 num))
    and the (j, i) entry is its exact negation, so antisymmetry holds bit for bit.
    The dual moves by floor(num (aux - x) / den).
    """
    num, den = rho.numerator, rho.denominator
    if num <= 0:
        raise ValueError("rho must be positive")
    X, D = _big(x), _big(dual)
    n = X.shape[0]
    aux = np.zeros_like(X)
    iu, ju = np.triu_indices(n, 1)
    top = (num * (X[iu, ju] - X[ju, iu]) - den * (D[iu, ju] - D[ju, iu])) // (2 * num)
    aux[iu, ju] = top
    aux[ju, iu] = -top
    D = D + (num * (aux - X)) // den
    return _back(aux), _back(D)


def residual_fixed(aux: np.ndarray, reports: np.ndarray) -> float:
    d = _big(aux) - _big(reports)
    d = d.reshape(d.shape[0], -1)
    return sum(math.sqrt(sum(v * v for v in row)) for row in d) / FIXED_SCALE


def _sq_norm(a: np.ndarray) -> int:
    return sum(v * v for v in _big(a).ravel())


# --------------------------------------------------------------------------
# the contract


@dataclass
class TraceRecord:
    phase: str
    iteration: int
    residual: float  # sum over users of |aux_i - report_i|
    rho: float
    dual_residual: float = 0.0  # rho * sum over users of |aux_i(k) - aux_i(k-1)|


@dataclass
class RoundView:
    """What one user reads from the contract to compute its next report."""

    phase: str
    k: int
    aux_trade: np.ndarray  # (N-1, H) fixed
    dual_trade: np.ndarray
    aux_pay: np.ndarray  # (N-1,) fixed
    dual_pay: np.ndarray
    rho1: float
    rho2: float


def _peers(n: int, i: int) -> list[int]:
    return [j for j in range(n) if j != i]


@dataclass
class TradingContract:
    n_users: int
    horizon: int
    config: CoordinatorConfig = field(default_factory=CoordinatorConfig)
    phase: str = TCMP
    k: int = 1
    aux_trade: np.ndarray = None
    dual_trade: np.ndarray = None
    aux_pay: np.ndarray = None
    dual_pay: np.ndarray = None
    pending: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)
    last_trade_reports: np.ndarray = None
    last_pay_reports: np.ndarray = None
    frozen_trades: np.ndarray | None = None
    frozen_payments: np.ndarray | None = None
    rho_trade: Fraction | None = None  # current penalties in adaptive mode
    rho_pay: Fraction | None = None

    def __post_init__(self) -> None:
        N, H = self.n_users, self.horizon
        if N < 1 or H < 1:
            raise ValueError("need at least one user and one slot")
        z3 = lambda: np.zeros((N, N, H), dtype=np.int64)  # noqa: E731
        z2 = lambda: np.zeros((N, N), dtype=np.int64)  # noqa: E731
        for name, make in (("aux_trade", z3), ("dual_trade", z3), ("last_trade_reports", z3),
                           ("aux_pay", z2), ("dual_pay", z2), ("last_pay_reports", z2)):
            if getattr(self, name) is None:
                setattr(self, name, make())
        if self.rho_trade is None or self.rho_pay is None:
            self.rho_trade, self.rho_pay = step_penalty_exact(1, self.config)

    @property
    def active(self) -> bool:
        return self.phase in (TCMP, TBAP)

    def rho(self) -> tuple[Fraction, Fraction]:
        if self.config.rho_mode == "adaptive":
            return self.rho_trade, self.rho_pay
        return step_penalty_exact(self.k, self.config)

    def view(self, i: int) -> RoundView:
        peers = _peers(self.n_users, i)
        r1, r2 = self.rho()
        return RoundView(self.phase, self.k, self.aux_trade[i, peers].copy(), self.dual_trade[i, peers].copy(),
                         self.aux_pay[i, peers].copy(), self.dual_pay[i, peers].copy(), float(r1), float(r2))

    def check_report(self, i: int, phase: str, k: int, payload: np.ndarray) -> None:
        """Raise ContractRejection if the report cannot be accepted now."""
        if not 0 <= i < self.n_users:
            raise ContractRejection("unknown-user", f"user index {i}")
        if phase != self.phase:
            raise ContractRejection("wrong-phase", f"report for {phase}, contract in {self.phase}")
        if k != self.k:
            raise ContractRejection("wrong-iteration", f"report for k={k}, contract at k={self.k}")
        if i in self.pending:
            raise ContractRejection("duplicate-report", f"user {i} already reported for k={k}")
        want = (self.n_users - 1, self.horizon) if phase == TCMP else (self.n_users - 1,)
        if tuple(np.shape(payload)) != want:
            raise ContractRejection("bad-payload", f"shape {np.shape(payload)}, expected {want}")

    def submit(self, i: int, phase: str, k: int, payload: np.ndarray) -> bool:
        """Record a report; returns True when it closed the round."""
        self.check_report(i, phase, k, payload)
        self.pending[i] = np.asarray(payload, dtype=np.int64)
        if len(self.pending) < self.n_users:
            return False
        self._close_round()
        return True

    def _close_round(self) -> None:
        N = self.n_users
        r1, r2 = self.rho()
        trade = self.phase == TCMP
        aux, dual = (self.aux_trade, self.dual_trade) if trade else (self.aux_pay, self.dual_pay)
        rho = r1 if trade else r2
        rep = np.zeros_like(aux)
        for i, v in self.pending.items():
            rep[i, _peers(N, i)] = v
        new_aux, new_dual = pairwise_update_fixed(rep, dual, rho)
        res = residual_fixed(new_aux, rep)
        dres = float(rho) * residual_fixed(new_aux, aux)
        if self.config.rho_mode == "adaptive" and self.k <= BALANCE_ITERATIONS:
            e = balance_exponent(_sq_norm(new_aux - rep), rho * rho * _sq_norm(new_aux - aux))
            rho_next = rho * Fraction(2) ** e
        else:
            rho_next = rho
        if trade:
            self.aux_trade, self.dual_trade, self.last_trade_reports, self.rho_trade = new_aux, new_dual, rep, rho_next
            eps, cap = self.config.eps1, self.config.max_iter_tcmp
        else:
            self.aux_pay, self.dual_pay, self.last_pay_reports, self.rho_pay = new_aux, new_dual, rep, rho_next
            eps, cap = self.config.eps2, self.config.max_iter_tbap
        self.trace.append(TraceRecord(self.phase, self.k, res, float(rho), dres))
        self.pending = {}
        # both residuals: reports agree with the cleared values, and those values have stopped moving
        if res <= eps and dres <= eps:
            if self.phase == TCMP:
                self.frozen_trades = self.aux_trade.copy()
                self.phase, self.k = TBAP, 1
            else:
                self.frozen_payments = self.aux_pay.copy()
                self.phase = SETTLED
        elif self.k >= cap:
            self.phase = FAILED
        else:
            self.k += 1

    def failed_phase(self) -> str | None:
        if self.phase != FAILED:
            return None
        return self.trace[-1].phase if self.trace else TCMP

    def canonical(self) -> list:
        """State as plain ints and strings, for hashing."""
        def arr(a):
            return None if a is None else np.asarray(a, dtype=np.int64)
        return [self.phase, self.k, self.n_users, self.horizon,
                [self.rho_trade.numerator, self.rho_trade.denominator, self.rho_pay.numerator, self.rho_pay.denominator],
                arr(self.aux_trade), arr(self.dual_trade),
                arr(self.aux_pay), arr(self.dual_pay), sorted((i, arr(v)) for i, v in self.pending.items()),
                arr(self.frozen_trades), arr(self.frozen_payments)]

    def copy(self) -> "TradingContract":
        c = TradingContract(self.n_users, self.horizon, self.config, self.phase, self.k,
                            self.aux_trade.copy(), self.dual_trade.copy(), self.aux_pay.copy(), self.dual_pay.copy(),
                            dict(self.pending), list(self.trace), self.last_trade_reports.copy(),
                            self.last_pay_reports.copy(),
                            None if self.frozen_trades is None else self.frozen_trades.copy(),
                            None if self.frozen_payments is None else self.frozen_payments.copy(),
                            self.rho_trade, self.rho_pay)
        return c
