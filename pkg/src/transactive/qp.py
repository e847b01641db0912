"""Embedded convex solvers for the household subproblems.

``solve_qp`` is a dense primal-dual interior point method (Mehrotra
predictor-corrector) for

    minimize    1/2 x'Px + q'x + const
    subject to  A x = b
                lo <= G x <= hi
                lb <= x <= ub

Problems here have a few hundred variables at most, so everything is dense.
``solve_log_quadratic`` handles the payment subproblem, which has a closed
structure and never goes through the generic solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linprog, nnls

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000
# accept a stalled iterate whose merit is within this factor of the tolerance
STALL_ACCEPT = 100.0


class DegenerateSurplusError(ValueError):
    """The log-barrier payment problem has no interior to work with."""


@dataclass
class QpProblem:
    """Canonical QP. Empty constraint blocks may be left as ``None``."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    const: float = 0.0

    def __post_init__(self) -> None:
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A is None:
            self.A, self.b = np.zeros((0, n)), np.zeros(0)
        if self.G is None:
            self.G, self.lo, self.hi = np.zeros((0, n)), np.zeros(0), np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.G = np.asarray(self.G, dtype=float).reshape(-1, n)
        self.lo = np.asarray(self.lo, dtype=float).ravel()
        self.hi = np.asarray(self.hi, dtype=float).ravel()
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.b.size != self.A.shape[0]:
            raise ValueError("equality rhs does not match A")
        if not (self.lo.size == self.hi.size == self.G.shape[0]):
            raise ValueError("inequality bounds do not match G")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("variable bounds have wrong length")
        if np.any(np.diag(self.P) < -1e-12):
            raise ValueError("P must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.const)

    def violation(self, x: np.ndarray) -> float:
        """Largest absolute constraint violation at ``x``."""
        v = 0.0
        if self.A.shape[0]:
            v = max(v, float(np.max(np.abs(self.A @ x - self.b))))
        if self.G.shape[0]:
            gx = self.G @ x
            v = max(v, float(np.max(np.maximum(self.lo - gx, 0.0))), float(np.max(np.maximum(gx - self.hi, 0.0))))
        v = max(v, float(np.max(np.maximum(self.lb - x, 0.0), initial=0.0)))
        v = max(v, float(np.max(np.maximum(x - self.ub, 0.0), initial=0.0)))
        return v


@dataclass
class SolveReport:
    status: str
    objective: float
    x: np.ndarray
    max_violation: float
    iterations: int
    message: str = ""
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _reduce_fixed(p: QpProblem):
    """Substitute variables with lb == ub and turn equal-bound rows into equalities."""
    fixed = np.isclose(p.lb, p.ub, rtol=0.0, atol=1e-14)
    free = ~fixed
    xf = np.where(fixed, p.lb, 0.0)
    P = p.P[np.ix_(free, free)]
    q = p.q[free] + p.P[np.ix_(free, fixed)] @ xf[fixed]
    const = p.const + 0.5 * xf[fixed] @ p.P[np.ix_(fixed, fixed)] @ xf[fixed] + p.q[fixed] @ xf[fixed]
    A = p.A[:, free]
    b = p.b - p.A[:, fixed] @ xf[fixed]
    G = p.G[:, free]
    shift = p.G[:, fixed] @ xf[fixed]
    lo, hi = p.lo - shift, p.hi - shift
    eq_rows = np.isclose(lo, hi, rtol=0.0, atol=1e-14)
    if eq_rows.any():
        A = np.vstack([A, G[eq_rows]])
        b = np.concatenate([b, lo[eq_rows]])
        G, lo, hi = G[~eq_rows], lo[~eq_rows], hi[~eq_rows]
    # rows emptied by the substitution must hold on their own
    empty_eq = ~np.any(A != 0.0, axis=1)
    bad = empty_eq & (np.abs(b) > 1e-9)
    if bad.any():
        return None, f"equality row {int(np.flatnonzero(bad)[0])} is 0 = {b[bad][0]:.6g} after fixing variables"
    A, b = A[~empty_eq], b[~empty_eq]
    empty_g = ~np.any(G != 0.0, axis=1)
    bad = empty_g & ((lo > 1e-9) | (hi < -1e-9))
    if bad.any():
        return None, f"inequality row {int(np.flatnonzero(bad)[0])} excludes 0 after fixing variables"
    G, lo, hi = G[~empty_g], lo[~empty_g], hi[~empty_g]
    reduced = dict(P=P, q=q, A=A, b=b, G=G, lo=lo, hi=hi, lb=p.lb[free], ub=p.ub[free], const=const)
    return (reduced, fixed, xf), ""


def _as_geq(n, G, lo, hi, lb, ub):
    """Stack every finite one-sided bound as rows of C x >= d."""
    rows, rhs = [], []
    eye = np.eye(n)
    m = np.isfinite(lb)
    rows.append(eye[m]); rhs.append(lb[m])
    m = np.isfinite(ub)
    rows.append(-eye[m]); rhs.append(-ub[m])
    m = np.isfinite(lo)
    rows.append(G[m]); rhs.append(lo[m])
    m = np.isfinite(hi)
    rows.append(-G[m]); rhs.append(-hi[m])
    return np.vstack(rows), np.concatenate(rhs)


def _kkt_solve(K, A, r1, r2, reg):
    n, p = K.shape[0], A.shape[0]
    M = np.zeros((n + p, n + p))
    M[:n, :n] = K
    M[:n, n:] = A.T
    M[n:, :n] = A
    rhs = np.concatenate([r1, r2])
    R = M.copy()
    R[np.arange(n), np.arange(n)] += reg
    R[np.arange(n, n + p), np.arange(n, n + p)] -= reg
    lu = lu_factor(R, check_finite=False)
    sol = lu_solve(lu, rhs, check_finite=False)
    # refine against the unregularized matrix
    for _ in range(3):
        resid = rhs - M @ sol
        sol = sol + lu_solve(lu, resid, check_finite=False)
    return sol[:n], sol[n:]


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _feasibility_certificate(p: QpProblem) -> str | None:
    """Phase-one LP; returns a description when the constraints admit no point."""
    n = p.n
    A_ub, b_ub = [], []
    if p.G.shape[0]:
        fin = np.isfinite(p.hi)
        A_ub.append(p.G[fin]); b_ub.append(p.hi[fin])
        fin = np.isfinite(p.lo)
        A_ub.append(-p.G[fin]); b_ub.append(-p.lo[fin])
    res = linprog(
        np.zeros(n),
        A_ub=np.vstack(A_ub) if A_ub else None,
        b_ub=np.concatenate(b_ub) if b_ub else None,
        A_eq=p.A if p.A.shape[0] else None,
        b_eq=p.b if p.A.shape[0] else None,
        bounds=list(zip(np.where(np.isfinite(p.lb), p.lb, None), np.where(np.isfinite(p.ub), p.ub, None))),
        method="highs",
    )
    if res.status == 2:
        return "phase-one LP reports the constraint set is empty"
    return None


def solve_qp(p: QpProblem, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    """Solve ``p`` to relative KKT residuals below ``tol``."""
    reduced, msg = _reduce_fixed(p)
    if reduced is None:
        return SolveReport(INFEASIBLE, math.inf, np.full(p.n, np.nan), math.inf, 0, msg)
    r, fixed, xf = reduced
    x_free, y, iters, status, msg, act = _ipm(r, tol, max_iter)
    if act is not None:
        polished = _polish(r, x_free, *act, tol)
        if polished is not None:
            x_free, y = polished
            status, msg = OPTIMAL, ""
    x = xf.copy()
    x[~fixed] = x_free
    if status != OPTIMAL:
        cert = _feasibility_certificate(p)
        if cert is not None:
            return SolveReport(INFEASIBLE, math.inf, x, p.violation(x), iters, cert)
        return SolveReport(status, p.objective(x), x, p.violation(x), iters, msg)
    # snap onto variable bounds: the interior iterate sits a hair inside them
    x = np.clip(x, p.lb, p.ub)
    return SolveReport(OPTIMAL, p.objective(x), x, p.violation(x), iters, msg, y)


def _ipm(r: dict, tol: float, max_iter: int):
    P, q, A, b = r["P"], r["q"], r["A"], r["b"]
    n = q.size
    if n == 0:
        return np.zeros(0), np.zeros(A.shape[0]), 0, OPTIMAL, "", None
    C, d = _as_geq(n, r["G"], r["lo"], r["hi"], r["lb"], r["ub"])
    m = d.size
    scale_q = 1.0 + np.max(np.abs(q), initial=0.0)
    scale_b = 1.0 + np.max(np.abs(b), initial=0.0)
    scale_d = 1.0 + np.max(np.abs(d[np.isfinite(d)]), initial=0.0)
    reg = 1e-11 * (1.0 + np.max(np.abs(P), initial=0.0))

    # least-squares style start, then push slacks and duals inside
    x, ny = _kkt_solve(P + C.T @ C + 1e-8 * np.eye(n), A, -q + C.T @ d, b, reg)
    y = -ny
    s = C @ x - d
    z = np.ones(m)
    if m:
        ds = max(-1.5 * float(np.min(s)), 0.0)
        s = s + ds
        s = np.maximum(s, 1e-2)
        mu0 = float(s @ z) / m
        s = s + 0.5 * mu0
        z = z + 0.5 * mu0

    best = (math.inf, x, y, 0, (), None)
    for it in range(1, max_iter + 1):
        rd = P @ x + q - A.T @ y - C.T @ z
        rp = A @ x - b
        ri = C @ x - s - d
        mu = float(s @ z) / m if m else 0.0
        scale_dual = 1.0 + max(scale_q, np.max(np.abs(P @ x), initial=0.0), np.max(np.abs(C.T @ z), initial=0.0))
        parts = (
            np.max(np.abs(rd), initial=0.0) / scale_dual,
            np.max(np.abs(rp), initial=0.0) / scale_b,
            np.max(np.abs(ri), initial=0.0) / scale_d,
            mu,
        )
        merit = max(parts)
        if merit < best[0]:
            best = (merit, x.copy(), y.copy(), it, parts, (s.copy(), z.copy()))
        if merit <= tol:
            return x, y, it, OPTIMAL, "", (s, z)
        if not np.all(np.isfinite(x)) or (m and float(np.max(z)) > 1e14):
            break
        if it - best[3] >= 8:
            # roundoff floor: further steps only degrade the iterate
            break

        w = z / s if m else np.zeros(0)
        K = P + (C.T * w) @ C

        def direction(rc):
            r1 = -rd - C.T @ ((rc + z * ri) / s)
            dx, ndy = _kkt_solve(K, A, r1, -rp, reg)
            ds_ = C @ dx + ri
            dz_ = (-rc - z * ds_) / s
            return dx, -ndy, ds_, dz_

        # predictor
        dx, dy, ds, dz = direction(s * z)
        ap = _max_step(s, ds)
        ad = _max_step(z, dz)
        mu_aff = float((s + ap * ds) @ (z + ad * dz)) / m if m else 0.0
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        dx, dy, ds, dz = direction(s * z + ds * dz - sigma * mu)
        # one step length for both sides: with P != 0 the dual residual
        # depends on x, so unequal steps would reintroduce it
        alpha = 0.995 * min(_max_step(s, ds), _max_step(z, dz))
        x = x + alpha * dx
        s = s + alpha * ds
        y = y + alpha * dy
        z = z + alpha * dz
    merit, x, y, it, parts, act = best
    detail = "dual {:.1e} eq {:.1e} ineq {:.1e} gap {:.1e}".format(*parts) if parts else ""
    if merit <= STALL_ACCEPT * max(tol, 1e-12):
        return x, y, it, OPTIMAL, f"stalled at merit {merit:.2e} ({detail})", act
    return x, y, it, ITERATION_LIMIT, f"no convergence, best merit {merit:.2e} ({detail})", act


def _polish(r: dict, x0: np.ndarray, slack: np.ndarray, dual: np.ndarray, tol: float):
    """Re-solve on a guessed active set.

    Interior iterates approach weakly active constraints only like sqrt(mu),
    which leaves visible error at degenerate vertices. Fixing the active set
    recovers the vertex to roundoff. A candidate is kept only if it is primal
    feasible, admits nonnegative multipliers and is not worse than ``x0``.
    A wrong guess gets a few rounds of correction: violated rows join the set,
    rows with negative multipliers leave it.
    """
    P, q, A, b = r["P"], r["q"], r["A"], r["b"]
    n = q.size
    C, d = _as_geq(n, r["G"], r["lo"], r["hi"], r["lb"], r["ub"])
    t = max(tol, 1e-12)
    scale_p = 1.0 + max(np.max(np.abs(d), initial=0.0), np.max(np.abs(b), initial=0.0))
    scale_d = 1.0 + np.max(np.abs(q), initial=0.0)
    f0 = 0.5 * x0 @ P @ x0 + q @ x0
    tried = set()
    for ratio in (1.0, 1e2, 1e-2):
        active = dual > ratio * slack
        for _ in range(6):
            key = active.tobytes()
            if key in tried:
                break
            tried.add(key)
            x, z = _active_point(P, q, A, b, C[active], d[active], x0)
            if x is None:
                break
            viol = C @ x - d < -t * scale_p
            neg = np.zeros_like(active)
            neg[np.flatnonzero(active)] = z < -t * scale_d
            if not viol.any() and (A.shape[0] == 0 or np.max(np.abs(A @ x - b)) <= t * scale_p):
                if 0.5 * x @ P @ x + q @ x <= f0 + t * (1.0 + abs(f0)):
                    y = _nonneg_multipliers(P @ x + q, A, C[active], t * scale_d)
                    if y is not None:
                        return x, y
            if not viol.any() and not neg.any():
                break
            active = (active | viol) & ~neg
    return None


def _active_point(P, q, A, b, Ca, da, x0):
    """Solve the equality-constrained KKT system on the active rows.

    Refinement starts at ``x0`` so each pass is a proximal step centred on the
    current point; directions the active set leaves free stay where ``x0`` put
    them. Returns the point and the multipliers of the active rows.
    """
    n = q.size
    E = np.vstack([A, Ca])
    k = E.shape[0]
    M = np.zeros((n + k, n + k))
    M[:n, :n] = P
    M[:n, n:] = E.T
    M[n:, :n] = E
    rhs = np.concatenate([-q, b, da])
    reg = 1e-9 * (1.0 + np.max(np.abs(P), initial=0.0))
    R = M.copy()
    R[np.arange(n), np.arange(n)] += reg
    R[np.arange(n, n + k), np.arange(n, n + k)] -= reg
    lu = lu_factor(R, check_finite=False)
    sol = np.concatenate([x0, np.zeros(k)])
    for _ in range(50):
        resid = rhs - M @ sol
        if np.max(np.abs(resid)) <= 1e-14 * (1.0 + np.max(np.abs(rhs))):
            break
        sol = sol + lu_solve(lu, resid, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None, None
    return sol[:n], -sol[n + A.shape[0]:]


def _nonneg_multipliers(grad, A, Ca, tol):
    """Find y free, z >= 0 with A'y + Ca'z = grad; None if the fit misses by more than tol."""
    B = np.hstack([A.T, -A.T, Ca.T])
    w, _ = nnls(B, grad, maxiter=20 * B.shape[1] + 100)
    if np.max(np.abs(B @ w - grad), initial=0.0) > tol:
        return None
    p = A.shape[0]
    return w[:p] - w[p:2 * p]


def solve_log_quadratic(delta: float, pi_hat, gamma, rho2: float) -> np.ndarray:
    """Minimize -ln(delta - sum(pi)) + sum(rho2/2 (pi_hat - pi)^2 - gamma pi).

    For a fixed total ``s`` every coordinate sits at ``pi_hat + gamma/rho2``
    plus a shared shift, so the problem collapses to one scalar equation in the
    barrier headroom ``u = delta - s``:  u^2 - (delta - A) u - m/rho2 = 0.
    Its positive root is taken in the cancellation-free form.
    """
    pi_hat = np.asarray(pi_hat, dtype=float).ravel()
    gamma = np.asarray(gamma, dtype=float).ravel()
    if pi_hat.shape != gamma.shape:
        raise ValueError("pi_hat and gamma must have the same length")
    if not rho2 > 0:
        raise ValueError("rho2 must be positive")
    if not math.isfinite(delta):
        raise DegenerateSurplusError(f"surplus must be finite, got {delta}")
    m = pi_hat.size
    if m == 0:
        return np.zeros(0)
    anchor = pi_hat + gamma / rho2
    c = delta - float(np.sum(anchor))
    disc = math.sqrt(c * c + 4.0 * m / rho2)
    u = 0.5 * (c + disc) if c >= 0 else (2.0 * m / rho2) / (disc - c)
    return anchor - 1.0 / (rho2 * u)
