"""Result files for a trading day.

All files are UTF-8, line-delimited and written with fixed column order and
``repr`` floats, so repeating a run reproduces them byte for byte.

- ``costs.csv``: per user, standalone cost, cost before payments, cost after payments.
- ``trace.jsonl``: one record per coordinator iteration (phase, iteration, residual, dual residual, rho).
- ``hourly_trades.csv``: per slot, each user's net energy bought from peers.
- ``pair_trades.csv``: per slot and ordered pair, the cleared trade.
- ``outcome.json``: everything above plus payment matrix and chain summary.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .trading import TradingOutcome

COST_COLUMNS = ("user", "standalone_cost", "cost_before_payment", "cost_after_payment", "payment_total",
                "surplus", "net_surplus")


def _f(x) -> str:
    return repr(float(x))


def outcome_to_dict(o: TradingOutcome) -> dict:
    return {
        "users": list(o.names),
        "rho_mode": o.rho_mode,
        "iterations": dict(o.iterations),
        "standalone_cost": [float(x) for x in o.standalone_cost],
        "operating_cost": [float(x) for x in o.operating_cost],
        "payment_total": [float(x) for x in o.payment_total],
        "final_cost": [float(x) for x in o.final_cost],
        "surplus": [float(x) for x in o.surplus],
        "trades": np.asarray(o.trades, dtype=float).tolist(),
        "payments": np.asarray(o.payments, dtype=float).tolist(),
        "clearing_error": list(o.clearing_error()),
        "chain": o.chain,
    }


def export_outcome(o: TradingOutcome, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out / "costs.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COST_COLUMNS)
        net = o.net_surplus()
        for i, name in enumerate(o.names):
            w.writerow([name, _f(o.standalone_cost[i]), _f(o.operating_cost[i]), _f(o.final_cost[i]),
                        _f(o.payment_total[i]), _f(o.surplus[i]), _f(net[i])])
    paths.append(p)

    p = out / "trace.jsonl"
    with open(p, "w", encoding="utf-8") as fh:
        for r in o.trace:
            fh.write(json.dumps({"phase": r.phase, "iteration": r.iteration, "residual": r.residual,
                                 "dual_residual": r.dual_residual, "rho": r.rho}, sort_keys=True) + "\n")
    paths.append(p)

    N = o.n_users
    H = o.trades.shape[2] if o.trades.ndim == 3 else 0
    p = out / "hourly_trades.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", *o.names])
        totals = o.trades.sum(axis=1) if N else np.zeros((0, H))
        for t in range(H):
            w.writerow([t, *(_f(totals[i, t]) for i in range(N))])
    paths.append(p)

    p = out / "pair_trades.csv"
    with open(p, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slot", "user", "peer", "kw"])
        for t in range(H):
            for i in range(N):
                for j in range(N):
                    if i != j:
                        w.writerow([t, o.names[i], o.names[j], _f(o.trades[i, j, t])])
    paths.append(p)

    p = out / "outcome.json"
    p.write_text(json.dumps(outcome_to_dict(o), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    paths.append(p)
    return paths
