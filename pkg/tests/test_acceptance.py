"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line in the run summary.

All scenarios use the adaptive penalty mode (the package default).
"""

import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from acceptance_log import checking, record
from conftest import complementary_pair
from oracles import centralized_total_cost, nash_payments
from transactive.chain import run_drill, run_with_chain
from transactive.cli import main
from transactive.coordinator import TBAP, TCMP, hlp1_update, hlp2_update
from transactive.ledger import TOKEN_SCALE
from transactive.local import SURPLUS_OFFSET
from transactive.pbft import max_faulty
from transactive.scenario import FaultSpec, SynthTemplate, save_scenario, synth_generate
from transactive.trading import run_trading_day

def small_instances():
    """20 synthetic communities covering N in {2, 3}, H in {4, 6} and different hours of the day."""
    out = []
    for k in range(20):
        n, horizon, start = 2 + k % 2, (4, 6)[(k // 2) % 2], (6, 9, 12, 15, 0)[k % 5]
        out.append(synth_generate(SynthTemplate(horizon=horizon, start_hour=start), seed=100 + k, n=n))
    return out


@pytest.fixture(scope="module")
def small_runs():
    """(scenario, outcome, centralized optimum) per instance, plus the time spent on both solvers."""
    t0 = time.perf_counter()
    runs = [(sc, run_trading_day(sc), centralized_total_cost(sc)) for sc in small_instances()]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="module")
def pair_run():
    return run_trading_day(complementary_pair())


@pytest.fixture(scope="module")
def community_run():
    sc = synth_generate(seed=0, n=10)
    assert sc.coordinator.eps1 == sc.coordinator.eps2 == 1e-6
    t0 = time.perf_counter()
    o = run_trading_day(sc)
    return o, time.perf_counter() - t0


def accepted(small_runs, pair_run, community_run):
    return [o for _, o, _ in small_runs[0]] + [pair_run, community_run[0]]


def test_oracle_equivalence(small_runs):
    with checking(1):
        runs, elapsed = small_runs
        worst = 0.0
        for sc, o, ref in runs:
            got = o.operating_cost.sum()
            # relative error; the 1e-3 $ floor on the denominator means 1e-6 $ absolute on zero-cost days
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-3))
        ok = worst <= 1e-3 and elapsed < 120 and len(runs) >= 20
        record(1, ok, f"{len(runs)} instances, worst relative gap {worst:.2e} (tol 1e-3), {elapsed:.0f} s (limit 120)")
        assert ok


def test_clearing(small_runs, pair_run, community_run):
    with checking(2):
        runs = accepted(small_runs, pair_run, community_run)
        et = max(o.clearing_error()[0] for o in runs)
        ep = max(o.clearing_error()[1] for o in runs)
        ok = et <= 1e-4 and ep <= 1e-4
        record(2, ok, f"{len(runs)} runs, max |p_ij + p_ji| {et:.1e} kW, max |pi_ij + pi_ji| {ep:.1e} $ (tol 1e-4)")
        assert ok


def test_equal_surplus(small_runs, pair_run, community_run):
    with checking(3):
        runs = accepted(small_runs, pair_run, community_run)
        split = max(np.max(np.abs(o.net_surplus() - o.surplus.mean())) for o in runs)
        oracle_gap = 0.0
        for o in runs:
            if o.n_users > 3:
                continue
            # the same positive shift on every surplus leaves the equal split unchanged
            pi = nash_payments(o.surplus + SURPLUS_OFFSET)
            oracle_gap = max(oracle_gap, np.max(np.abs(pi.sum(axis=1) - o.payment_total)))
        ok = split <= 1e-3 and oracle_gap <= 1e-3
        record(3, ok, f"max |net surplus - mean| {split:.1e} $, max gap to Nash-product oracle {oracle_gap:.1e} $ "
                      f"(tol 1e-3)")
        assert ok


def test_participation(small_runs, pair_run, community_run):
    with checking(4):
        runs = accepted(small_runs, pair_run, community_run)
        excess = max(np.max(o.final_cost - o.standalone_cost) for o in runs)
        # diversity: instances where the centralized optimum beats standing alone
        diverse = [o for _, o, ref in small_runs[0] if ref < o.standalone_cost.sum() - 1e-4]
        diverse += [pair_run, community_run[0]]
        strict = all(o.final_cost.sum() < o.standalone_cost.sum() for o in diverse)
        ok = excess <= 1e-4 and strict
        record(4, ok, f"max final - standalone {excess:.1e} $ (tol 1e-4); total cost strictly lower on "
                      f"{sum(o.final_cost.sum() < o.standalone_cost.sum() for o in diverse)}/{len(diverse)} "
                      f"diverse instances")
        assert ok


def _windows_decrease(residuals, width=10):
    maxima = [max(residuals[i:i + width]) for i in range(0, len(residuals), width)]
    return all(b < a for a, b in zip(maxima, maxima[1:])), maxima


def test_convergence_behavior(community_run):
    with checking(5):
        o, elapsed = community_run
        ok, parts = True, []
        for phase in (TCMP, TBAP):
            res = [r.residual for r in o.trace if r.phase == phase]
            falling, maxima = _windows_decrease(res)
            ok &= falling and len(res) < 200
            parts.append(f"{phase} {len(res)} it, window maxima {maxima[0]:.1e} -> {maxima[-1]:.1e}"
                         f"{'' if falling else ' (rises)'}")
        ok &= elapsed < 300
        record(5, ok, f"10 users, eps 1e-6: {'; '.join(parts)}; {elapsed:.0f} s (limit 300)")
        assert ok


def test_update_fixtures():
    with checking(6):
        # trades, 2 users, 1 slot; rho 2: p_12 = 1, p_21 = 0, lambda_12 = 0.4, lambda_21 = -0.2
        p = np.array([[[0.0], [1.0]], [[0.0], [0.0]]])
        lam = np.array([[[0.0], [0.4]], [[-0.2], [0.0]]])
        aux, new = hlp1_update(p, lam, 2.0)
        # (2 (1 - 0) - (0.4 - (-0.2))) / 4 = 0.35; 0.4 + 2 (0.35 - 1) = -0.9; -0.2 + 2 (-0.35 - 0) = -0.9
        checks = [aux[0, 1, 0] == 0.35, aux[1, 0, 0] == -0.35, new[0, 1, 0] == pytest.approx(-0.9, abs=1e-15),
                  new[1, 0, 0] == pytest.approx(-0.9, abs=1e-15)]
        # both report a purchase of 1 kW: cleared to zero, both duals drop by rho
        aux, new = hlp1_update(np.array([[[0.0], [1.0]], [[1.0], [0.0]]]), np.zeros((2, 2, 1)), 1.0)
        checks += [aux[0, 1, 0] == 0.0, new[0, 1, 0] == -1.0, new[1, 0, 0] == -1.0]
        # payments, rho 1: user 1 offers 5, user 2 reports nothing
        aux, gam = hlp2_update(np.array([[0.0, 5.0], [0.0, 0.0]]), np.zeros((2, 2)), 1.0)
        checks += [aux[0, 1] == 2.5, aux[1, 0] == -2.5, gam[0, 1] == -2.5, gam[1, 0] == -2.5]
        # payments, rho 0.5, with duals: (0.5 (3 + 1) - (1 - 0.5)) / 1 = 1.5
        aux, gam = hlp2_update(np.array([[0.0, 3.0], [-1.0, 0.0]]), np.array([[0.0, 1.0], [0.5, 0.0]]), 0.5)
        checks += [aux[0, 1] == 1.5, gam[0, 1] == 1.0 + 0.5 * (1.5 - 3.0), gam[1, 0] == 0.5 + 0.5 * (-1.5 + 1.0)]
        ok = all(checks)
        record(6, ok, f"{sum(checks)}/{len(checks)} hand-computed entries exact")
        assert ok


def drill_schedule(seed):
    rng = np.random.default_rng(seed)
    n = (4, 5, 7)[seed % 3]
    f = max_faulty(n)
    k = int(rng.integers(0, f + 1))
    nodes = list(rng.choice(np.arange(1, n), size=k, replace=False))
    if k and seed % 2 == 0:
        nodes[0] = 0  # half of the faulty schedules attack through the first primary
    faults = [FaultSpec(f"v{int(i)}", str(rng.choice(["crash", "mute", "equivocate"])), float(rng.uniform(0, 150)))
              for i in nodes]
    lo = float(rng.uniform(1, 5))
    return dict(n=n, faults=faults, seed=seed, duration=400.0, latency=(lo, lo + float(rng.uniform(0, 6))),
                drop_prob=float(rng.choice([0.0, 0.01, 0.03])))


def test_consensus_safety():
    with checking(7):
        t0 = time.perf_counter()
        reports = [run_drill(**drill_schedule(s)) for s in range(120)]
        elapsed = time.perf_counter() - t0
        conflicts = sum(r.safety_violations for r in reports)
        faulty = sum(bool(r.faults) for r in reports)
        kinds = {b: sum(f.behavior == b for r in reports for f in r.faults) for b in ("crash", "mute", "equivocate")}
        primaries = sum(any(f.node == "v0" for f in r.faults) for r in reports)
        progressed = sum(min(h for v, h in r.heights.items() if v not in {f.node for f in r.faults}) > 0
                         for r in reports)
        ok = conflicts == 0 and not any(r.beyond_tolerance for r in reports) and elapsed < 180
        record(7, ok, f"{len(reports)} schedules over n in {{4,5,7}} ({faulty} with faults, {primaries} on the primary; "
                      f"{kinds['crash']} crash, {kinds['mute']} mute, {kinds['equivocate']} equivocate; "
                      f"{progressed} made progress): {conflicts} conflicting commits, {elapsed:.0f} s (limit 180)")
        assert ok


def test_consensus_liveness():
    with checking(8):
        one = run_drill(4, [FaultSpec("v0", "crash", at=100.0)], seed=11, duration=1500)
        two = run_drill(7, [FaultSpec("v0", "crash", at=100.0), FaultSpec("v1", "crash", at=100.0)], seed=12,
                        duration=2000)
        live1 = {v: x for v, x in one.views.items() if v != "v0"}
        live2 = {v: x for v, x in two.views.items() if v not in ("v0", "v1")}
        ok = (set(live1.values()) == {1} and one.blocks_after_view_change >= 10
              and set(live2.values()) == {2} and two.blocks_after_view_change >= 10
              and one.safety_violations == two.safety_violations == 0)
        record(8, ok, f"primary crash: view {sorted(set(live1.values()))}, {one.blocks_after_view_change} blocks "
                      f"after; two crashes: view {sorted(set(live2.values()))}, {two.blocks_after_view_change} "
                      f"blocks after")
        assert ok


def test_dual_path_equivalence():
    with checking(9):
        details, ok = [], True
        for label, sc in (("pair", complementary_pair()),
                          ("3 users, lossy net", synth_generate(SynthTemplate(horizon=6, start_hour=8), seed=3, n=3))):
            if label.endswith("lossy net"):
                sc.net.latency_min, sc.net.latency_max, sc.net.drop_prob = 2.0, 9.0, 0.02
            direct = run_trading_day(sc)
            chained = run_with_chain(sc).outcome
            same = direct.matches(chained, tol=1e-6)
            gap = max(np.max(np.abs(direct.final_cost - chained.final_cost)),
                      np.max(np.abs(direct.trades - chained.trades)))
            ok &= same
            details.append(f"{label}: {'match' if same else 'differ'} (max gap {gap:.1e})")
        record(9, ok, "; ".join(details) + " (tol 1e-6)")
        assert ok


def _snapshot(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_determinism(tmp_path):
    with checking(10):
        runner = CliRunner()
        sc = synth_generate(SynthTemplate(horizon=4, start_hour=9), seed=21, n=3)
        sc.net.latency_min, sc.net.latency_max, sc.net.drop_prob = 1.0, 8.0, 0.02
        scen = tmp_path / "s.yaml"
        save_scenario(sc, scen)
        fault = tmp_path / "f.yaml"
        fault.write_text("- {node: v0, behavior: crash, at: 50}\n")
        commands = {
            "run": ["run", str(scen), "--no-chain"],
            "run-chain": ["run", str(scen), "--with-chain"],
            "baseline": ["baseline", str(scen)],
            "faults": ["faults", str(scen), "--script", str(fault), "--duration", "600"],
        }
        snaps, roots = {}, []
        for rep in (0, 1):
            for name, args in commands.items():
                out = tmp_path / f"{name}-{rep}"
                r = runner.invoke(main, args + ["--out", str(out)])
                assert r.exit_code == 0, r.output
                snaps[name, rep] = _snapshot(out)
            syn = tmp_path / f"synth-{rep}.yaml"
            assert runner.invoke(main, ["synth", "--n", "4", "--seed", "9", "--out", str(syn)]).exit_code == 0
            snaps["synth", rep] = {"s": syn.read_bytes()}
            dump = runner.invoke(main, ["chain-dump", str(scen)])
            snaps["chain-dump", rep] = {"s": dump.output.encode()}
            roots.append(json.loads((tmp_path / f"run-chain-{rep}" / "status.json").read_text())["state_root"])
        names = sorted({k for k, _ in snaps})
        same = [k for k in names if snaps[k, 0] == snaps[k, 1]]
        ok = same == names and roots[0] == roots[1] and roots[0]
        nfiles = sum(len(snaps[k, 0]) for k in names)
        record(10, ok, f"{len(same)}/{len(names)} commands byte-identical on repeat ({nfiles} files), "
                       f"state root {'identical' if roots[0] == roots[1] else 'differs'}")
        assert ok


def test_settlement_conservation():
    with checking(11):
        sc = complementary_pair()
        sc.chain.block_reward = 0.5
        sc.chain.genesis_balance = 100.0
        run = run_with_chain(sc)
        s = run.outcome.chain
        minted = s["tokens_final"] - s["tokens_genesis"]
        users = [u.name for u in sc.users]
        genesis = run.genesis.balances
        net = {u: s["balances"][u] - genesis[u] for u in users}
        moved = {u: 0 for u in users}
        for src, dst, amount in s["settlement"]:
            moved[src] -= amount
            moved[dst] += amount
        paid = np.clip(run.outcome.payments, 0, None).sum()
        transferred = sum(a for _, _, a in s["settlement"]) / TOKEN_SCALE
        ok = (minted == s["minted"] > 0 and net == moved and sum(net.values()) == 0
              and s["settlement_status"] == "done" and abs(transferred - paid) <= 1e-6 * len(users) ** 2)
        record(11, ok, f"tokens_final - tokens_genesis = {minted} = minted {s['minted']} micro-tokens; user balance "
                       f"changes equal settlement transfers exactly ({transferred:.6f} tokens moved)")
        assert ok
