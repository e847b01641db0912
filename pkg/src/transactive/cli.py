"""Command-line entry point.

Exit codes:
    0  success
    2  usage error
    3  non-convergence (coordinator iteration cap or local solver failure)
    4  settlement default (a payer cannot cover its payments)
    5  consensus stall, or a safety violation in a fault drill
    6  invalid scenario, fault script or infeasible household

Every command that takes ``--out`` writes ``status.json`` with the exit code
and message next to its result files.
"""

from __future__ import annotations

import json
import sys
from dataclasses import fields
from pathlib import Path

import click
import yaml

from .chain import ConsensusStall, SettlementDefaultError, run_drill, run_with_chain
from .coordinator import NonConvergenceError
from .energy import ParameterError
from .export import export_outcome
from .ledger import dump_chain
from .local import InfeasibleHouseholdError, SolverFailure, solve_emp
from .net import BEHAVIORS
from .scenario import FaultSpec, SynthTemplate, load_scenario, save_scenario, synth_generate
from .trading import run_trading_day

EXIT_OK = 0
EXIT_NONCONVERGENCE = 3
EXIT_SETTLEMENT = 4
EXIT_STALL = 5
EXIT_INVALID = 6


def _finish(out: Path | None, code: int, message: str, **extra) -> None:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rec = {"exit_code": code, "message": message, **extra}
        (out / "status.json").write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    if code:
        click.echo(f"error: {message}", err=True)
    elif message:
        click.echo(message)
    sys.exit(code)


def _load(path: str, out: Path | None):
    try:
        return load_scenario(path)
    except ParameterError as e:
        _finish(out, EXIT_INVALID, str(e))


@click.group()
def main() -> None:
    """Peer-to-peer energy trading coordinated over a simulated permissioned chain."""


@main.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--no-chain/--with-chain", "no_chain", default=True,
              help="Run the coordinator in-process, or route every report through consensus.")
@click.option("--seed", type=int, default=None, help="Network seed (overrides the scenario's).")
@click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Directory for result files.")
def run(scenario: str, no_chain: bool, seed: int | None, out: str | None) -> None:
    """Run one trading day and export the outcome."""
    outp = Path(out) if out else None
    sc = _load(scenario, outp)
    if seed is not None:
        sc.net.seed = seed
    try:
        if no_chain:
            outcome = run_trading_day(sc)
            chain_run = None
        else:
            chain_run = run_with_chain(sc)
            outcome = chain_run.outcome
    except NonConvergenceError as e:
        _finish(outp, EXIT_NONCONVERGENCE, str(e), phase=e.phase)
    except SolverFailure as e:
        _finish(outp, EXIT_NONCONVERGENCE, str(e))
    except InfeasibleHouseholdError as e:
        _finish(outp, EXIT_INVALID, str(e))
    except SettlementDefaultError as e:
        _finish(outp, EXIT_SETTLEMENT, str(e), account=e.account)
    except ConsensusStall as e:
        _finish(outp, EXIT_STALL, str(e))
    if outp is not None:
        export_outcome(outcome, outp)
        if chain_run is not None:
            (outp / "chain.jsonl").write_text(dump_chain(chain_run.genesis, chain_run.users[0].blocks),
                                              encoding="utf-8")
    et, ep = outcome.clearing_error()
    msg = (f"converged: tcmp {outcome.iterations['tcmp']} it, tbap {outcome.iterations['tbap']} it; "
           f"total cost {outcome.standalone_cost.sum():.4f} -> {outcome.final_cost.sum():.4f} $; "
           f"clearing error {max(et, ep):.2e}")
    _finish(outp, EXIT_OK, msg, iterations=outcome.iterations,
            state_root=None if outcome.chain is None else outcome.chain["state_root"])


@main.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
def baseline(scenario: str, out: str | None) -> None:
    """Standalone (no trading) schedule cost for every user."""
    outp = Path(out) if out else None
    sc = _load(scenario, outp)
    rows = []
    try:
        for u in sc.users:
            _, cost = solve_emp(u.params, u.exo)
            rows.append((u.name, cost))
    except InfeasibleHouseholdError as e:
        _finish(outp, EXIT_INVALID, str(e))
    except SolverFailure as e:
        _finish(outp, EXIT_NONCONVERGENCE, str(e))
    if outp is not None:
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "baseline.csv").write_text("user,standalone_cost\n" + "".join(f"{n},{c!r}\n" for n, c in rows),
                                          encoding="utf-8")
    _finish(outp, EXIT_OK, "\n".join(f"{n}: {c:.6f} $" for n, c in rows))


def _read_faults(path: str) -> list[FaultSpec]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ParameterError(f"{path}: cannot read fault script: {e}") from None
    if isinstance(data, dict):
        data = data.get("faults", [])
    if not isinstance(data, list):
        raise ParameterError(f"{path}: fault script must be a list of faults")
    out = []
    for i, f in enumerate(data):
        if not isinstance(f, dict) or "node" not in f or "behavior" not in f:
            raise ParameterError(f"{path}: fault {i} needs 'node' and 'behavior'")
        if f["behavior"] not in BEHAVIORS:
            raise ParameterError(f"{path}: fault {i} has unknown behavior {f['behavior']!r}")
        out.append(FaultSpec(str(f["node"]), str(f["behavior"]), float(f.get("at", 0.0)),
                             float(f.get("extra_delay", 0.0))))
    return out


@main.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--script", "script", type=click.Path(dir_okay=False), default=None,
              help="YAML list of {node, behavior, at, extra_delay}; defaults to the scenario's faults.")
@click.option("--duration", type=float, default=1000.0, help="Simulated milliseconds.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(file_okay=False), default=None)
def faults(scenario: str, script: str | None, duration: float, seed: int | None, out: str | None) -> None:
    """Consensus fault drill on the scenario's validator set."""
    outp = Path(out) if out else None
    sc = _load(scenario, outp)
    try:
        script_faults = _read_faults(script) if script else list(sc.net.faults)
        names = set(sc.validator_ids())
        for f in script_faults:
            if f.node not in names:
                raise ParameterError(f"fault script references unknown validator {f.node!r}")
        if sc.chain.validators < 4:
            raise ParameterError("fault drills need at least 4 validators")
    except ParameterError as e:
        _finish(outp, EXIT_INVALID, str(e))
    nc = sc.net
    rep = run_drill(sc.chain.validators, script_faults, seed=nc.seed if seed is None else seed, duration=duration,
                    latency=(nc.latency_min, nc.latency_max), drop_prob=nc.drop_prob, partitions=nc.partitions,
                    heartbeat=max(4 * nc.latency_max, 1.0))
    d = rep.to_dict()
    if outp is not None:
        outp.mkdir(parents=True, exist_ok=True)
        (outp / "faults.json").write_text(json.dumps(d, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    msg = (f"heights {min(rep.heights.values())}..{max(rep.heights.values())}, view changes {rep.view_changes}, "
           f"safety violations {rep.safety_violations}" + (" (beyond tolerance)" if rep.beyond_tolerance else ""))
    code = EXIT_STALL if rep.safety_violations and not rep.beyond_tolerance else EXIT_OK
    _finish(outp, code, msg, report=d)


@main.command()
@click.option("--n", "n", type=int, default=10, help="Number of households.")
@click.option("--seed", type=int, default=0)
@click.option("--horizon", type=int, default=None, help="Number of slots (overrides the template).")
@click.option("--template", type=click.Path(dir_okay=False), default=None,
              help="YAML mapping overriding SynthTemplate fields.")
@click.option("--out", "out", type=click.Path(dir_okay=False), required=True, help="Scenario file to write.")
def synth(n: int, seed: int, horizon: int | None, template: str | None, out: str) -> None:
    """Generate a synthetic scenario."""
    try:
        tpl = SynthTemplate()
        if template:
            data = yaml.safe_load(Path(template).read_text(encoding="utf-8")) or {}
            known = {f.name for f in fields(SynthTemplate)}
            for k, v in data.items():
                if k not in known:
                    raise ParameterError(f"{template}: unknown template field {k!r}")
                setattr(tpl, k, tuple(v) if isinstance(v, list) else v)
        if horizon is not None:
            tpl.horizon = horizon
        sc = synth_generate(tpl, seed=seed, n=n)
    except (ParameterError, OSError, yaml.YAMLError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(EXIT_INVALID)
    save_scenario(sc, out)
    click.echo(f"wrote {out} ({n} users, horizon {sc.horizon})")


@main.command("chain-dump")
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None, help="File to write (default stdout).")
def chain_dump(scenario: str, seed: int | None, out: str | None) -> None:
    """Run a trading day over the chain and print every block as line-delimited JSON."""
    sc = _load(scenario, None)
    if seed is not None:
        sc.net.seed = seed
    try:
        r = run_with_chain(sc)
    except NonConvergenceError as e:
        _finish(None, EXIT_NONCONVERGENCE, str(e))
    except SettlementDefaultError as e:
        _finish(None, EXIT_SETTLEMENT, str(e))
    except ConsensusStall as e:
        _finish(None, EXIT_STALL, str(e))
    text = dump_chain(r.genesis, r.users[0].blocks)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    main()
