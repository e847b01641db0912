"""Replicated runtime: households as light nodes, validators running PBFT, and
the trading contract executed inside the ledger state machine.

Light nodes never vote. They apply committed blocks that carry a valid
commit certificate, read their round from their own replica, and submit
signed reports straight to every validator, retransmitting until the
report's nonce is consumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .coordinator import FAILED, NonConvergenceError
from .ledger import (
    Block,
    BlockError,
    Genesis,
    HmacSigner,
    LedgerState,
    Signer,
    energy_tx,
    execute_block,
    tokens_to_micro,
    transfer_tx,
)
from .net import CRASH, EQUIVOCATE, MUTE, Network
from .pbft import BlocksMessage, PbftParams, SyncRequest, TxMessage, Validator, max_faulty, quorum_size, verify_qc
from .scenario import CoordinatorConfig, FaultSpec, NetConfig, Scenario
from .trading import TradingOutcome, UserAgent, build_outcome

DEFAULT_TIME_LIMIT = 3.6e6  # simulated ms


class ConsensusStall(RuntimeError):
    pass


class SettlementDefaultError(RuntimeError):
    def __init__(self, account: str):
        super().__init__(f"settlement aborted: account {account} cannot cover its payments")
        self.account = account


class LightNode:
    """Replica that follows the chain through certified blocks."""

    def __init__(self, name: str, validators: list[str], state: LedgerState, signer: Signer,
                 retransmit: float = 40.0):
        self.name = name
        self.validators = list(validators)
        self.quorum = quorum_size(len(validators))
        self.state = state
        self.signer = signer
        self.retransmit = retransmit
        self.blocks: list[Block] = []
        self._next_sync = 0

    @property
    def height(self) -> int:
        return self.state.height

    def on_message(self, net: Network, src: str, msg) -> None:
        if not isinstance(msg, BlocksMessage):
            return
        progressed = False
        for b in msg.blocks:
            if b.height != self.height:
                continue
            if not verify_qc(b, self.validators, self.signer, self.quorum):
                continue
            try:
                self.state, _ = execute_block(self.state, b, self.signer)
            except BlockError:
                continue
            self.blocks.append(b)
            progressed = True
        if msg.blocks and msg.blocks[-1].height > self.height:
            net.send(self.name, src, SyncRequest(self.height))
        if progressed:
            self.on_progress(net)

    def on_progress(self, net: Network) -> None:
        pass

    def request_sync(self, net: Network) -> None:
        v = self.validators[self._next_sync % len(self.validators)]
        self._next_sync += 1
        net.send(self.name, v, SyncRequest(self.height))

    def on_timer(self, net: Network, tag) -> None:
        pass


class UserNode(LightNode):
    """A household: its optimizer plus a light-node replica."""

    def __init__(self, agent: UserAgent, index: int, validators: list[str], state: LedgerState, signer: Signer,
                 retransmit: float = 40.0):
        super().__init__(agent.name, validators, state, signer, retransmit)
        self.agent = agent
        self.index = index
        self.submitted: dict[tuple[str, int], object] = {}
        self._timer = 0

    @property
    def done(self) -> bool:
        s = self.state
        return s.contract.phase == FAILED or (not s.contract.active and s.settlement_status != "pending")

    def on_start(self, net: Network) -> None:
        self._maybe_report(net)

    def on_progress(self, net: Network) -> None:
        self._maybe_report(net)

    def _maybe_report(self, net: Network) -> None:
        c = self.state.contract
        key = (c.phase, c.k)
        if not c.active or self.index in c.pending or key in self.submitted:
            return
        payload = self.agent.respond(c.view(self.index))
        tx = energy_tx(self.name, self.state.nonces[self.name] + 1, c.phase, c.k, payload).signed(self.signer)
        self.submitted[key] = tx
        self._send(net, tx)

    def _send(self, net: Network, tx) -> None:
        for v in self.validators:
            net.send(self.name, v, TxMessage(tx))
        self._timer += 1
        net.set_timer(self.name, self.retransmit, ("retransmit", self._timer, tx))

    def on_timer(self, net: Network, tag) -> None:
        if tag[0] != "retransmit" or tag[1] != self._timer:
            return
        tx = tag[2]
        if self.state.nonces[self.name] >= tx.nonce:
            return
        self.request_sync(net)
        self._send(net, tx)


class LoadClient(LightNode):
    """Steady stream of small transfers, used to keep blocks non-empty in drills."""

    def __init__(self, name: str, to: str, validators: list[str], state: LedgerState, signer: Signer,
                 interval: float = 10.0, stop: float = float("inf")):
        super().__init__(name, validators, state, signer)
        self.to = to
        self.interval = interval
        self.stop = stop
        self.nonce = 0

    def on_start(self, net: Network) -> None:
        net.set_timer(self.name, self.interval, ("load",))

    def on_timer(self, net: Network, tag) -> None:
        if net.now > self.stop:
            return
        self.nonce += 1
        tx = transfer_tx(self.name, self.nonce, self.to, 1).signed(self.signer)
        for v in self.validators:
            net.send(self.name, v, TxMessage(tx))
        net.set_timer(self.name, self.interval, ("load",))


def safety_violations(validators: list[Validator], exclude: set[str] = frozenset()) -> int:
    """Heights at which two non-excluded validators committed different blocks."""
    seen: dict[int, set[str]] = {}
    for v in validators:
        if v.name in exclude:
            continue
        for b in v.blocks:
            seen.setdefault(b.height, set()).add(b.hash)
    return sum(1 for hashes in seen.values() if len(hashes) > 1)


# --------------------------------------------------------------------------
# trading over the chain


@dataclass
class ChainRun:
    outcome: TradingOutcome | None
    net: Network
    validators: list[Validator]
    users: list[UserNode]
    genesis: Genesis
    status: str

    def committed_blocks(self) -> list[Block]:
        return max((v.blocks for v in self.validators), key=len)

    def summary(self) -> dict:
        ref = self.users[0].state if self.users else self.validators[0].state
        return {
            "heights": {v.name: v.height for v in self.validators},
            "views": {v.name: v.view for v in self.validators},
            "view_changes": max((v.stats.view_changes for v in self.validators), default=0),
            "state_root": ref.root(),
            "genesis": self.genesis.hash,
            "blocks": ref.height,
            "settlement_status": ref.settlement_status,
            "defaulted": ref.defaulted,
            "settlement": [[t.sender, t.to, t.amount] for t in ref.settlement],
            "balances": dict(sorted(ref.balances.items())),
            "tokens_genesis": sum(self.genesis.balances.values()),
            "tokens_final": ref.total_tokens(),
            "minted": ref.minted,
            "safety_violations": safety_violations(self.validators, _byzantine(self.net.config.faults)),
            "sim_time_ms": self.net.now,
            "messages_delivered": self.net.delivered,
            "messages_dropped": self.net.dropped,
        }


def _byzantine(faults: list[FaultSpec]) -> set[str]:
    return {f.node for f in faults if f.behavior == EQUIVOCATE}


def genesis_for(scenario: Scenario) -> Genesis:
    users = [u.name for u in scenario.users]
    validators = scenario.validator_ids()
    bal = {u: tokens_to_micro(scenario.chain.genesis_balance) for u in users}
    return Genesis(users, validators, scenario.horizon, scenario.coordinator, bal,
                   block_reward=tokens_to_micro(scenario.chain.block_reward),
                   block_capacity=scenario.chain.block_capacity)


def build_trading_network(scenario: Scenario, signer: Signer | None = None,
                          record: bool = False) -> tuple[Network, list[Validator], list[UserNode], Genesis]:
    scenario.validate()
    signer = signer or HmacSigner()
    g = genesis_for(scenario)
    nc = scenario.net
    params = PbftParams.for_latency(nc.latency_min, nc.latency_max, scenario.chain.heartbeat)
    net = Network(nc, record=record)
    validators = [Validator(v, g.validators, LedgerState.from_genesis(g), signer, params, tuple(g.users))
                  for v in g.validators]
    users = [UserNode(UserAgent(u, scenario.n_users), i, g.validators, LedgerState.from_genesis(g), signer,
                      retransmit=2 * params.timeout_base + params.batch_delay)
             for i, u in enumerate(scenario.users)]
    for node in [*validators, *users]:
        net.register(node.name, node)
    return net, validators, users, g


def run_with_chain(scenario: Scenario, signer: Signer | None = None, record: bool = False,
                   time_limit: float = DEFAULT_TIME_LIMIT) -> ChainRun:
    """Both trading phases and settlement, every report and update going through consensus."""
    net, validators, users, g = build_trading_network(scenario, signer, record)
    res = net.run_until(lambda: all(u.done for u in users), time_limit=time_limit)
    run = ChainRun(None, net, validators, users, g, res.status)
    if res.status != "condition":
        raise ConsensusStall(f"chain stopped ({res.status}) at t={res.time:.1f} ms, "
                             f"heights {[v.height for v in validators]}")
    state = users[0].state
    if state.contract.phase == FAILED:
        raise NonConvergenceError(state.contract.failed_phase(), state.contract.trace)
    if state.settlement_status == "default":
        raise SettlementDefaultError(state.defaulted)
    run.outcome = build_outcome([u.agent for u in users], state.contract)
    run.outcome.chain = run.summary()
    return run


# --------------------------------------------------------------------------
# consensus fault drills


@dataclass
class DrillReport:
    n: int
    f: int
    faults: list[FaultSpec]
    heights: dict[str, int]
    views: dict[str, int]
    view_changes: int
    safety_violations: int
    equivocations_seen: int
    beyond_tolerance: bool
    blocks_after_view_change: int
    status: str
    log: str = field(default="", repr=False)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "f": self.f,
            "faults": [[x.node, x.behavior, x.at, x.extra_delay] for x in self.faults],
            "heights": self.heights, "views": self.views, "view_changes": self.view_changes,
            "safety_violations": self.safety_violations, "equivocations_seen": self.equivocations_seen,
            "beyond_tolerance": self.beyond_tolerance, "blocks_after_view_change": self.blocks_after_view_change,
            "status": self.status,
        }


def run_drill(n: int = 4, faults: list[FaultSpec] | None = None, seed: int = 0, duration: float = 1000.0,
              latency: tuple[float, float] = (5.0, 5.0), drop_prob: float = 0.0, heartbeat: float = 20.0,
              load_interval: float | None = 10.0, partitions=None, record: bool = False,
              quorum: int | None = None) -> DrillReport:
    """Run validators (and optionally a transfer load) under a fault script for ``duration`` ms."""
    faults = list(faults or [])
    names = [f"v{i}" for i in range(n)]
    cfg = NetConfig(seed=seed, latency_min=latency[0], latency_max=latency[1], drop_prob=drop_prob,
                    partitions=list(partitions or []), faults=faults)
    signer = HmacSigner()
    clients = ["load"] if load_interval else []
    g = Genesis(["load"], names, 1, CoordinatorConfig(), {"load": 10**12})
    params = PbftParams.for_latency(*latency, heartbeat=heartbeat)
    net = Network(cfg, record=record)
    vals = [Validator(v, names, LedgerState.from_genesis(g), signer, params, quorum=quorum) for v in names]
    for v in vals:
        net.register(v.name, v)
    for c in clients:
        net.register(c, LoadClient(c, names[0], names, LedgerState.from_genesis(g), signer, load_interval,
                                   stop=duration - 10 * params.timeout_base))
    res = net.run_until(time_limit=duration)
    excluded = _byzantine(faults)
    faulty = {x.node for x in faults if x.behavior in (CRASH, MUTE, EQUIVOCATE)}
    live = [v for v in vals if v.name not in faulty]
    after = 0
    if live:
        ref = max(live, key=lambda v: v.height)
        if ref.view_entered:
            last = ref.view_entered[-1]
            after = sum(1 for (_, _, t) in ref.commit_log if t > last)
    return DrillReport(
        n=n, f=max_faulty(n), faults=faults,
        heights={v.name: v.height for v in vals},
        views={v.name: v.view for v in vals},
        view_changes=max((v.view for v in live), default=0),
        safety_violations=safety_violations(vals, excluded),
        equivocations_seen=sum(len(v.stats.equivocations) for v in vals if v.name not in excluded),
        beyond_tolerance=len(faulty) > max_faulty(n),
        blocks_after_view_change=after,
        status=res.status,
        log=net.export_log() if record else "",
    )
