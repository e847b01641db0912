"""PBFT-style replication of the ledger among validators.

Three phases per height (pre-prepare, prepare, commit), a round-robin primary
``validators[view % n]``, and a timeout-driven view change that carries the
highest prepared certificate into the next view. The chain height is the
sequence number; there is no checkpointing.

Committed blocks carry a quorum certificate (the commit signatures), which is
what lagging validators and light nodes check before applying a block they
did not vote on themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import encode
from .ledger import Block, BlockError, LedgerState, Signer, Transaction, execute_block
from .net import EQUIVOCATE, Network

PRE_PREPARE = "pre-prepare"
PREPARE = "prepare"
COMMIT = "commit"
VIEW_CHANGE = "view-change"
NEW_VIEW = "new-view"

SYNC_BATCH = 64


def max_faulty(n: int) -> int:
    return (n - 1) // 3


def quorum_size(n: int) -> int:
    """Smallest vote count such that any two quorums share more than f validators.

    Equals 2f+1 when n = 3f+1; for other n (e.g. 5) it is larger, since two
    sets of 2f+1 could then overlap in only f members.
    """
    f = max_faulty(n)
    return (n + f + 2) // 2


def statement(kind: str, view: int, height: int, sender: str, block_hash: str) -> bytes:
    return encode([kind, view, height, sender, block_hash])


@dataclass(frozen=True)
class PreparedCert:
    block: Block
    view: int
    votes: tuple  # ((sender, signature), ...) over PREPARE statements

    def valid(self, validators: list[str], signer: Signer, quorum: int) -> bool:
        return _votes_valid(PREPARE, self.view, self.block.height, self.block.hash, self.votes, validators,
                            signer, quorum)


def _votes_valid(kind, view, height, block_hash, votes, validators, signer, quorum) -> bool:
    seen = set()
    for sender, sig in votes:
        if sender in seen or sender not in validators:
            return False
        if not signer.verify(sender, statement(kind, view, height, sender, block_hash), sig):
            return False
        seen.add(sender)
    return len(seen) >= quorum


def verify_qc(block: Block, validators: list[str], signer: Signer, quorum: int) -> bool:
    """Commit certificate check: a quorum of distinct validators, one view, valid signatures."""
    if not block.qc:
        return False
    views = {v for _, v, _ in block.qc}
    if len(views) != 1:
        return False
    (view,) = views
    return _votes_valid(COMMIT, view, block.height, block.hash, [(s, g) for s, _, g in block.qc], validators,
                        signer, quorum)


@dataclass(eq=False)
class ConsensusMessage:
    kind: str
    view: int
    height: int
    sender: str
    block_hash: str = ""
    block: Block | None = None  # pre-prepare; new-view re-proposal
    prepared: PreparedCert | None = None  # view-change
    committed: Block | None = None  # view-change: sender's latest committed block with certificate
    proofs: tuple = ()  # new-view: the view-change messages justifying it
    signature: bytes = b""

    def body(self) -> bytes:
        if self.kind in (PREPARE, COMMIT, PRE_PREPARE):
            return statement(self.kind, self.view, self.height, self.sender, self.block_hash)
        extra = [
            None if self.prepared is None else [self.prepared.block.hash, self.prepared.view],
            None if self.committed is None else self.committed.hash,
            [p.signature for p in self.proofs],
        ]
        return encode([self.kind, self.view, self.height, self.sender, self.block_hash, extra])

    def describe(self) -> dict:
        return {"kind": self.kind, "view": self.view, "height": self.height, "sender": self.sender,
                "block": self.block_hash[:12]}


def signed(msg: ConsensusMessage, signer: Signer) -> ConsensusMessage:
    msg.signature = signer.sign(msg.sender, msg.body())
    return msg


@dataclass(eq=False)
class TxMessage:
    tx: Transaction

    def describe(self) -> dict:
        return {"kind": "tx", "sender": self.tx.sender, "nonce": self.tx.nonce, "hash": self.tx.hash[:12]}


@dataclass(eq=False)
class BlocksMessage:
    """Committed blocks with certificates, pushed to light nodes or sent on request."""

    blocks: tuple

    def describe(self) -> dict:
        return {"kind": "blocks", "heights": [b.height for b in self.blocks]}


@dataclass(eq=False)
class SyncRequest:
    height: int

    def describe(self) -> dict:
        return {"kind": "sync", "height": self.height}


@dataclass
class PbftParams:
    timeout_base: float = 20.0  # ms; 4x the mean one-way delay by default
    batch_delay: float = 5.0
    heartbeat: float = 1000.0
    max_backoff: int = 16

    @classmethod
    def for_latency(cls, latency_min: float, latency_max: float, heartbeat: float = 1000.0) -> "PbftParams":
        mean = 0.5 * (latency_min + latency_max)
        return cls(timeout_base=max(4.0 * mean, 1.0), batch_delay=max(latency_max, 0.5), heartbeat=heartbeat)


@dataclass
class ValidatorStats:
    view_changes: int = 0
    invalid_signatures: int = 0
    equivocations: list = field(default_factory=list)
    stale_dropped: int = 0


class Validator:
    def __init__(self, name: str, validators: list[str], state: LedgerState, signer: Signer,
                 params: PbftParams | None = None, light_nodes: tuple[str, ...] = (), quorum: int | None = None):
        if name not in validators:
            raise ValueError(f"{name} is not in the validator set")
        self.name = name
        self.validators = list(validators)
        self.n = len(validators)
        self.f = max_faulty(self.n)
        self.quorum = quorum if quorum is not None else quorum_size(self.n)
        self.state = state
        self.signer = signer
        self.params = params or PbftParams()
        self.light_nodes = tuple(light_nodes)
        self.blocks: list[Block] = []
        self.view = 0
        self.in_view_change = False
        self.vc_target = 0
        self.backoff = 0
        self.stats = ValidatorStats()
        self.mempool: dict[str, tuple[float, Transaction]] = {}
        self._arrivals: dict[tuple[str, int], float] = {}  # (sender, nonce) -> first arrival
        self._accepted: dict[tuple[int, int], Block] = {}
        self._executed: dict[str, LedgerState] = {}
        self._prepares: dict[tuple, dict[str, bytes]] = {}
        self._commits: dict[tuple, dict[str, bytes]] = {}
        self._voted: set[tuple] = set()
        self._prepared: PreparedCert | None = None
        self._vcs: dict[int, dict[str, ConsensusMessage]] = {}
        self._new_view_sent: set[int] = set()
        self._pending_new_view: ConsensusMessage | None = None
        self._future: list[tuple[str, ConsensusMessage]] = []
        self._timer_token = 0
        self._batch_armed: tuple | None = None
        self._last_commit_time = 0.0
        self._synced_from: set[tuple[str, int]] = set()
        self.commit_log: list[tuple[int, str, float]] = []  # (height, hash, time)
        self.view_entered: list[float] = []

    # -- helpers

    @property
    def height(self) -> int:
        return self.state.height

    def primary(self, view: int) -> str:
        return self.validators[view % self.n]

    def is_primary(self) -> bool:
        return self.primary(self.view) == self.name and not self.in_view_change

    def equivocating(self, net: Network) -> bool:
        f = net.fault(self.name)
        return f is not None and f.behavior == EQUIVOCATE

    def _sign(self, msg: ConsensusMessage) -> ConsensusMessage:
        return signed(msg, self.signer)

    def _broadcast(self, net: Network, msg: ConsensusMessage) -> None:
        net.broadcast(self.name, self.validators, msg)
        self._handle(net, self.name, msg)

    def _has_work(self) -> bool:
        return self._ready_since() is not None or any(h == self.height for (_, h) in self._accepted)

    def _ready_since(self) -> float | None:
        """Arrival of the earliest transaction that could go into the next block."""
        ready = [self._arrivals.get((s, n + 1)) for s, n in self.state.nonces.items()]
        return min((t for t in ready if t is not None), default=None)

    # -- timers

    def on_start(self, net: Network) -> None:
        self._last_commit_time = net.now
        self._arm_round_timer(net)
        self._schedule_proposal(net)

    def _arm_round_timer(self, net: Network) -> None:
        self._timer_token += 1
        p = self.params
        wait = p.timeout_base * (2 ** min(self.backoff, p.max_backoff))
        if not self._has_work() and not self.in_view_change:
            wait += p.heartbeat
        net.set_timer(self.name, p.batch_delay + wait, ("round", self._timer_token))

    def _schedule_proposal(self, net: Network) -> None:
        if not self.is_primary() or (self.view, self.height) in self._accepted:
            return
        # transactions stuck behind a nonce gap do not count as work
        oldest = self._ready_since()
        if oldest is not None:
            at = max(net.now, oldest + self.params.batch_delay)
        else:
            at = max(net.now, self._last_commit_time + self.params.heartbeat)
        key = (self.view, self.height, at)
        if self._batch_armed == key:
            return
        self._batch_armed = key
        net.set_timer(self.name, at - net.now, ("propose", self.view, self.height))

    def on_timer(self, net: Network, tag) -> None:
        if tag[0] == "round":
            if tag[1] == self._timer_token:
                self._on_timeout(net)
        elif tag[0] == "propose":
            _, view, height = tag
            if view == self.view and height == self.height and self.is_primary():
                self._batch_armed = None
                self.propose(net)

    def _on_timeout(self, net: Network) -> None:
        target = (self.vc_target if self.in_view_change else self.view) + 1
        self.backoff += 1
        self._start_view_change(net, target)

    # -- proposing

    def select_transactions(self) -> list[Transaction]:
        """Pending transactions in arrival-then-hash order, keeping each sender's nonces contiguous."""
        order = sorted(self.mempool.values(), key=lambda e: (e[0], e[1].hash))
        by_sender: dict[str, list[Transaction]] = {}
        for _, tx in order:
            by_sender.setdefault(tx.sender, []).append(tx)
        runs: dict[str, list[Transaction]] = {}
        for sender, txs in by_sender.items():
            nxt = self.state.nonces.get(sender, 0) + 1
            run = runs[sender] = []
            for tx in sorted(txs, key=lambda t: (t.nonce, t.hash)):
                if tx.nonce == nxt:
                    run.append(tx)
                    nxt += 1
        usable = {tx.hash for run in runs.values() for tx in run}
        # a sender's slots keep their place in arrival order but are filled in nonce order
        picked = []
        for _, tx in order:
            if tx.hash in usable:
                picked.append(runs[tx.sender].pop(0))
        return picked[: self.state.genesis.block_capacity]

    def build_block(self, net: Network, txs: list[Transaction], timestamp: int | None = None) -> Block:
        ts = int(round(net.now * 1000)) if timestamp is None else timestamp
        draft = Block(self.height, self.view, self.state.tip, ts, self.name, tuple(txs), "")
        nxt = self.state.copy()
        nxt.apply_block(draft, self.signer)
        return Block(self.height, self.view, self.state.tip, ts, self.name, tuple(txs), nxt.root())

    def propose(self, net: Network) -> ConsensusMessage | None:
        if not self.is_primary():
            raise PermissionError(f"{self.name} is not the primary of view {self.view}")
        if (self.view, self.height) in self._accepted:
            return None
        txs = self.select_transactions()
        if not txs and net.now < self._last_commit_time + self.params.heartbeat:
            self._schedule_proposal(net)
            return None
        block = self.build_block(net, txs)
        msg = self._sign(ConsensusMessage(PRE_PREPARE, self.view, self.height, self.name, block.hash, block=block))
        if self.equivocating(net):
            twin = self.build_block(net, txs, timestamp=block.timestamp + 1)
            other = self._sign(ConsensusMessage(PRE_PREPARE, self.view, self.height, self.name, twin.hash,
                                                block=twin))
            peers = [v for v in self.validators if v != self.name]
            for i, v in enumerate(peers):
                net.send(self.name, v, msg if i % 2 == 0 else other)
            self._handle(net, self.name, msg)
            return msg
        self._broadcast(net, msg)
        return msg

    # -- message handling

    def on_message(self, net: Network, src: str, msg) -> None:
        if isinstance(msg, TxMessage):
            self._on_tx(net, msg.tx)
        elif isinstance(msg, SyncRequest):
            self._on_sync_request(net, src, msg.height)
        elif isinstance(msg, BlocksMessage):
            self._on_blocks(net, msg.blocks)
        elif isinstance(msg, ConsensusMessage):
            if msg.sender not in self.validators or msg.sender != src or \
                    not self.signer.verify(msg.sender, msg.body(), msg.signature):
                self.stats.invalid_signatures += 1
                return
            self._handle(net, src, msg)

    def _on_tx(self, net: Network, tx: Transaction) -> None:
        if tx.hash in self.mempool or tx.sender not in self.state.nonces:
            return
        if tx.nonce <= self.state.nonces[tx.sender] or not tx.verify(self.signer):
            return
        had_work = self._has_work()
        self.mempool[tx.hash] = (net.now, tx)
        self._arrivals.setdefault((tx.sender, tx.nonce), net.now)
        if not had_work:
            self._arm_round_timer(net)
        self._schedule_proposal(net)

    def _on_sync_request(self, net: Network, src: str, height: int) -> None:
        if 0 <= height < len(self.blocks):
            net.send(self.name, src, BlocksMessage(tuple(self.blocks[height:height + SYNC_BATCH])))

    def _on_blocks(self, net: Network, blocks) -> None:
        progressed = False
        for b in blocks:
            if b.height == self.height and verify_qc(b, self.validators, self.signer, self.quorum):
                try:
                    nxt = self._executed.get(b.hash) or execute_block(self.state, b, self.signer)[0]
                except BlockError:
                    return
                self._finish_commit(net, b, nxt)
                progressed = True
        if progressed:
            self._after_progress(net)

    def _handle(self, net: Network, src: str, msg: ConsensusMessage) -> None:
        if msg.kind in (PRE_PREPARE, PREPARE, COMMIT) and self.equivocating(net):
            # a faulty replica backs every block it hears about, whatever its own state
            self._send_vote(net, PREPARE, msg.view, msg.height, msg.block_hash)
            self._send_vote(net, COMMIT, msg.view, msg.height, msg.block_hash)
        if msg.kind == VIEW_CHANGE:
            self._on_view_change(net, msg)
            return
        if msg.kind == NEW_VIEW:
            self._on_new_view(net, msg)
            return
        if msg.height < self.height:
            self.stats.stale_dropped += 1
            self._help_laggard(net, msg.sender, msg.height)
            return
        if msg.height > self.height or msg.view > self.view or self.in_view_change:
            if msg.view >= self.view:
                self._future.append((src, msg))
            if msg.height > self.height and (msg.sender, self.height) not in self._synced_from:
                self._synced_from.add((msg.sender, self.height))
                net.send(self.name, msg.sender, SyncRequest(self.height))
            return
        if msg.view < self.view:
            return
        if msg.kind == PRE_PREPARE:
            self._on_pre_prepare(net, msg)
        elif msg.kind == PREPARE:
            self._on_vote(net, msg, self._prepares)
        elif msg.kind == COMMIT:
            self._on_vote(net, msg, self._commits)

    def _help_laggard(self, net: Network, who: str, height: int) -> None:
        if who != self.name and (who, -height - 1) not in self._synced_from and height < len(self.blocks):
            self._synced_from.add((who, -height - 1))
            net.send(self.name, who, BlocksMessage(tuple(self.blocks[height:height + SYNC_BATCH])))

    def _on_pre_prepare(self, net: Network, msg: ConsensusMessage) -> None:
        if msg.sender != self.primary(msg.view) or msg.block is None or msg.block.hash != msg.block_hash:
            return
        if msg.block.view != msg.view or msg.block.proposer != msg.sender:
            return
        self._accept(net, msg.view, msg.block)

    def _accept(self, net: Network, view: int, block: Block) -> bool:
        key = (view, block.height)
        prior = self._accepted.get(key)
        if prior is not None:
            if prior.hash != block.hash:
                self.stats.equivocations.append((view, block.height, prior.hash, block.hash))
            return False
        try:
            nxt, _ = execute_block(self.state, block, self.signer)
        except BlockError:
            return False
        self._accepted[key] = block
        self._executed[block.hash] = nxt
        self._arm_round_timer(net)  # each phase gets its own allowance
        self._send_vote(net, PREPARE, view, block.height, block.hash)
        self._check_prepared(net, view, block.height, block.hash)
        self._check_committed(net, view, block.height, block.hash)
        return True

    def _send_vote(self, net: Network, kind: str, view: int, height: int, block_hash: str) -> None:
        key = (kind, view, height, block_hash)
        if key in self._voted:
            return
        if not self.equivocating(net) and any(k[:3] == (kind, view, height) for k in self._voted):
            return
        self._voted.add(key)
        self._broadcast(net, self._sign(ConsensusMessage(kind, view, height, self.name, block_hash)))

    def _on_vote(self, net: Network, msg: ConsensusMessage, tally: dict) -> None:
        key = (msg.view, msg.height, msg.block_hash)
        tally.setdefault(key, {})[msg.sender] = msg.signature
        if msg.kind == PREPARE:
            self._check_prepared(net, *key)
        self._check_committed(net, *key)

    def _check_prepared(self, net: Network, view: int, height: int, block_hash: str) -> None:
        block = self._accepted.get((view, height))
        votes = self._prepares.get((view, height, block_hash), {})
        if block is None or block.hash != block_hash or len(votes) < self.quorum:
            return
        if self._prepared is None or self._prepared.block.height != height or self._prepared.view < view:
            self._prepared = PreparedCert(block, view, tuple(sorted(votes.items())))
            self._arm_round_timer(net)
        self._send_vote(net, COMMIT, view, height, block_hash)

    def _check_committed(self, net: Network, view: int, height: int, block_hash: str) -> None:
        if height != self.height:
            return
        votes = self._commits.get((view, height, block_hash), {})
        block = self._accepted.get((view, height))
        if block is None and self._prepared is not None and self._prepared.block.hash == block_hash:
            block = self._prepared.block
        if block is None or block.hash != block_hash or len(votes) < self.quorum:
            return
        qc = tuple((s, view, g) for s, g in sorted(votes.items()))
        nxt = self._executed.get(block_hash) or execute_block(self.state, block, self.signer)[0]
        self._finish_commit(net, block.with_qc(qc), nxt)
        self._after_progress(net)

    def _finish_commit(self, net: Network, block: Block, nxt: LedgerState) -> None:
        self.state = nxt
        self.blocks.append(block)
        self.commit_log.append((block.height, block.hash, net.now))
        included = {tx.hash for tx in block.txs}
        self.mempool = {h: e for h, e in self.mempool.items()
                        if h not in included and e[1].nonce > self.state.nonces.get(e[1].sender, 0)}
        nonces = self.state.nonces
        self._arrivals = {k: t for k, t in self._arrivals.items() if k[1] > nonces.get(k[0], 0)}
        self._accepted = {k: b for k, b in self._accepted.items() if k[1] >= self.height}
        self._executed = {b.hash: self._executed[b.hash] for b in self._accepted.values() if b.hash in self._executed}
        if self._prepared is not None and self._prepared.block.height < self.height:
            self._prepared = None
        self._last_commit_time = net.now
        self.backoff = 0
        for ln in self.light_nodes:
            net.send(self.name, ln, BlocksMessage((block,)))

    def _after_progress(self, net: Network) -> None:
        h = self.height
        for d in (self._prepares, self._commits):
            for k in [k for k in d if k[1] < h]:
                del d[k]
        self._voted = {k for k in self._voted if k[2] >= h}
        self._arm_round_timer(net)
        if self._pending_new_view is not None:
            nv, self._pending_new_view = self._pending_new_view, None
            self._on_new_view(net, nv)
        self._drain_future(net)
        self._schedule_proposal(net)
        self._maybe_new_view(net, self.vc_target)

    def _drain_future(self, net: Network) -> None:
        pending, self._future = self._future, []
        for src, msg in pending:
            if msg.height < self.height or msg.view < self.view:
                continue
            self._handle(net, src, msg)

    # -- view change

    def _start_view_change(self, net: Network, target: int) -> None:
        if target <= self.view or (self.in_view_change and target <= self.vc_target):
            return
        self.in_view_change = True
        self.vc_target = target
        committed = self.blocks[-1] if self.blocks else None
        msg = self._sign(ConsensusMessage(VIEW_CHANGE, target, self.height, self.name, prepared=self._prepared,
                                          committed=committed))
        self._arm_round_timer(net)
        self._broadcast(net, msg)

    def _valid_view_change(self, msg: ConsensusMessage) -> bool:
        if msg.prepared is not None:
            if msg.prepared.block.height != msg.height or not msg.prepared.valid(self.validators, self.signer,
                                                                                 self.quorum):
                return False
        if msg.committed is not None:
            if msg.committed.height != msg.height - 1 or not verify_qc(msg.committed, self.validators, self.signer,
                                                                        self.quorum):
                return False
        return True

    def _on_view_change(self, net: Network, msg: ConsensusMessage) -> None:
        if msg.view <= self.view or not self._valid_view_change(msg):
            return
        if msg.committed is not None and msg.committed.height == self.height:
            self._on_blocks(net, (msg.committed,))
        elif msg.height > self.height and (msg.sender, self.height) not in self._synced_from:
            self._synced_from.add((msg.sender, self.height))
            net.send(self.name, msg.sender, SyncRequest(self.height))
        self._vcs.setdefault(msg.view, {})[msg.sender] = msg
        # join once f+1 validators want a view beyond ours
        current = self.vc_target if self.in_view_change else self.view
        higher = sorted({v for v, d in self._vcs.items() if v > current for _ in d})
        for v in higher:
            support = {s for w, d in self._vcs.items() if w >= v for s in d}
            if len(support) >= self.f + 1:
                self._start_view_change(net, v)
        self._maybe_new_view(net, msg.view)

    @staticmethod
    def _choose(proofs) -> tuple[int, Block | None]:
        """Height to resume at and the block to re-propose there, if any."""
        height = max(p.height for p in proofs)
        best: PreparedCert | None = None
        for p in proofs:
            c = p.prepared
            if p.height == height and c is not None and (best is None or c.view > best.view):
                best = c
        return height, None if best is None else best.block

    def _maybe_new_view(self, net: Network, view: int) -> None:
        if view in self._new_view_sent or self.primary(view) != self.name or view <= self.view:
            return
        vcs = self._vcs.get(view, {})
        if len(vcs) < self.quorum:
            return
        proofs = tuple(vcs[s] for s in sorted(vcs))
        height, block = self._choose(proofs)
        if self.height < height:
            return  # catch up first; retried after progress
        self._new_view_sent.add(view)
        msg = self._sign(ConsensusMessage(NEW_VIEW, view, height, self.name, "" if block is None else block.hash,
                                          block=block, proofs=proofs))
        self._broadcast(net, msg)

    def _on_new_view(self, net: Network, msg: ConsensusMessage) -> None:
        if msg.view <= self.view or msg.sender != self.primary(msg.view):
            return
        proofs = msg.proofs
        senders = {p.sender for p in proofs}
        if len(senders) != len(proofs) or len(senders) < self.quorum:
            return
        for p in proofs:
            if p.kind != VIEW_CHANGE or p.view != msg.view or p.sender not in self.validators:
                return
            if not self.signer.verify(p.sender, p.body(), p.signature) or not self._valid_view_change(p):
                return
        height, block = self._choose(proofs)
        if height != msg.height or (block.hash if block is not None else "") != msg.block_hash:
            return
        if self.height < height:
            self._pending_new_view = msg
            if (msg.sender, self.height) not in self._synced_from:
                self._synced_from.add((msg.sender, self.height))
                net.send(self.name, msg.sender, SyncRequest(self.height))
            return
        self.view = msg.view
        self.in_view_change = False
        self.vc_target = msg.view
        self.stats.view_changes += 1
        self.view_entered.append(net.now)
        self._vcs = {v: d for v, d in self._vcs.items() if v > self.view}
        self._accepted = {k: b for k, b in self._accepted.items() if k[0] >= self.view}
        self._arm_round_timer(net)
        if block is not None and block.height == self.height:
            # re-proposal keeps the block exactly as prepared, including its original view field
            self._accepted.pop((self.view, self.height), None)
            self._accept(net, self.view, block)
        self._drain_future(net)
        self._schedule_proposal(net)
