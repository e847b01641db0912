"""Token accounts, signed transactions, blocks and the replicated state machine
that hosts the trading contract.

Money on the ledger is held in integer micro-tokens (1 token = 1 $). The
contract keeps its own finer fixed-point grid; settlement converts payments
to micro-tokens with a largest-remainder rule so the transferred total is
exact. Account ids are node names; the signer binds each name to its key.
"""

from __future__ import annotations

import hashlib
import hmac
import json
from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .codec import digest, encode
from .coordinator import FIXED_SCALE, SETTLED, ContractRejection, TradingContract, to_fixed
from .scenario import CoordinatorConfig

TOKEN_SCALE = 10**6  # micro-tokens per token
_PER_MICRO = FIXED_SCALE // TOKEN_SCALE

TRANSFER = "transfer"
ENERGY = "energy"


def tokens_to_micro(x: float) -> int:
    """Round half up to whole micro-tokens."""
    return int(np.floor(float(x) * TOKEN_SCALE + 0.5))


# --------------------------------------------------------------------------
# signatures


class Signer(Protocol):
    def sign(self, node: str, data: bytes) -> bytes: ...

    def verify(self, node: str, data: bytes, sig: bytes) -> bool: ...


class HmacSigner:
    """Keyed-hash stand-in for public-key signatures.

    Each node's key is derived from a shared seed and its name, so any party
    holding the signer can verify. Deterministic and fast; a real curve-based
    scheme can replace it behind the same two methods.
    """

    def __init__(self, seed: bytes = b"transactive-demo"):
        self._seed = seed

    def _key(self, node: str) -> bytes:
        return hashlib.sha256(self._seed + b"/" + node.encode()).digest()

    def sign(self, node: str, data: bytes) -> bytes:
        return hmac.new(self._key(node), data, hashlib.sha256).digest()

    def verify(self, node: str, data: bytes, sig: bytes) -> bool:
        return hmac.compare_digest(self.sign(node, data), sig)


# --------------------------------------------------------------------------
# transactions and blocks


@dataclass(eq=False)
class Transaction:
    kind: str  # TRANSFER or ENERGY
    sender: str
    nonce: int
    to: str = ""
    amount: int = 0  # micro-tokens
    phase: str = ""
    iteration: int = 0
    payload: np.ndarray | None = None  # contract fixed-point units
    signature: bytes = b""

    def body(self) -> list:
        payload = None if self.payload is None else np.asarray(self.payload, dtype=np.int64)
        return [self.kind, self.sender, self.nonce, self.to, self.amount, self.phase, self.iteration, payload]

    def signed(self, signer: Signer) -> "Transaction":
        return replace(self, signature=signer.sign(self.sender, encode(self.body())))

    def verify(self, signer: Signer) -> bool:
        return signer.verify(self.sender, encode(self.body()), self.signature)

    def canonical(self) -> list:
        return [self.body(), self.signature]

    @property
    def hash(self) -> str:
        h = self.__dict__.get("_hash")
        if h is None:
            h = self.__dict__["_hash"] = digest(self.canonical())
        return h


def transfer_tx(sender: str, nonce: int, to: str, amount: int) -> Transaction:
    return Transaction(TRANSFER, sender, nonce, to=to, amount=int(amount))


def energy_tx(sender: str, nonce: int, phase: str, iteration: int, payload: np.ndarray) -> Transaction:
    return Transaction(ENERGY, sender, nonce, phase=phase, iteration=int(iteration),
                       payload=np.asarray(payload, dtype=np.int64))


@dataclass(eq=False)
class Block:
    height: int
    view: int
    parent: str
    timestamp: int  # simulated microseconds
    proposer: str
    txs: tuple[Transaction, ...]
    state_root: str
    # commit signatures (validator, view, signature); certify the block, not part of its hash
    qc: tuple = ()

    def header(self) -> list:
        return [self.height, self.view, self.parent, self.timestamp, self.proposer,
                [tx.hash for tx in self.txs], self.state_root]

    @property
    def hash(self) -> str:
        h = self.__dict__.get("_hash")
        if h is None:
            h = self.__dict__["_hash"] = digest(self.header())
        return h

    def with_qc(self, qc) -> "Block":
        b = replace(self, qc=tuple(qc))
        b.__dict__["_hash"] = self.hash
        return b


@dataclass
class Receipt:
    tx_hash: str
    ok: bool
    code: str = "ok"
    detail: str = ""


@dataclass
class Transfer:
    sender: str
    to: str
    amount: int  # micro-tokens


# --------------------------------------------------------------------------
# state


def _decimal(x: float) -> str:
    return repr(float(x))


@dataclass
class Genesis:
    users: list[str]
    validators: list[str]
    horizon: int
    config: CoordinatorConfig
    balances: dict[str, int]
    block_reward: int = 0
    block_capacity: int = 2000

    def canonical(self) -> list:
        c = self.config
        cfg = [c.rho_mode, _decimal(c.rho1), _decimal(c.rho2), _decimal(c.eps1), _decimal(c.eps2),
               c.max_iter_tcmp, c.max_iter_tbap]
        return [list(self.users), list(self.validators), self.horizon, cfg, dict(self.balances),
                self.block_reward, self.block_capacity]

    @property
    def hash(self) -> str:
        return digest(self.canonical())


def block_reward(proposer: str, reward: int) -> dict[str, int]:
    """Balance delta for committing one block."""
    return {proposer: reward} if reward else {}


def settle_payments(payments, names: list[str]) -> list[Transfer]:
    """Token transfers realizing a payment matrix.

    ``payments[i, j] > 0`` means i pays j. Float matrices are in $, integer
    matrices in contract fixed-point units. Each positive entry is floored to
    micro-tokens and the leftover units go to the largest remainders (ties by
    pair order), so the transferred total is the rounded sum of positive
    payments exactly.
    """
    p = np.asarray(payments)
    if p.dtype.kind == "f":
        p = to_fixed(p)
    p = p.astype(np.int64)
    n = len(names)
    if p.shape != (n, n):
        raise ValueError(f"payment matrix shape {p.shape}, expected {(n, n)}")
    pairs = [(i, j, int(p[i, j])) for i in range(n) for j in range(n) if i != j and p[i, j] > 0]
    if not pairs:
        return []
    base = [v // _PER_MICRO for _, _, v in pairs]
    rem = [v % _PER_MICRO for _, _, v in pairs]
    total = (sum(v for _, _, v in pairs) + _PER_MICRO // 2) // _PER_MICRO
    extra = total - sum(base)
    for idx in sorted(range(len(pairs)), key=lambda k: (-rem[k], k))[:extra]:
        base[idx] += 1
    return [Transfer(names[i], names[j], a) for (i, j, _), a in zip(pairs, base) if a > 0]


class SettlementDefault(RuntimeError):
    def __init__(self, account: str, need: int, have: int):
        super().__init__(f"account {account} cannot cover {need} micro-tokens (balance {have})")
        self.account = account


def apply_settlement(balances: dict[str, int], transfers: list[Transfer]) -> dict[str, int]:
    """All transfers or none; raises SettlementDefault naming the first payer short of funds."""
    out = dict(balances)
    for t in transfers:
        if out[t.sender] < t.amount:
            raise SettlementDefault(t.sender, t.amount, out[t.sender])
        out[t.sender] -= t.amount
        out[t.to] += t.amount
    return out


@dataclass
class LedgerState:
    genesis: Genesis
    balances: dict[str, int]
    nonces: dict[str, int]
    contract: TradingContract
    height: int = 0
    tip: str = ""
    settlement: list[Transfer] = field(default_factory=list)
    settlement_status: str = "pending"  # pending | done | default
    defaulted: str = ""
    minted: int = 0

    @classmethod
    def from_genesis(cls, g: Genesis) -> "LedgerState":
        accounts = list(g.users) + list(g.validators)
        if len(set(accounts)) != len(accounts):
            raise ValueError("user and validator names must be distinct")
        balances = {a: int(g.balances.get(a, 0)) for a in accounts}
        return cls(g, balances, {a: 0 for a in accounts}, TradingContract(len(g.users), g.horizon, g.config),
                   tip=g.hash)

    def copy(self) -> "LedgerState":
        return LedgerState(self.genesis, dict(self.balances), dict(self.nonces), self.contract.copy(), self.height,
                           self.tip, list(self.settlement), self.settlement_status, self.defaulted, self.minted)

    def total_tokens(self) -> int:
        return sum(self.balances.values())

    def root(self) -> str:
        return digest([self.genesis.hash, self.height, dict(self.balances), dict(self.nonces),
                       self.contract.canonical(), self.settlement_status, self.defaulted,
                       [[t.sender, t.to, t.amount] for t in self.settlement], self.minted])

    # -- transactions

    def apply(self, tx: Transaction, signer: Signer | None = None) -> Receipt:
        """Execute one transaction in place.

        Bad signatures and wrong nonces change nothing. Any other rejection
        still consumes the nonce.
        """
        if tx.sender not in self.nonces:
            return Receipt(tx.hash, False, "unknown-account", tx.sender)
        if signer is not None and not tx.verify(signer):
            return Receipt(tx.hash, False, "bad-signature")
        want = self.nonces[tx.sender] + 1
        if tx.nonce != want:
            code = "stale-nonce" if tx.nonce < want else "future-nonce"
            return Receipt(tx.hash, False, code, f"nonce {tx.nonce}, expected {want}")
        self.nonces[tx.sender] = want
        if tx.kind == TRANSFER:
            return self._transfer(tx)
        if tx.kind == ENERGY:
            return self._energy(tx)
        return Receipt(tx.hash, False, "bad-kind", tx.kind)

    def _transfer(self, tx: Transaction) -> Receipt:
        if tx.amount <= 0:
            return Receipt(tx.hash, False, "bad-amount", str(tx.amount))
        if tx.to not in self.balances:
            return Receipt(tx.hash, False, "unknown-account", tx.to)
        if self.balances[tx.sender] < tx.amount:
            return Receipt(tx.hash, False, "insufficient-balance",
                           f"{tx.sender} has {self.balances[tx.sender]}, needs {tx.amount}")
        self.balances[tx.sender] -= tx.amount
        self.balances[tx.to] += tx.amount
        return Receipt(tx.hash, True)

    def _energy(self, tx: Transaction) -> Receipt:
        users = self.genesis.users
        if tx.sender not in users:
            return Receipt(tx.hash, False, "unknown-user", tx.sender)
        if tx.payload is None:
            return Receipt(tx.hash, False, "bad-payload", "missing payload")
        try:
            self.contract.submit(users.index(tx.sender), tx.phase, tx.iteration, tx.payload)
        except ContractRejection as e:
            return Receipt(tx.hash, False, e.code, e.detail)
        if self.contract.phase == SETTLED and self.settlement_status == "pending":
            self._settle()
        return Receipt(tx.hash, True)

    def _settle(self) -> None:
        transfers = settle_payments(self.contract.frozen_payments, list(self.genesis.users))
        try:
            self.balances = apply_settlement(self.balances, transfers)
        except SettlementDefault as e:
            self.settlement_status, self.defaulted = "default", e.account
            return
        self.settlement, self.settlement_status = transfers, "done"

    # -- blocks

    def apply_block(self, block: Block, signer: Signer | None = None) -> list[Receipt]:
        """Execute a block in place (no root check); returns per-transaction receipts."""
        receipts = [self.apply(tx, signer) for tx in block.txs]
        for acct, amount in block_reward(block.proposer, self.genesis.block_reward).items():
            self.balances[acct] = self.balances.get(acct, 0) + amount
            self.minted += amount
        self.height = block.height + 1
        self.tip = block.hash
        return receipts


class BlockError(ValueError):
    pass


def check_block_shape(state: LedgerState, block: Block) -> None:
    if block.height != state.height:
        raise BlockError(f"height {block.height}, expected {state.height}")
    if block.parent != state.tip:
        raise BlockError("parent hash does not match the chain tip")
    if len(block.txs) > state.genesis.block_capacity:
        raise BlockError(f"{len(block.txs)} transactions exceed capacity {state.genesis.block_capacity}")


def execute_block(state: LedgerState, block: Block, signer: Signer | None = None) -> tuple[LedgerState, list[Receipt]]:
    """Replay a block on a copy of ``state``; raises BlockError if it does not fit or its root is wrong."""
    check_block_shape(state, block)
    nxt = state.copy()
    receipts = nxt.apply_block(block, signer)
    if nxt.root() != block.state_root:
        raise BlockError(f"state root mismatch at height {block.height}")
    return nxt, receipts


def replay(genesis: Genesis, blocks: list[Block], signer: Signer | None = None) -> LedgerState:
    state = LedgerState.from_genesis(genesis)
    for b in blocks:
        state, _ = execute_block(state, b, signer)
    return state


def _tx_record(tx: Transaction) -> dict:
    rec = {"hash": tx.hash, "kind": tx.kind, "sender": tx.sender, "nonce": tx.nonce}
    if tx.kind == TRANSFER:
        rec.update(to=tx.to, amount=tx.amount)
    else:
        rec.update(phase=tx.phase, iteration=tx.iteration,
                   payload=None if tx.payload is None else np.asarray(tx.payload).tolist())
    return rec


def dump_chain(genesis: Genesis, blocks: list[Block]) -> str:
    """The whole chain as line-delimited JSON: a genesis record then one record per block."""
    lines = [json.dumps({"genesis": genesis.hash, "users": genesis.users, "validators": genesis.validators,
                         "balances": genesis.balances, "block_reward": genesis.block_reward,
                         "block_capacity": genesis.block_capacity}, sort_keys=True)]
    for b in blocks:
        lines.append(json.dumps({
            "height": b.height, "view": b.view, "hash": b.hash, "parent": b.parent, "timestamp": b.timestamp,
            "proposer": b.proposer, "state_root": b.state_root, "txs": [_tx_record(t) for t in b.txs],
            "qc": [[v, w, s.hex()] for v, w, s in b.qc],
        }, sort_keys=True))
    return "\n".join(lines) + "\n"
