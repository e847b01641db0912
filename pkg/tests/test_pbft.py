import pytest

from transactive.chain import run_drill
from transactive.ledger import Genesis, HmacSigner, LedgerState, transfer_tx
from transactive.net import Network
from transactive.pbft import (
    COMMIT,
    PREPARE,
    PRE_PREPARE,
    ConsensusMessage,
    PbftParams,
    TxMessage,
    Validator,
    max_faulty,
    quorum_size,
    signed,
)
from transactive.scenario import CoordinatorConfig, FaultSpec, NetConfig

SIGNER = HmacSigner()


def cluster(n=4, balance=10**9, capacity=2000):
    names = [f"v{i}" for i in range(n)]
    g = Genesis(["load"], names, 1, CoordinatorConfig(), {"load": balance}, block_capacity=capacity)
    net = Network(NetConfig(), record=True)
    vals = [Validator(v, names, LedgerState.from_genesis(g), SIGNER, PbftParams()) for v in names]
    for v in vals:
        net.register(v.name, v)
    return net, vals


def vote(kind, sender, block_hash, view=0, height=0):
    return signed(ConsensusMessage(kind, view, height, sender, block_hash), SIGNER)


def sent(net, sender, kind):
    return [e for e in net.log if e[1] == "send" and e[2] == sender and e[4]["kind"] == kind]


def pre_prepare(net, primary):
    block = primary.build_block(net, [])
    return block, signed(ConsensusMessage(PRE_PREPARE, 0, 0, primary.name, block.hash, block=block), SIGNER)


class TestQuorum:
    @pytest.mark.parametrize("n,f,q", [(4, 1, 3), (7, 2, 5), (10, 3, 7), (1, 0, 1)])
    def test_three_f_plus_one(self, n, f, q):
        assert max_faulty(n) == f and quorum_size(n) == q

    def test_five_validators(self):
        # f = 1, but two quorums of 2f+1 = 3 out of 5 could overlap in one faulty
        # validator; 4 keeps every pair of quorums sharing an honest member
        assert max_faulty(5) == 1 and quorum_size(5) == 4

    @pytest.mark.parametrize("n", range(1, 30))
    def test_quorums_intersect_in_an_honest_validator(self, n):
        q, f = quorum_size(n), max_faulty(n)
        assert 2 * q - n >= f + 1
        assert n - f >= q  # live validators can still form a quorum


class TestVoting:
    def test_three_prepares_emit_commit(self):
        net, (v0, v1, v2, v3) = cluster()
        block, pp = pre_prepare(net, v0)
        v1.on_message(net, "v0", pp)
        assert len(sent(net, "v1", PREPARE)) == 3
        v1.on_message(net, "v2", vote(PREPARE, "v2", block.hash))
        assert sent(net, "v1", COMMIT) == []
        v1.on_message(net, "v3", vote(PREPARE, "v3", block.hash))
        assert len(sent(net, "v1", COMMIT)) == 3

    def test_commit_quorum_executes_block(self):
        net, (v0, v1, v2, v3) = cluster()
        block, pp = pre_prepare(net, v0)
        v1.on_message(net, "v0", pp)
        for s in ("v2", "v3"):
            v1.on_message(net, s, vote(PREPARE, s, block.hash))
            v1.on_message(net, s, vote(COMMIT, s, block.hash))
        assert v1.height == 1 and v1.blocks[0].hash == block.hash
        assert len(v1.blocks[0].qc) == 3

    def test_bad_signature_dropped(self):
        net, (v0, v1, _, _) = cluster()
        _, pp = pre_prepare(net, v0)
        pp.signature = b"x" * 32
        v1.on_message(net, "v0", pp)
        assert v1.stats.invalid_signatures == 1 and sent(net, "v1", PREPARE) == []

    def test_only_primary_pre_prepares(self):
        net, (_, v1, v2, _) = cluster()
        block = v2.build_block(net, [])
        v1.on_message(net, "v2", signed(ConsensusMessage(PRE_PREPARE, 0, 0, "v2", block.hash, block=block), SIGNER))
        assert sent(net, "v1", PREPARE) == []

    def test_second_pre_prepare_recorded_and_ignored(self):
        net, (v0, v1, _, _) = cluster()
        a = v0.build_block(net, [], timestamp=1)
        b = v0.build_block(net, [], timestamp=2)
        for blk in (a, b):
            v1.on_message(net, "v0", signed(ConsensusMessage(PRE_PREPARE, 0, 0, "v0", blk.hash, block=blk), SIGNER))
        assert v1.stats.equivocations == [(0, 0, a.hash, b.hash)]
        assert {e[4]["block"] for e in sent(net, "v1", PREPARE)} == {a.hash[:12]}


class TestPropose:
    def test_only_primary(self):
        net, vals = cluster()
        with pytest.raises(PermissionError):
            vals[1].propose(net)

    def test_idle_primary_waits_for_heartbeat(self):
        net, vals = cluster()
        assert vals[0].propose(net) is None

    def test_block_capacity(self):
        net, vals = cluster()
        v0 = vals[0]
        for k in range(2500):
            v0.on_message(net, "load", TxMessage(transfer_tx("load", k + 1, "v1", 1).signed(SIGNER)))
        picked = v0.select_transactions()
        assert len(picked) == 2000 and [t.nonce for t in picked] == list(range(1, 2001))
        assert len(v0.mempool) - len(picked) == 500
        receipts = v0.state.copy().apply_block(v0.build_block(net, picked))
        assert all(r.ok for r in receipts)

    def test_same_pending_set_same_block(self):
        txs = [transfer_tx("load", k + 1, "v1", 1).signed(SIGNER) for k in range(20)]
        hashes = []
        for order in (txs, txs[::-1]):
            net, vals = cluster()
            for tx in order:
                vals[0].mempool[tx.hash] = (0.0, tx)
            hashes.append(vals[0].build_block(net, vals[0].select_transactions()).hash)
        assert hashes[0] == hashes[1]

    def test_nonce_gap_is_not_work(self):
        net, vals = cluster()
        vals[0].on_message(net, "load", TxMessage(transfer_tx("load", 2, "v1", 1).signed(SIGNER)))
        assert vals[0].select_transactions() == []


class TestViewChange:
    def test_crashed_primary_replaced(self):
        r = run_drill(4, [FaultSpec("v0", "crash", at=0.0)], seed=1, duration=1500)
        live = [v for v in r.views if v != "v0"]
        assert all(r.views[v] == 1 for v in live)
        assert min(r.heights[v] for v in live) >= 10
        assert r.safety_violations == 0

    def test_two_crashes_advance_two_views(self):
        faults = [FaultSpec("v0", "crash", at=0.0), FaultSpec("v1", "crash", at=0.0)]
        r = run_drill(7, faults, seed=2, duration=2000)
        live = [v for v in r.views if v not in ("v0", "v1")]
        assert all(r.views[v] == 2 for v in live)
        assert r.blocks_after_view_change >= 10

    def test_stale_timer_is_a_no_op(self):
        net, vals = cluster()
        v1 = vals[1]
        v1._arm_round_timer(net)
        stale = v1._timer_token - 1
        v1.on_timer(net, ("round", stale))
        assert v1.view == 0 and not v1.in_view_change

    def test_healthy_run_keeps_view(self):
        r = run_drill(4, [], seed=3, duration=800)
        assert set(r.views.values()) == {0} and r.view_changes == 0
        assert min(r.heights.values()) >= 10

    def test_equivocating_primary_is_safe(self):
        r = run_drill(4, [FaultSpec("v0", "equivocate", at=0.0)], seed=4, duration=1500)
        assert r.safety_violations == 0
        assert max(r.heights[v] for v in ("v1", "v2", "v3")) >= 5

    def test_beyond_tolerance_flagged(self):
        faults = [FaultSpec("v0", "crash"), FaultSpec("v1", "crash")]
        assert run_drill(4, faults, seed=0, duration=300).beyond_tolerance
