import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, strategies as st

from outlierbft.consensus import (
    ORDERER,
    VIEW,
    ConsensusMessage,
    Decision,
    MsgKind,
    Outcome,
    PbftState,
    Phase,
    RelayDelta,
    RelaySwitch,
    ToleranceInputs,
    decide_block,
    detector_step,
    f_raw_max,
    on_message,
    pbft_quorum,
    timeout_decision,
    tolerance_bound,
)
from outlierbft.detector import DetectorConfig, train
from outlierbft.errors import ConfigError, DataError
from outlierbft.fusion import DeviceLayout, DeviceReading, denormalize
from outlierbft.ledger import Block, EndorsedTransaction, PeerIdentity, StateDelta, Transaction, TxStatus

from conftest import low_rank

DIGEST = b"\x01" * 32
OTHER = b"\x02" * 32


# --- quorum / relay switch ---------------------------------------------------------

@pytest.mark.parametrize("n,f,q", [(4, 1, 3), (10, 3, 7), (3, 0, 1), (1, 0, 1), (7, 2, 5)])
def test_pbft_quorum(n, f, q):
    assert pbft_quorum(n) == (f, q)


def test_pbft_quorum_needs_a_peer():
    with pytest.raises(ConfigError):
        pbft_quorum(0)


def peers_for(orgs: int, per_org: int = 2):
    return [PeerIdentity(f"p{o}{k}", f"org{o}", "endorsing" if k == 0 else "regular")
            for o in range(orgs) for k in range(per_org)]


@given(st.integers(1, 6), st.sets(st.integers(0, 5)), st.integers(1, 4))
def test_relay_switch_invariants(orgs, excluded, quarantine):
    peers = peers_for(orgs)
    delta = RelayDelta(frozenset(), frozenset(f"org{o}" for o in excluded if o < orgs), frozenset())
    relay = RelaySwitch.open(peers).apply(delta, quarantine)
    for p in peers:
        for q in peers:
            if q.org_id in relay.excluded_orgs:
                assert not relay.trusts(p.peer_id, q.peer_id)
        assert (p.peer_id in relay.trusted(p.peer_id)) == (p.org_id not in relay.excluded_orgs)
    # counters run down to an open switch after `quarantine` blocks
    for _ in range(quarantine):
        relay = relay.advance()
    assert not relay.excluded_orgs
    assert relay.active == {p.peer_id for p in peers}


def test_relay_quarantine_counts_blocks():
    relay = RelaySwitch.open(peers_for(3)).apply(RelayDelta(frozenset(), frozenset({"org1"}), frozenset()), 2)
    assert relay.excluded_orgs == {"org1"}
    relay = relay.advance()
    assert relay.excluded_orgs == {"org1"}
    assert not relay.advance().excluded_orgs
    with pytest.raises(ConfigError):
        relay.apply(RelayDelta(frozenset(), frozenset(), frozenset()), 0)


def test_relay_rejects_reserved_or_duplicate_ids():
    with pytest.raises(ConfigError):
        RelaySwitch.open([PeerIdentity(ORDERER, "o")])
    with pytest.raises(ConfigError):
        RelaySwitch.open([PeerIdentity("a", "o"), PeerIdentity("a", "p")])


# --- a synchronous FIFO driver over on_message ---------------------------------------

def run_fifo(n: int, silent=(), equivocators=(), excluded_orgs=(), learners=()):
    """Deliver every message in FIFO order; returns decisions and states."""
    ids = [f"r{i}" for i in range(n)]
    peers = [PeerIdentity(p, f"org{i}") for i, p in enumerate(ids)]
    relay = RelaySwitch.open(peers).apply(RelayDelta(frozenset(), frozenset(excluded_orgs), frozenset()))
    active = relay.active
    _, q = pbft_quorum(len(active))
    honest = [p for p in ids if p not in silent and p not in equivocators]
    states = {p: PbftState(p, 1, active, q, voter=p in active) for p in honest}
    queue = deque((p, ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, 1, DIGEST, ORDERER)) for p in ids)
    while queue:
        to, msg = queue.popleft()
        if to in equivocators and msg.kind is MsgKind.PRE_PREPARE:
            for kind in (MsgKind.PREPARE, MsgKind.COMMIT):
                for i, r in enumerate(ids):
                    if i % 2:
                        queue.append((r, ConsensusMessage(kind, VIEW, 1, OTHER, to)))
                    queue.append((r, ConsensusMessage(kind, VIEW, 1, DIGEST, to)))
            continue
        if to not in states:
            continue
        _, out = on_message(states[to], msg, relay, 0.0, lambda: (TxStatus.VALID,))
        for m in out:
            queue.extend((r, m) for r in ids)
    decisions = {p: timeout_decision(s) for p, s in states.items()}
    return decisions, states, active


def test_four_honest_commit_same_digest():
    decisions, states, active = run_fifo(4)
    assert all(d.committed and d.digest == DIGEST for d in decisions.values())
    assert decide_block(decisions, active) is Outcome.SUCCESS
    assert all(s.tx_statuses == (TxStatus.VALID,) for s in states.values())


def test_one_silent_of_four_is_tolerated():
    decisions, _, active = run_fifo(4, silent={"r3"})
    assert all(d.committed for d in decisions.values())
    assert decide_block(decisions, [p for p in active if p != "r3"]) is Outcome.SUCCESS


def test_two_silent_of_four_time_out():
    decisions, states, active = run_fifo(4, silent={"r2", "r3"})
    assert all(d.status == "timeout" for d in decisions.values())
    assert all(s.phase is Phase.PRE_PREPARED for s in states.values())
    assert decide_block(decisions, ["r0", "r1"]) is Outcome.CONSENSUS_FAILURE


def test_equivocator_is_recorded_and_ignored():
    decisions, states, _ = run_fifo(4, equivocators={"r3"})
    assert all(d.committed and d.digest == DIGEST for d in decisions.values())
    odd = states["r1"]
    assert "r3" in odd.equivocators[MsgKind.PREPARE]
    assert any(ev[1] == "r3" for ev in odd.evidence)
    assert all("r3" not in s for s in odd.prepare_votes.values())
    assert "r3" in states["r0"].prepare_votes[DIGEST]


def test_excluded_org_contributes_no_votes():
    # r3's org is excluded; it learns the result but never votes and is never counted
    decisions, states, active = run_fifo(4, excluded_orgs={"org3"})
    assert "r3" not in active
    for s in states.values():
        for votes in (s.prepare_votes, s.commit_votes):
            assert all("r3" not in senders for senders in votes.values())
    assert all(d.committed for d in decisions.values())


def test_untrusted_and_stray_messages_are_dropped():
    peers = [PeerIdentity(f"r{i}", f"org{i}") for i in range(4)]
    relay = RelaySwitch.open(peers).apply(RelayDelta(frozenset(), frozenset({"org3"}), frozenset()))
    st_ = PbftState("r0", 1, relay.active, 1)
    on_message(st_, ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, 1, DIGEST, "r1"), relay)
    assert st_.phase is Phase.IDLE
    on_message(st_, ConsensusMessage(MsgKind.PRE_PREPARE, 5, 1, DIGEST, ORDERER), relay)
    on_message(st_, ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, 2, DIGEST, ORDERER), relay)
    assert st_.phase is Phase.IDLE
    on_message(st_, ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, 1, DIGEST, ORDERER), relay)
    assert st_.phase is Phase.PRE_PREPARED
    on_message(st_, ConsensusMessage(MsgKind.PREPARE, VIEW, 1, DIGEST, "r3"), relay)
    assert st_.phase is Phase.PRE_PREPARED and not st_.prepare_votes
    assert any(rec.get("reason") == "untrusted" for rec in st_.log)


def test_duplicate_votes_are_idempotent():
    relay = RelaySwitch.open([PeerIdentity(f"r{i}", f"o{i}") for i in range(4)])
    s = PbftState("r0", 1, relay.active, 3)
    on_message(s, ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, 1, DIGEST, ORDERER), relay)
    for _ in range(5):
        on_message(s, ConsensusMessage(MsgKind.PREPARE, VIEW, 1, DIGEST, "r1"), relay)
    assert s.prepare_votes[DIGEST] == {"r1"}
    assert s.phase is Phase.PRE_PREPARED
    on_message(s, ConsensusMessage(MsgKind.PREPARE, VIEW, 1, DIGEST, "r0"), relay)
    _, out = on_message(s, ConsensusMessage(MsgKind.PREPARE, VIEW, 1, DIGEST, "r2"), relay)
    assert s.phase is Phase.PREPARED
    assert [m.kind for m in out] == [MsgKind.COMMIT]


@given(st.lists(st.tuples(st.sampled_from(list(MsgKind)), st.integers(0, 4), st.booleans()), max_size=60))
def test_phase_only_moves_forward_and_commit_needs_quorum(msgs):
    relay = RelaySwitch.open([PeerIdentity(f"r{i}", f"o{i}") for i in range(5)])
    s = PbftState("r0", 1, relay.active, 3)
    last = s.phase
    for kind, sender, good in msgs:
        name = ORDERER if sender == 4 and kind is MsgKind.PRE_PREPARE else f"r{sender}"
        on_message(s, ConsensusMessage(kind, VIEW, 1, DIGEST if good else OTHER, name), relay)
        assert s.phase >= last
        last = s.phase
        if s.decision is not None:
            assert len(s.commit_votes.get(s.decision.digest, set()) & s.active_set) >= s.quorum


# --- decide_block ----------------------------------------------------------------------

def test_decide_block_outcomes():
    c = Decision("committed", DIGEST, 1.0)
    assert decide_block({"a": c, "b": c}, ["a", "b"]) is Outcome.SUCCESS
    assert decide_block({"a": c, "b": Decision("timeout")}, ["a", "b"]) is Outcome.CONSENSUS_FAILURE
    assert decide_block({"a": c, "b": Decision("committed", OTHER, 1.0)}, ["a", "b"]) is Outcome.SAFETY_VIOLATION
    # a learner that times out does not block success
    assert decide_block({"a": c, "l": Decision("timeout")}, ["a"]) is Outcome.SUCCESS


# --- detector step -----------------------------------------------------------------------

def _block(readings):
    txs = [EndorsedTransaction(Transaction(f"tx-{r.device_id}", f"app-{r.device_id}", r.slot, r),
                               StateDelta(r.device_id, r.values), ()) for r in readings]
    return Block.make(1, b"\0" * 32, sorted(txs, key=lambda t: t.sort_key))


@pytest.fixture(scope="module")
def small_model():
    lay = DeviceLayout.uniform(8, 2)
    D = low_rank(16, 60, 2, seed=9, sigma=0.01)
    return train((lay, D), DetectorConfig(0.05, 0.05))


def test_detector_step_clean_block(small_model):
    m = small_model
    org = {n: f"org{i}" for i, n in enumerate(m.layout.names)}
    x = denormalize(m.span @ np.array([0.5, -1.0]), m.norm_stats)
    blk = _block([DeviceReading(n, 1, v) for n, v in m.layout.split(x).items()])
    rep, delta = detector_step(None, blk, m, org)
    assert not delta.excluded_orgs and not delta.rejected_tx_ids
    assert RelaySwitch.open(peers_for(8)).apply(delta).active == {p.peer_id for p in peers_for(8)}


def test_detector_step_excludes_spiked_org(small_model):
    m = small_model
    org = {n: f"org{i}" for i, n in enumerate(m.layout.names)}
    x = denormalize(m.span @ np.array([0.5, -1.0]), m.norm_stats)
    x[6] += 10 * m.thresholds[6] * m.norm_stats.scale[6]
    blk = _block([DeviceReading(n, 1, v) for n, v in m.layout.split(x).items()])
    rep, delta = detector_step(None, blk, m, org, masked=True)
    assert delta.excluded_orgs == {"org3"}
    assert delta.rejected_tx_ids == {f"tx-{m.layout.names[3]}"}
    relay = RelaySwitch.open(peers_for(8)).apply(delta)
    for p in peers_for(8):
        assert not relay.trusted(p.peer_id) & {"p30", "p31"}


def test_detector_step_rejects_incompatible_block(small_model):
    org = {n: "o" for n in small_model.layout.names}
    with pytest.raises(DataError):
        detector_step(None, _block([DeviceReading("dev00", 1, [1.0, 2.0])]), small_model, org)


# --- tolerance bound ----------------------------------------------------------------------

def test_tolerance_bound_examples():
    f, ok = tolerance_bound(ToleranceInputs(0.5782, 0.46, 0.05))
    assert abs(f - 1 / 3) < 1e-3 and f == pytest.approx(0.5782 * 0.54 + 0.4218 * 0.05, abs=1e-15)
    assert tolerance_bound(ToleranceInputs(0.7, 1.0, 0.0)) == (0.0, True)
    assert tolerance_bound(ToleranceInputs(0.4, 0.0, 0.0))[0] == 0.4
    assert not tolerance_bound(ToleranceInputs(0.4, 0.0, 0.0))[1]


def test_tolerance_inputs_validated():
    for bad in ((-0.1, 0, 0), (0, 1.1, 0), (0, 0, math.nan)):
        with pytest.raises(ConfigError):
            ToleranceInputs(*bad)


def test_f_raw_max_paper_point():
    assert f_raw_max(0.46, 0.05) == pytest.approx(0.5782, abs=1e-4)
    assert f_raw_max(0.0, 0.5) is None
    assert f_raw_max(0.9, 0.2) == 1.0


unit = st.floats(0.0, 1.0)


@given(unit, unit)
def test_f_raw_max_sits_on_the_boundary(p_d, p_fa):
    r = f_raw_max(p_d, p_fa)
    if 1 - p_d - p_fa > 0 and r is not None and r < 1.0:
        assert abs(tolerance_bound(ToleranceInputs(r, p_d, p_fa))[0] - 1 / 3) <= 1e-9
    if r is not None:
        assert tolerance_bound(ToleranceInputs(r, p_d, p_fa))[0] <= 1 / 3 + 1e-9


@given(unit, unit, unit, unit)
def test_tolerance_bound_monotone(f, p_d, p_fa, other):
    base = tolerance_bound(ToleranceInputs(f, p_d, p_fa))[0]
    hi = max(other, f)
    if p_d + p_fa < 1:
        assert tolerance_bound(ToleranceInputs(hi, p_d, p_fa))[0] >= base - 1e-15
    assert tolerance_bound(ToleranceInputs(f, max(other, p_d), p_fa))[0] <= base + 1e-15
    assert tolerance_bound(ToleranceInputs(f, p_d, max(other, p_fa)))[0] >= base - 1e-15
