"""Two-step consensus: detector-driven peer exclusion, then single-view PBFT.

Step 1 (:func:`detector_step`) fuses the block's readings, runs the outlier
detector and turns flagged devices into excluded organizations on the relay
switch.  Step 2 is three-phase PBFT among the remaining peers with the
orderer as fixed primary; :func:`on_message` is the per-replica transition
function driven by the simulator's event loop.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .detector import DetectorModel, OutlierReport, detect
from .errors import ConfigError, DataError
from .fusion import fuse
from .ledger import Block, PeerIdentity, TxStatus

ORDERER = "orderer"
VIEW = 0


def pbft_quorum(active_count: int) -> tuple[int, int]:
    """``(f, quorum)`` for ``active_count`` participating replicas."""
    if active_count < 1:
        raise ConfigError("PBFT needs at least one active peer")
    f = (active_count - 1) // 3
    return f, 2 * f + 1


# --- relay switch --------------------------------------------------------------

@dataclass(frozen=True)
class RelayDelta:
    flagged_devices: frozenset[str]
    excluded_orgs: frozenset[str]
    rejected_tx_ids: frozenset[str]


@dataclass(frozen=True)
class RelaySwitch:
    """Per-peer trusted sets for the current block."""

    peers: tuple[PeerIdentity, ...]
    excluded_orgs: frozenset[str] = frozenset()
    quarantine: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        ids = [p.peer_id for p in self.peers]
        if len(set(ids)) != len(ids):
            raise ConfigError("peer ids must be unique")
        if ORDERER in ids:
            raise ConfigError(f"{ORDERER!r} is reserved for the orderer")
        active = frozenset(p.peer_id for p in self.peers if p.org_id not in self.excluded_orgs)
        object.__setattr__(self, "_active", active)

    @classmethod
    def open(cls, peers: Iterable[PeerIdentity]) -> "RelaySwitch":
        return cls(tuple(peers))

    @property
    def active(self) -> frozenset[str]:
        return self._active

    def trusted(self, peer_id: str) -> frozenset[str]:
        # an excluded peer still trusts the active set so it can learn the outcome
        return self._active

    def trusts(self, receiver: str, sender: str) -> bool:
        return sender == ORDERER or sender in self._active

    def apply(self, delta: RelayDelta, quarantine: int = 1) -> "RelaySwitch":
        """Exclude the delta's organizations for ``quarantine`` blocks, this one included."""
        if quarantine < 1:
            raise ConfigError("quarantine must be at least 1 (the current block)")
        q = dict(self.quarantine)
        for org in delta.excluded_orgs:
            q[org] = max(q.get(org, 0), quarantine)
        return RelaySwitch(self.peers, frozenset(o for o, c in q.items() if c > 0), q)

    def advance(self) -> "RelaySwitch":
        """Move to the next block: every quarantine counter drops by one."""
        q = {o: c - 1 for o, c in self.quarantine.items() if c > 1}
        return RelaySwitch(self.peers, frozenset(q), q)


def detector_step(peer: PeerIdentity | None, block: Block, model: DetectorModel,
                  device_org: Mapping[str, str], masked: bool = False) -> tuple[OutlierReport, RelayDelta]:
    """Step 5.1: check the block's readings and name the organizations to exclude.

    ``peer`` is the replica running the check; every honest replica holds the
    same model so the result does not depend on it.
    """
    readings = block.readings()
    try:
        d = fuse(readings, model.layout)
    except DataError as exc:
        raise DataError(f"block {block.seq}: readings incompatible with layout: {exc}") from exc
    report = detect(model, d, masked=masked)
    orgs = frozenset(device_org[dev] for dev in report.flagged_devices)
    rejected = frozenset(etx.tx.tx_id for etx in block.txs if etx.tx.reading.device_id in report.flagged_devices)
    return report, RelayDelta(report.flagged_devices, orgs, rejected)


# --- PBFT replica -------------------------------------------------------------

class MsgKind(str, enum.Enum):
    PRE_PREPARE = "PrePrepare"
    PREPARE = "Prepare"
    COMMIT = "Commit"


class Phase(enum.IntEnum):
    IDLE = 0
    PRE_PREPARED = 1
    PREPARED = 2
    COMMITTED = 3


@dataclass(frozen=True)
class ConsensusMessage:
    kind: MsgKind
    view: int
    seq: int
    digest: bytes
    sender: str


@dataclass(frozen=True)
class Decision:
    status: str                 # "committed" | "timeout"
    digest: bytes | None = None
    time: float = math.inf

    @property
    def committed(self) -> bool:
        return self.status == "committed"


@dataclass
class PbftState:
    peer_id: str
    seq: int
    active_set: frozenset[str]
    quorum: int
    voter: bool = True          # False for honest peers of excluded orgs (learners)
    phase: Phase = Phase.IDLE
    digest: bytes | None = None
    prepare_votes: dict[bytes, set[str]] = field(default_factory=dict)
    commit_votes: dict[bytes, set[str]] = field(default_factory=dict)
    equivocators: dict[MsgKind, set[str]] = field(default_factory=lambda: {MsgKind.PREPARE: set(), MsgKind.COMMIT: set()})
    evidence: list[tuple[str, str, bytes, bytes]] = field(default_factory=list)
    decision: Decision | None = None
    prepared_at: float = math.inf
    tx_statuses: tuple[TxStatus, ...] = ()
    log: list[dict] = field(default_factory=list)

    def votes(self, kind: MsgKind) -> dict[bytes, set[str]]:
        return self.prepare_votes if kind is MsgKind.PREPARE else self.commit_votes


def _record_vote(state: PbftState, msg: ConsensusMessage) -> bool:
    """Add a vote; False if it was a duplicate or part of an equivocation."""
    cheats = state.equivocators[msg.kind]
    if msg.sender in cheats:
        return False
    votes = state.votes(msg.kind)
    for d, senders in votes.items():
        if msg.sender in senders:
            if d == msg.digest:
                return False
            senders.discard(msg.sender)
            cheats.add(msg.sender)
            state.evidence.append((msg.kind.value, msg.sender, d, msg.digest))
            state.log.append({"event": "equivocation", "kind": msg.kind.value, "sender": msg.sender})
            return False
    votes.setdefault(msg.digest, set()).add(msg.sender)
    return True


def _count(state: PbftState, kind: MsgKind) -> int:
    if state.digest is None:
        return 0
    return len(state.votes(kind).get(state.digest, set()) & state.active_set)


def on_message(state: PbftState, msg: ConsensusMessage, relay: RelaySwitch, now: float = 0.0,
               validate: Callable[[], Sequence[TxStatus]] | None = None
               ) -> tuple[PbftState, list[ConsensusMessage]]:
    """Apply one delivered message; returns the state and messages to broadcast.

    The simulator delivers a PrePrepare once local validation has finished,
    so a replica that accepts it broadcasts its Prepare immediately.
    """
    out: list[ConsensusMessage] = []
    if msg.view != VIEW or msg.seq != state.seq:
        state.log.append({"event": "drop", "reason": "view/seq", "kind": msg.kind.value, "sender": msg.sender})
        return state, out
    if not relay.trusts(state.peer_id, msg.sender):
        state.log.append({"event": "drop", "reason": "untrusted", "kind": msg.kind.value, "sender": msg.sender})
        return state, out
    state.log.append({"event": "deliver", "kind": msg.kind.value, "sender": msg.sender, "digest": msg.digest.hex()})

    if msg.kind is MsgKind.PRE_PREPARE:
        if msg.sender != ORDERER or state.phase is not Phase.IDLE:
            state.log.append({"event": "drop", "reason": "bad pre-prepare", "sender": msg.sender})
            return state, out
        if validate is not None:
            state.tx_statuses = tuple(validate())
        state.digest = msg.digest
        _transition(state, Phase.PRE_PREPARED, now)
        if state.voter:
            out.append(ConsensusMessage(MsgKind.PREPARE, VIEW, state.seq, state.digest, state.peer_id))
    elif msg.kind in (MsgKind.PREPARE, MsgKind.COMMIT):
        if msg.sender == ORDERER or not _record_vote(state, msg):
            return state, out
    else:  # pragma: no cover
        raise DataError(f"unknown message kind {msg.kind!r}")

    if state.phase is Phase.PRE_PREPARED and _count(state, MsgKind.PREPARE) >= state.quorum:
        _transition(state, Phase.PREPARED, now)
        state.prepared_at = now
        if state.voter:
            out.append(ConsensusMessage(MsgKind.COMMIT, VIEW, state.seq, state.digest, state.peer_id))
    if state.phase is Phase.PREPARED and _count(state, MsgKind.COMMIT) >= state.quorum:
        _transition(state, Phase.COMMITTED, now)
        state.decision = Decision("committed", state.digest, now)
    return state, out


def _transition(state: PbftState, phase: Phase, now: float) -> None:
    if phase <= state.phase:
        raise AssertionError(f"{state.peer_id}: phase may only move forward")
    state.log.append({"event": "transition", "from": state.phase.name, "to": phase.name})
    state.phase = phase


def timeout_decision(state: PbftState) -> Decision:
    return state.decision if state.decision is not None else Decision("timeout")


# --- outcome --------------------------------------------------------------------

class Outcome(str, enum.Enum):
    SUCCESS = "success"
    CONSENSUS_FAILURE = "consensus-failure"
    SAFETY_VIOLATION = "safety-violation"


def decide_block(decisions: Mapping[str, Decision], honest_active: Iterable[str]) -> Outcome:
    """Slot outcome from the honest replicas' terminal decisions.

    ``decisions`` must cover every honest replica (active or learning);
    only the active ones have to commit for success.
    """
    digests = {d.digest for d in decisions.values() if d.committed}
    if len(digests) > 1:
        return Outcome.SAFETY_VIOLATION
    honest_active = list(honest_active)
    if honest_active and all(decisions[p].committed for p in honest_active):
        return Outcome.SUCCESS
    return Outcome.CONSENSUS_FAILURE


# --- fault-tolerance bound -------------------------------------------------------

@dataclass(frozen=True)
class ToleranceInputs:
    f_raw: float
    p_d: float
    p_fa: float

    def __post_init__(self):
        for name in ("f_raw", "p_d", "p_fa"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


def tolerance_bound(inputs: ToleranceInputs) -> tuple[float, bool]:
    """Post-detection fault fraction and whether it stays within 1/3."""
    f = inputs.f_raw
    f_det = f * (1.0 - inputs.p_d) + (1.0 - f) * inputs.p_fa
    return f_det, f_det <= 1.0 / 3.0


def f_raw_max(p_d: float, p_fa: float) -> float | None:
    """Largest F_raw in [0, 1] with F_det <= 1/3; None when even F_raw = 0 fails."""
    ToleranceInputs(0.0, p_d, p_fa)
    if p_fa > 1.0 / 3.0:
        return None
    slope = 1.0 - p_d - p_fa
    if slope <= 0.0:
        return 1.0
    return min(1.0, (1.0 / 3.0 - p_fa) / slope)
