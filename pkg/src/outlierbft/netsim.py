"""Deterministic discrete-event simulation of the invoke process.

Each slot runs the endorsement phase (applications, aggregator hop,
endorsing peers, orderer) through an event loop, then the two-step
consensus: every honest peer runs the detector on the block, the relay
switch drops the implicated organizations, and PBFT runs over the rest.
Time is simulated; compute steps are charged through a flop-count model so
that timings are reproducible.  Wall-clock timings of the same steps are
collected separately and never enter the deterministic outputs.
"""
from __future__ import annotations

import heapq
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import kernels
from .config import AdversaryConfig, ScenarioConfig, org_ids
from .consensus import (
    ORDERER,
    VIEW,
    ConsensusMessage,
    Decision,
    MsgKind,
    Outcome,
    PbftState,
    RelaySwitch,
    ToleranceInputs,
    decide_block,
    detector_step,
    on_message,
    pbft_quorum,
    tolerance_bound,
)
from .detector import DetectorConfig, DetectorModel, sanitize, train
from .errors import ConfigError, SafetyViolation
from .fusion import DeviceLayout, DeviceReading, FusedVector, fuse, unfuse
from .io_utils import atomic_write, csv_text, dump_json
from .ledger import (
    Block,
    EndorsedTransaction,
    EndorsementPolicy,
    Orderer,
    Peer,
    PeerIdentity,
    PeerLedger,
    Transaction,
    TxStatus,
    append_block,
    build_block,
    chain_index,
    check_endorsements,
    digest,
    encode_chain,
    execute_chaincode,
    genesis_block,
    make_secret,
    state_csv,
)
from .synth import PRNG_NAME, LowRankSource, make_rng

TIMING_CATEGORIES = ("outlier_detection", "model_update", "dataset_update", "state_update", "consensus")

# RNG stream ids under the scenario seed
_S_TRAIN, _S_FAULT, _S_PBFT, _S_ENDORSE, _S_DATA, _S_MALICIOUS, _S_BYZANTINE = range(1, 8)

# flops charged for one signature check and one chaincode execution step
_SIG_FLOPS = 1000.0
_EXEC_FLOPS = 200.0


# --- event loop ---------------------------------------------------------------------

@dataclass(frozen=True)
class SimEvent:
    time: float
    target: Any
    payload: Any


class EventLoop:
    """Priority queue of events ordered by (time, insertion order)."""

    def __init__(self):
        self._heap: list[tuple[float, int, SimEvent]] = []
        self._count = 0
        self.now = 0.0
        self.processed = 0

    def at(self, when: float, target, payload) -> None:
        if when < self.now or math.isnan(when):
            raise ValueError("cannot schedule an event in the past")
        heapq.heappush(self._heap, (when, self._count, SimEvent(when, target, payload)))
        self._count += 1

    def after(self, delay: float, target, payload) -> None:
        self.at(self.now + delay, target, payload)

    def __len__(self):
        return len(self._heap)

    def run(self, handler: Callable[[SimEvent], None], until: float = math.inf) -> None:
        while self._heap and self._heap[0][0] <= until:
            when, _, ev = heapq.heappop(self._heap)
            self.now = when
            self.processed += 1
            handler(ev)


# --- fault injection ------------------------------------------------------------------

def corrupt_count(fraction: float, n: int) -> int:
    """round(fraction * n), halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def inject_faults(readings: Sequence[DeviceReading], adversary: AdversaryConfig, rng: np.random.Generator,
                  *, layout: DeviceLayout, unit: np.ndarray, mean: np.ndarray | None = None,
                  step: int = 0, fixed: Sequence[int] | None = None
                  ) -> tuple[list[DeviceReading], dict[str, bool]]:
    """Corrupt exactly ``round(F_raw * N)`` devices.

    ``unit`` is the per-feature magnitude unit in raw units (the detector
    threshold or the feature scale); ``step`` counts slots for drift.
    ``fixed`` gives the malicious device indices when persistence is fixed.
    """
    by_dev = {r.device_id: r for r in readings}
    if set(by_dev) != set(layout.names) or len(by_dev) != len(readings):
        raise ConfigError("inject_faults needs exactly one reading per device")
    unit = np.asarray(unit, dtype=float)
    k = corrupt_count(adversary.malicious_fraction, layout.device_count)
    if fixed is not None and adversary.persistence == "fixed":
        bad = sorted(int(i) for i in fixed)
        if len(bad) != k:
            raise ConfigError("fixed malicious set does not match the malicious fraction")
    else:
        bad = sorted(int(i) for i in rng.choice(layout.device_count, size=k, replace=False)) if k else []
    bad_set = set(bad)
    out, labels = [], {}
    for n, name in enumerate(layout.names):
        r = by_dev[name]
        labels[name] = n in bad_set
        if n not in bad_set:
            out.append(r)
            continue
        sl = layout.span(name)
        u = unit[sl]
        if adversary.model == "spike":
            signs = rng.choice(np.array([-1.0, 1.0]), size=u.shape[0])
            vals = r.values + adversary.magnitude * u * signs
        elif adversary.model == "replace":
            base = np.zeros(u.shape[0]) if mean is None else np.asarray(mean, dtype=float)[sl]
            vals = base + u * rng.uniform(adversary.replace_low, adversary.replace_high, u.shape[0])
        else:
            vals = r.values + (step + 1) * adversary.drift_step * u
        out.append(DeviceReading(name, r.slot, vals))
    return out, labels


# --- topology ------------------------------------------------------------------------

def build_peers(config: ScenarioConfig) -> list[PeerIdentity]:
    orgs = org_ids(config.org_count)
    m, z = config.endorsing_peers, config.regular_peers
    w = max(2, len(str(max(m, z, 1) - 1)))
    peers = [PeerIdentity(f"pe{k:0{w}d}", orgs[k % len(orgs)], "endorsing") for k in range(m)]
    peers += [PeerIdentity(f"p{k:0{w}d}", orgs[k % len(orgs)], "regular") for k in range(z)]
    return peers


# --- PBFT engines --------------------------------------------------------------------

class _TrustView:
    def __init__(self, active: frozenset[str]):
        self.active = active

    def trusts(self, receiver: str, sender: str) -> bool:
        return sender == ORDERER or sender in self.active


def wrong_digest(block_hash: bytes) -> bytes:
    return digest(b"equivocation:" + block_hash)


def pbft_events(seq: int, block_hash: bytes, peer_ids: Sequence[str], role: Sequence[int],
                trusted: Sequence[bool], quorum: int, pp_arrival: np.ndarray, validate_cost: float,
                prep_delay: np.ndarray, commit_delay: np.ndarray, deadline: float,
                validate: Callable[[], Sequence[TxStatus]] | None = None,
                trace: list | None = None, slot: int | None = None
                ) -> tuple[np.ndarray, np.ndarray, dict[int, PbftState]]:
    """Message-level PBFT round; same contract as :func:`kernels.pbft_round`.

    Replicas are :class:`PbftState` machines fed through an event loop;
    Byzantine replicas are scripted (silent, or equivocating to odd-indexed
    receivers).  Returns prepared times, committed times and the states.
    """
    n = len(peer_ids)
    role = [int(r) for r in role]
    active = frozenset(p for p, t in zip(peer_ids, trusted) if t)
    view = _TrustView(active)
    listeners = [j for j in range(n) if role[j] <= 1]
    states = {j: PbftState(peer_ids[j], seq, active, quorum, voter=(role[j] == 0)) for j in listeners}
    pd = np.asarray(prep_delay, dtype=float).tolist()
    cd = np.asarray(commit_delay, dtype=float).tolist()
    bad = wrong_digest(block_hash)
    loop = EventLoop()
    pp_msg = ConsensusMessage(MsgKind.PRE_PREPARE, VIEW, seq, block_hash, ORDERER)
    for j in range(n):
        if role[j] in (0, 1, 3):
            loop.at(float(pp_arrival[j]) + validate_cost, j, pp_msg)

    def send(j: int, msg: ConsensusMessage, now: float) -> None:
        delays = pd if msg.kind is MsgKind.PREPARE else cd
        for r in listeners:
            loop.at(now if r == j else now + delays[j][r], r, msg)

    def handle(ev: SimEvent) -> None:
        j, msg, now = ev.target, ev.payload, ev.time
        if role[j] == 3:
            if msg.kind is MsgKind.PRE_PREPARE:
                for kind, delays in ((MsgKind.PREPARE, pd), (MsgKind.COMMIT, cd)):
                    good = ConsensusMessage(kind, VIEW, seq, block_hash, peer_ids[j])
                    evil = ConsensusMessage(kind, VIEW, seq, bad, peer_ids[j])
                    for r in listeners:
                        if r % 2:
                            loop.at(now + delays[j][r], r, evil)
                        loop.at(now + delays[j][r], r, good)
            return
        st = states[j]
        mark = len(st.log)
        _, out = on_message(st, msg, view, now, validate)
        if trace is not None:
            for rec in st.log[mark:]:
                trace.append({"slot": slot, "t": now, "peer": peer_ids[j], **rec})
        for m in out:
            send(j, m, now)

    loop.run(handle, until=deadline)
    prepared = np.full(n, math.inf)
    committed = np.full(n, math.inf)
    for j, st in states.items():
        prepared[j] = st.prepared_at
        if st.decision is not None:
            committed[j] = st.decision.time
    if trace is not None:
        for j, st in states.items():
            if st.decision is None:
                trace.append({"slot": slot, "t": deadline, "peer": peer_ids[j], "event": "timeout"})
    return prepared, committed, states


# --- reports --------------------------------------------------------------------------

@dataclass
class SlotReport:
    slot: int
    outcome: str
    block_seq: int
    block_hash: str
    malicious: tuple[str, ...]
    flagged: tuple[str, ...]
    excluded_orgs: tuple[str, ...]
    active_peers: int
    byzantine_active: int
    committed_peers: int
    txs: int
    valid: int
    invalid: int
    rejected: int
    true_pos: int
    false_pos: int
    timings: dict[str, float]
    wallclock: dict[str, float] = field(default_factory=dict, repr=False)
    max_residual_ratio: float = 0.0
    device_count: int = 0

    @property
    def byzantine_ratio(self) -> float:
        return self.byzantine_active / self.active_peers if self.active_peers else 0.0

    @property
    def missed(self) -> int:
        return len(self.malicious) - self.true_pos

    @property
    def fault_fraction(self) -> float:
        """Missed malicious plus falsely flagged clean devices, over all devices."""
        return (self.missed + self.false_pos) / self.device_count if self.device_count else 0.0

    @property
    def success(self) -> bool:
        return self.outcome == Outcome.SUCCESS.value


SLOT_COLUMNS = ["slot", "outcome", "block_seq", "block_hash", "malicious", "flagged", "excluded_orgs",
                "active_peers", "byzantine_active", "byzantine_ratio", "fault_fraction", "committed_peers",
                "txs", "valid", "invalid", "rejected"] + [f"t_{c}" for c in TIMING_CATEGORIES]


def slot_row(r: SlotReport) -> list[str]:
    return [str(r.slot), r.outcome, str(r.block_seq), r.block_hash, ";".join(r.malicious), ";".join(r.flagged),
            ";".join(r.excluded_orgs), str(r.active_peers), str(r.byzantine_active), repr(r.byzantine_ratio),
            repr(r.fault_fraction), str(r.committed_peers), str(r.txs), str(r.valid), str(r.invalid),
            str(r.rejected)] + [repr(float(r.timings[c])) for c in TIMING_CATEGORIES]


# --- the simulated network ---------------------------------------------------------------

class World:
    """All mutable simulation state for one scenario run."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        cfg = config
        self.layout = cfg.layout
        self.device_org = dict(zip(cfg.layout.names, cfg.device_orgs))
        self.identities = build_peers(cfg)
        self.peer_ids = [p.peer_id for p in self.identities]
        for pid in cfg.adversary.byzantine_peers:
            if pid not in self.peer_ids:
                raise ConfigError(f"adversary.byzantine_peers: unknown peer {pid!r}")
        self.secrets = {p.peer_id: make_secret(p.peer_id, cfg.seed) for p in self.identities}
        window = min(cfg.detector.window, max(cfg.training_slots, 10))
        self.peers = [Peer(p, self.secrets[p.peer_id], PeerLedger(self.layout, window)) for p in self.identities]
        endorsers: dict[str, set[str]] = {}
        for p in self.identities:
            if p.endorsing:
                endorsers.setdefault(p.org_id, set()).add(p.peer_id)
        self.apps = sorted({o for o in cfg.device_orgs})
        self.policy = EndorsementPolicy({o: frozenset(endorsers[o]) for o in self.apps})
        self.detector_config = DetectorConfig(cfg.detector.epsilon, cfg.detector.p_fa)
        self.source = LowRankSource.create(self.layout, cfg.data.rank, cfg.data.sigma, cfg.seed,
                                           cfg.data.heterogeneous)

        # training slots: slot 0 seeds the genesis block, all of them fill the window
        D = self.source.sample(cfg.training_slots, make_rng(cfg.seed, _S_TRAIN))
        first = unfuse(FusedVector(0, D[:, 0]), self.layout)
        genesis = genesis_block(first, self.layout)
        for peer in self.peers:
            append_block(peer.ledger, genesis, [TxStatus.VALID] * len(genesis.txs))
            for t in range(1, cfg.training_slots):
                peer.ledger.state.window.push(FusedVector(t, D[:, t]))
        self.orderer = Orderer()
        self.orderer.advance(genesis)
        self.model: DetectorModel = train(self.peers[0].ledger.state.window, self.detector_config)
        scale = self.model.norm_stats.scale
        self.unit = (self.model.thresholds * scale if cfg.adversary.unit == "threshold" else scale).copy()
        self.mean = self.model.norm_stats.mean.copy()

        k = corrupt_count(cfg.adversary.malicious_fraction, self.layout.device_count)
        self.fixed_malicious = None
        if cfg.adversary.persistence == "fixed":
            rng = make_rng(cfg.seed, _S_MALICIOUS)
            self.fixed_malicious = sorted(int(i) for i in rng.choice(self.layout.device_count, k, replace=False))
        static = set(cfg.adversary.byzantine_peers)
        nb = corrupt_count(cfg.adversary.byzantine_fraction, len(self.peers))
        if nb:
            rng = make_rng(cfg.seed, _S_BYZANTINE)
            static |= {self.peer_ids[i] for i in rng.choice(len(self.peers), nb, replace=False)}
        self.static_byzantine = frozenset(static)
        self.relay = RelaySwitch.open(self.identities)
        self.next_slot = cfg.training_slots
        self.step = 0
        self.trace: list[dict] | None = [] if cfg.trace else None
        self._pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        self.validate_cost = 0.0

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- cost model
    def _cost(self, flops: float) -> float:
        return flops / self.config.compute_rate

    def _detect_flops(self) -> float:
        b, r = self.layout.total_dim, self.model.rank
        return 4.0 * b * r + 4.0 * b

    def _update_flops(self) -> float:
        b, t = self.layout.total_dim, len(self.peers[0].ledger.state.window)
        return 4.0 * b * t * min(b, t) + 2.0 * b * t + b * t * math.log2(max(t, 2))

    # -- steps
    def _byzantine(self, labels: Mapping[str, bool]) -> frozenset[str]:
        byz = set(self.static_byzantine)
        if self.config.adversary.byzantine_malicious_orgs:
            orgs = {self.device_org[d] for d, bad in labels.items() if bad}
            byz |= {p.peer_id for p in self.identities if p.org_id in orgs}
        return frozenset(byz)

    def _endorse(self, slot: int, readings: Sequence[DeviceReading], byz: frozenset[str]
                 ) -> tuple[list[EndorsedTransaction], float]:
        """Steps 2-5: proposals through the aggregator hop, endorsement, submission."""
        cfg = self.config
        rng = make_rng(cfg.seed, _S_ENDORSE, slot)
        delay = cfg.delay
        peers = {p.peer_id: p for p in self.peers}
        for p in self.peers:
            p.corrupt_results = cfg.adversary.corrupt_endorsements and p.peer_id in byz
        txs_by_app: dict[str, list[Transaction]] = {}
        for r in readings:
            app = self.device_org[r.device_id]
            txs_by_app.setdefault(app, []).append(Transaction(f"s{slot}-{r.device_id}", app, slot, r))
        got: dict[str, dict[str, tuple]] = {}
        done_apps: dict[str, list[EndorsedTransaction]] = {}
        block_time = [0.0]
        loop = EventLoop()
        for app in sorted(txs_by_app):
            for tx in txs_by_app[app]:
                got[tx.tx_id] = {}
                for e in sorted(self.policy.required(app)):
                    hop = float(delay.draw(rng, 2).sum())   # aggregator queue, then link
                    loop.at(hop, ("endorser", e), ("proposal", tx))

        def handle(ev: SimEvent) -> None:
            kind, who = ev.target
            if kind == "endorser":
                tx = ev.payload[1]
                result, endorsement = execute_chaincode(peers[who], tx)
                cost = self._cost(_EXEC_FLOPS * tx.reading.values.shape[0])
                loop.after(cost + float(delay.draw(rng, ())), ("app", tx.app_id), ("endorsement", tx, result, endorsement))
            elif kind == "app":
                _, tx, result, endorsement = ev.payload
                got[tx.tx_id][endorsement.peer_id] = (result, endorsement)
                app_txs = txs_by_app[who]
                need = self.policy.required(who)
                if all(len(got[t.tx_id]) == len(need) for t in app_txs):
                    etxs = []
                    for t in app_txs:
                        ends = got[t.tx_id]
                        first = sorted(ends)[0]
                        etxs.append(EndorsedTransaction(t, ends[first][0], tuple(ends[p][1] for p in sorted(ends))))
                    loop.after(float(delay.draw(rng, ())), ("orderer", ORDERER), ("submit", who, etxs))
            else:
                _, app, etxs = ev.payload
                done_apps[app] = etxs
                if len(done_apps) == len(txs_by_app):
                    block_time[0] = ev.time

        loop.run(handle)
        etxs = [etx for app in sorted(done_apps) for etx in done_apps[app]]
        return etxs, block_time[0]

    def _detect_all(self, block: Block, honest: Sequence[Peer]):
        def one(peer: Peer):
            return detector_step(peer.identity, block, self.model, self.device_org, self.config.detector.masked)
        if self._pool is not None:
            return list(self._pool.map(one, honest))
        return [one(p) for p in honest]

    def run_slot(self, slot: int | None = None) -> SlotReport:
        cfg = self.config
        slot = self.next_slot if slot is None else slot
        if slot < self.next_slot:
            raise ConfigError(f"slot {slot} already simulated")
        wall: dict[str, float] = {}
        clean = self.source.sample(1, make_rng(cfg.seed, _S_DATA, slot))[:, 0]
        readings = unfuse(FusedVector(slot, clean), self.layout)
        readings, labels = inject_faults(readings, cfg.adversary, make_rng(cfg.seed, _S_FAULT, slot),
                                         layout=self.layout, unit=self.unit, mean=self.mean,
                                         step=self.step, fixed=self.fixed_malicious)
        byz = self._byzantine(labels)
        etxs, t_block = self._endorse(slot, readings, byz)
        block = build_block(self.orderer, etxs)
        secrets = self.secrets
        endorse_status = [check_endorsements(etx, self.policy, secrets) for etx in block.txs]

        # step 1: detector on every honest replica, relay switch update
        honest = [p for p in self.peers if p.peer_id not in byz]
        flagged: frozenset[str] = frozenset()
        rejected: frozenset[str] = frozenset()
        report = None
        relay = self.relay
        if cfg.detector.enabled:
            t0 = time.perf_counter()
            results = self._detect_all(block, honest)
            wall["outlier_detection"] = (time.perf_counter() - t0) / max(len(honest), 1)
            if results:
                report, delta = results[0]
                for _, other in results[1:]:
                    if other != delta:
                        raise SafetyViolation("honest replicas disagree on the relay switch")
                flagged, rejected = delta.flagged_devices, delta.rejected_tx_ids
                if delta.excluded_orgs:
                    relay = relay.apply(delta, cfg.quarantine)
        else:
            wall["outlier_detection"] = 0.0
        statuses = []
        for etx, st in zip(block.txs, endorse_status):
            if etx.tx.tx_id in rejected:
                statuses.append(TxStatus.REJECTED_OUTLIER)
            else:
                statuses.append(st)
        statuses = tuple(statuses)

        # step 2: PBFT over the active peers
        n = len(self.peers)
        role = np.zeros(n, dtype=np.int64)
        trusted = np.zeros(n, dtype=np.uint8)
        for i, p in enumerate(self.identities):
            excluded = p.org_id in relay.excluded_orgs
            trusted[i] = not excluded
            if p.peer_id in byz:
                role[i] = 3 if cfg.adversary.byzantine_mode == "equivocate" else 2
            elif excluded:
                role[i] = 1
        n_active = int(trusted.sum())
        rng = make_rng(cfg.seed, _S_PBFT, slot)
        pp_delay = cfg.delay.draw(rng, n)
        prep_delay = cfg.delay.draw(rng, (n, n))
        commit_delay = cfg.delay.draw(rng, (n, n))
        np.fill_diagonal(prep_delay, 0.0)
        np.fill_diagonal(commit_delay, 0.0)
        pp_arrival = t_block + pp_delay
        v = (self._cost(self._detect_flops()) if cfg.detector.enabled else 0.0) \
            + self._cost(_SIG_FLOPS * sum(len(e.endorsements) for e in block.txs))
        self.validate_cost = v
        deadline = t_block + cfg.effective_timeout
        if n_active:
            q = pbft_quorum(n_active)[1]
            if cfg.engine == "kernel":
                prepared, committed = kernels.pbft_round(pp_arrival, v, prep_delay, commit_delay, role,
                                                         trusted, q, deadline)
                if self.trace is not None:
                    for j in range(n):
                        if role[j] <= 1:
                            ev = "committed" if math.isfinite(committed[j]) else "timeout"
                            tt = committed[j] if math.isfinite(committed[j]) else deadline
                            self.trace.append({"slot": slot, "t": float(tt), "peer": self.peer_ids[j], "event": ev})
            else:
                prepared, committed, _ = pbft_events(block.seq, block.block_hash, self.peer_ids, role, trusted, q,
                                                     pp_arrival, v, prep_delay, commit_delay, deadline,
                                                     trace=self.trace, slot=slot)
        else:
            committed = np.full(n, math.inf)
        decisions = {}
        for j in range(n):
            if role[j] <= 1:
                c = committed[j]
                decisions[self.peer_ids[j]] = (Decision("committed", block.block_hash, float(c))
                                               if math.isfinite(c) else Decision("timeout"))
        honest_active = [self.peer_ids[j] for j in range(n) if role[j] == 0]
        outcome = decide_block(decisions, honest_active)
        if outcome is Outcome.SAFETY_VIOLATION:
            raise SafetyViolation(f"slot {slot}: honest replicas committed different digests")
        timings = dict.fromkeys(TIMING_CATEGORIES, 0.0)
        timings["outlier_detection"] = self._cost(self._detect_flops()) if cfg.detector.enabled else 0.0
        if outcome is Outcome.SUCCESS:
            timings["consensus"] = float(max(committed[self.peer_ids.index(p)] for p in honest_active)) - t_block
        else:
            timings["consensus"] = cfg.effective_timeout

        # steps 6-7: ledger update on every copy, dataset and model update
        wall.update(model_update=0.0, dataset_update=0.0, state_update=0.0)
        if outcome is Outcome.SUCCESS:
            fused = fuse(block.readings(), self.layout)
            column, censor = fused, None
            if cfg.detector.enabled and report is not None and report.flagged_features:
                vals, censor = sanitize(self.model, fused, report.feature_mask)
                column = FusedVector(slot, vals)
            for i, peer in enumerate(self.peers):
                t0 = time.perf_counter()
                append_block(peer.ledger, block, statuses, column, censor)
                if i == 0:
                    wall["state_update"] = time.perf_counter() - t0
            self.orderer.advance(block)
            valid_dims = sum(e.result.values.shape[0] for e, s in zip(block.txs, statuses) if s is TxStatus.VALID)
            timings["state_update"] = self._cost(valid_dims)
            window = self.peers[0].ledger.state.window
            timings["dataset_update"] = self._cost(self.layout.total_dim * len(window))
            t0 = time.perf_counter()
            window.copy()
            wall["dataset_update"] = time.perf_counter() - t0
            if cfg.detector.enabled and cfg.detector.update:
                timings["model_update"] = self._cost(self._update_flops())
                t0 = time.perf_counter()
                self.model = train(window, self.detector_config)
                wall["model_update"] = time.perf_counter() - t0
        for p in self.peers:
            p.ledger.proposals.clear()
        self.relay = relay.advance()

        malicious = tuple(d for d in self.layout.names if labels[d])
        tp = sum(1 for d in flagged if labels[d])
        counts = {s: statuses.count(s) for s in TxStatus}
        rep = SlotReport(
            slot=slot,
            outcome=outcome.value,
            block_seq=block.seq,
            block_hash=block.block_hash.hex(),
            malicious=malicious,
            flagged=tuple(d for d in self.layout.names if d in flagged),
            excluded_orgs=tuple(sorted(relay.excluded_orgs)),
            active_peers=n_active,
            byzantine_active=sum(1 for j in range(n) if trusted[j] and role[j] >= 2),
            committed_peers=int(sum(1 for j in range(n) if role[j] <= 1 and math.isfinite(committed[j]))),
            txs=len(block.txs),
            valid=counts[TxStatus.VALID],
            invalid=counts[TxStatus.INVALID_ENDORSEMENT],
            rejected=counts[TxStatus.REJECTED_OUTLIER],
            true_pos=tp,
            false_pos=len(flagged) - tp,
            timings=timings,
            wallclock=wall,
            max_residual_ratio=report.max_residual_ratio if report is not None else 0.0,
            device_count=self.layout.device_count,
        )
        self.next_slot = slot + 1
        self.step += 1
        return rep


# --- scenario driver --------------------------------------------------------------------

@dataclass
class ScenarioResult:
    config: ScenarioConfig
    reports: list[SlotReport]
    summary: dict
    world: World


def summarize(config: ScenarioConfig, reports: Sequence[SlotReport]) -> dict:
    n_dev = config.layout.device_count
    mal = sum(len(r.malicious) for r in reports)
    clean = len(reports) * n_dev - mal
    tp = sum(r.true_pos for r in reports)
    fp = sum(r.false_pos for r in reports)
    p_d = tp / mal if mal else None
    p_fa = fp / clean if clean else None
    ok = sum(1 for r in reports if r.success)
    rate = ok / len(reports) if reports else None
    if not reports:
        outcome = "empty"
    elif ok == len(reports):
        outcome = Outcome.SUCCESS.value
    elif ok == 0:
        outcome = Outcome.CONSENSUS_FAILURE.value
    else:
        outcome = "partial"
    f_raw = mal / (len(reports) * n_dev) if reports else 0.0
    f_det = tolerance_bound(ToleranceInputs(f_raw, p_d or 0.0, p_fa or 0.0))[0]

    def mean(xs):
        xs = list(xs)
        return sum(xs) / len(xs) if xs else None

    return {
        "schema": 1,
        "name": config.name,
        "config_hash": config.hash(),
        "seed": config.seed,
        "prng": PRNG_NAME,
        "slots": len(reports),
        "outcome": outcome,
        "success_count": ok,
        "success_rate": rate,
        "p_d": p_d,
        "p_fa": p_fa,
        "f_raw": f_raw,
        "f_det_bound": f_det,
        "mean_post_filter_fault_fraction": mean(r.fault_fraction for r in reports),
        "mean_post_filter_byzantine_ratio": mean(r.byzantine_ratio for r in reports),
        "max_post_filter_byzantine_ratio": max((r.byzantine_ratio for r in reports), default=None),
        "txs": sum(r.txs for r in reports),
        "valid": sum(r.valid for r in reports),
        "invalid": sum(r.invalid for r in reports),
        "rejected": sum(r.rejected for r in reports),
        "mean_timings": {c: mean(r.timings[c] for r in reports) for c in TIMING_CATEGORIES},
    }


def run_scenario(config: ScenarioConfig, progress: Callable[[SlotReport], None] | None = None) -> ScenarioResult:
    world = World(config)
    reports = []
    try:
        for _ in range(config.slots):
            rep = world.run_slot()
            reports.append(rep)
            if progress is not None:
                progress(rep)
    finally:
        world.close()
    return ScenarioResult(config, reports, summarize(config, reports), world)


def run_dir_name(config: ScenarioConfig) -> str:
    return f"{config.hash()}-s{config.seed}"


def write_run(result: ScenarioResult, out_root) -> str:
    """Write the run directory; wall-clock metrics go next to it, not inside."""
    cfg = result.config
    name = run_dir_name(cfg)
    d = os.path.join(os.fspath(out_root), name)
    os.makedirs(d, exist_ok=True)
    atomic_write(os.path.join(d, "slots.csv"), csv_text(SLOT_COLUMNS, [slot_row(r) for r in result.reports]))
    atomic_write(os.path.join(d, "summary.json"), dump_json(result.summary))
    cfg_dict = cfg.to_dict()
    cfg_dict["run"].pop("workers", None)
    atomic_write(os.path.join(d, "config.json"), dump_json(cfg_dict))
    if result.world.trace is not None:
        lines = "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in result.world.trace)
        atomic_write(os.path.join(d, "trace.jsonl"), lines)
    ledger = result.world.peers[0].ledger
    atomic_write(os.path.join(d, "chain.bin"), encode_chain(ledger.chain))
    atomic_write(os.path.join(d, "chain_index.csv"), chain_index(ledger.chain))
    atomic_write(os.path.join(d, "state.csv"), state_csv(ledger.state, ledger.layout))
    wall_cols = ["slot"] + [f"{c}_s" for c in TIMING_CATEGORIES[:4]]
    rows = [[str(r.slot)] + [repr(float(r.wallclock.get(c, 0.0))) for c in TIMING_CATEGORIES[:4]]
            for r in result.reports]
    atomic_write(os.path.join(os.fspath(out_root), f"{name}.wallclock.csv"), csv_text(wall_cols, rows))
    return d
