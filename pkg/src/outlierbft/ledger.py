"""Transactions, endorsements, blocks, the hash chain and per-peer world state.

Hashing uses a canonical byte serialization: every field is written in
declaration order, variable-length data is length-prefixed (4-byte
big-endian), integers are 8-byte big-endian and reals are their shortest
round-trip decimal string.  Signatures are keyed hashes over a per-peer
secret; they only have to make forgery detectable inside the simulation.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import io
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ChainIntegrityError,
    DimensionMismatchError,
    EndorsementError,
    LedgerError,
    NonFiniteError,
    UnknownDeviceError,
)
from .fusion import DeviceLayout, DeviceReading, FusedVector, TrainingWindow, fuse

HASH_NAME = "sha256"
HASH_SIZE = 32
ZERO_HASH = bytes(HASH_SIZE)
CHAIN_MAGIC = b"OBFTCHAIN/1\n"


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# --- canonical encoding ------------------------------------------------------

def enc_int(i: int) -> bytes:
    return struct.pack(">q", int(i))


def enc_bytes(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


def enc_str(s: str) -> bytes:
    return enc_bytes(s.encode("utf-8"))


def enc_real(x: float) -> bytes:
    return enc_str(repr(float(x)))


def enc_vec(v: Iterable[float]) -> bytes:
    v = list(v)
    return enc_int(len(v)) + b"".join(enc_real(x) for x in v)


class _Reader:
    """Strict decoder for the canonical encoding; any inconsistency raises."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ValueError("truncated record")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def int(self) -> int:
        return struct.unpack(">q", self._take(8))[0]

    def bytes(self) -> bytes:
        (n,) = struct.unpack(">I", self._take(4))
        return self._take(n)

    def str(self) -> str:
        return self.bytes().decode("utf-8")

    def real(self) -> float:
        s = self.str()
        x = float(s)
        if repr(x) != s:
            raise ValueError(f"non-canonical real {s!r}")
        return x

    def vec(self) -> np.ndarray:
        n = self.int()
        if n < 0 or n > len(self.data):
            raise ValueError("bad vector length")
        return np.array([self.real() for _ in range(n)], dtype=float)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise ValueError("trailing bytes")


# --- domain types ------------------------------------------------------------

class TxStatus(enum.IntEnum):
    UNSET = 0
    VALID = 1
    INVALID_ENDORSEMENT = 2
    REJECTED_OUTLIER = 3

    @property
    def valid(self) -> bool:
        return self is TxStatus.VALID


@dataclass(frozen=True)
class PeerIdentity:
    peer_id: str
    org_id: str
    kind: str = "regular"          # "endorsing" | "regular"
    byzantine: bool = False

    @property
    def endorsing(self) -> bool:
        return self.kind == "endorsing"


@dataclass(frozen=True)
class Transaction:
    tx_id: str
    app_id: str
    slot: int
    reading: DeviceReading

    @functools.cached_property
    def _encoded(self) -> bytes:
        r = self.reading
        return (enc_str(self.tx_id) + enc_str(self.app_id) + enc_int(self.slot)
                + enc_str(r.device_id) + enc_int(r.slot) + enc_vec(r.values))

    def encode(self) -> bytes:
        return self._encoded


@dataclass(frozen=True)
class StateDelta:
    """Chaincode result: set ``device_id`` to ``values``."""

    device_id: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def encode(self) -> bytes:
        return enc_str(self.device_id) + enc_vec(self.values)

    def digest(self) -> bytes:
        return digest(self.encode())


@dataclass(frozen=True)
class Endorsement:
    peer_id: str
    result_digest: bytes
    signature: bytes

    def encode(self) -> bytes:
        return enc_str(self.peer_id) + enc_bytes(self.result_digest) + enc_bytes(self.signature)


@dataclass(frozen=True)
class EndorsedTransaction:
    tx: Transaction
    result: StateDelta
    endorsements: tuple[Endorsement, ...]

    @functools.cached_property
    def _encoded(self) -> bytes:
        return (self.tx.encode() + self.result.encode() + enc_int(len(self.endorsements))
                + b"".join(e.encode() for e in self.endorsements))

    def encode(self) -> bytes:
        return self._encoded

    @property
    def sort_key(self) -> tuple[str, str]:
        return (self.tx.app_id, self.tx.tx_id)


def block_digest(seq: int, prev_hash: bytes, txs: Sequence[EndorsedTransaction]) -> bytes:
    body = enc_int(seq) + enc_bytes(prev_hash) + enc_int(len(txs)) + b"".join(enc_bytes(t.encode()) for t in txs)
    return digest(body)


@dataclass(frozen=True)
class Block:
    seq: int
    prev_hash: bytes
    txs: tuple[EndorsedTransaction, ...]
    block_hash: bytes

    @classmethod
    def make(cls, seq: int, prev_hash: bytes, txs: Iterable[EndorsedTransaction]) -> "Block":
        txs = tuple(txs)
        return cls(seq, prev_hash, txs, block_digest(seq, prev_hash, txs))

    @functools.cached_property
    def _digest(self) -> bytes:
        return block_digest(self.seq, self.prev_hash, self.txs)

    def recompute_hash(self) -> bytes:
        # fields are immutable, so the digest of this object never changes;
        # decoded or altered blocks are new objects and are hashed afresh
        return self._digest

    def readings(self) -> list[DeviceReading]:
        return [t.tx.reading for t in self.txs]

    def encode(self) -> bytes:
        return (enc_int(self.seq) + enc_bytes(self.prev_hash) + enc_int(len(self.txs))
                + b"".join(enc_bytes(t.encode()) for t in self.txs) + enc_bytes(self.block_hash))


@dataclass(frozen=True)
class CommittedBlock:
    """A block plus the per-transaction statuses a peer committed it with."""

    block: Block
    statuses: tuple[TxStatus, ...]

    def status_bytes(self) -> bytes:
        return bytes(int(s) for s in self.statuses)

    def record_hash(self) -> bytes:
        return digest(self.block.block_hash + enc_bytes(self.status_bytes()))

    def encode(self) -> bytes:
        return enc_bytes(self.block.encode()) + enc_bytes(self.status_bytes()) + enc_bytes(self.record_hash())

    @property
    def valid_count(self) -> int:
        return sum(1 for s in self.statuses if s is TxStatus.VALID)


@dataclass
class EndorsementPolicy:
    required_endorsers: dict[str, frozenset[str]]

    def __post_init__(self):
        for app, peers in self.required_endorsers.items():
            if not peers:
                raise ValueError(f"application {app!r} has no required endorsers")
        self.required_endorsers = {a: frozenset(p) for a, p in self.required_endorsers.items()}

    def required(self, app_id: str) -> frozenset[str]:
        try:
            return self.required_endorsers[app_id]
        except KeyError:
            raise EndorsementError(f"no endorsement policy for application {app_id!r}") from None


# --- decoding ----------------------------------------------------------------

def _read_etx(r: _Reader) -> EndorsedTransaction:
    tx_id, app_id, slot = r.str(), r.str(), r.int()
    dev, rslot, vals = r.str(), r.int(), r.vec()
    tx = Transaction(tx_id, app_id, slot, DeviceReading(dev, rslot, vals))
    result = StateDelta(r.str(), r.vec())
    n = r.int()
    if n < 0 or n > 10_000:
        raise ValueError("bad endorsement count")
    ends = tuple(Endorsement(r.str(), r.bytes(), r.bytes()) for _ in range(n))
    return EndorsedTransaction(tx, result, ends)


def decode_block(data: bytes) -> Block:
    r = _Reader(data)
    seq, prev = r.int(), r.bytes()
    n = r.int()
    if n < 0 or n > len(data):
        raise ValueError("bad transaction count")
    txs = []
    for _ in range(n):
        sub = _Reader(r.bytes())
        txs.append(_read_etx(sub))
        sub.done()
    block_hash = r.bytes()
    r.done()
    return Block(seq, prev, tuple(txs), block_hash)


def decode_committed(data: bytes) -> CommittedBlock:
    r = _Reader(data)
    block = decode_block(r.bytes())
    statuses = tuple(TxStatus(b) for b in r.bytes())
    stored = r.bytes()
    r.done()
    rec = CommittedBlock(block, statuses)
    if len(statuses) != len(block.txs):
        raise ChainIntegrityError("status count does not match transaction count", block.seq)
    if stored != rec.record_hash():
        raise ChainIntegrityError("record hash mismatch", block.seq)
    return rec


# --- world state and peer ledger copies --------------------------------------

@dataclass
class WorldState:
    current: dict[str, np.ndarray]
    window: TrainingWindow

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.current.items()}


class PeerLedger:
    """One peer's copy of the chain and world state."""

    def __init__(self, layout: DeviceLayout, window_capacity: int = 100):
        self.layout = layout
        self.chain: list[CommittedBlock] = []
        self.state = WorldState({}, TrainingWindow(layout, window_capacity))
        # step 2.2 scratch updates; dropped unless the block commits
        self.proposals: dict[str, StateDelta] = {}

    @property
    def height(self) -> int:
        return len(self.chain)

    @property
    def tip(self) -> tuple[int, bytes]:
        if not self.chain:
            return -1, ZERO_HASH
        b = self.chain[-1].block
        return b.seq, b.block_hash

    def copy(self) -> "PeerLedger":
        other = PeerLedger(self.layout, self.state.window.capacity)
        other.chain = list(self.chain)
        other.state = WorldState(self.state.snapshot(), self.state.window.copy())
        return other


@dataclass
class Peer:
    identity: PeerIdentity
    secret: bytes
    ledger: PeerLedger
    corrupt_results: bool = False

    @property
    def peer_id(self) -> str:
        return self.identity.peer_id


def make_secret(peer_id: str, seed: int = 0) -> bytes:
    return digest(f"secret:{seed}:{peer_id}".encode())


def sign(secret: bytes, result_digest: bytes) -> bytes:
    return digest(secret + result_digest)


def execute_chaincode(peer: Peer, tx: Transaction) -> tuple[StateDelta, Endorsement]:
    """Simulate the transaction on an endorsing peer and sign the result."""
    if not peer.identity.endorsing:
        raise EndorsementError(f"peer {peer.peer_id!r} does not hold chaincode")
    layout = peer.ledger.layout
    r = tx.reading
    sl = layout.span(r.device_id)
    if r.values.shape[0] != sl.stop - sl.start:
        raise DimensionMismatchError(f"device {r.device_id!r}: malformed reading")
    if not np.all(np.isfinite(r.values)):
        raise NonFiniteError(f"device {r.device_id!r}: non-finite reading")
    values = r.values
    if peer.corrupt_results:
        values = values + 1.0
    result = StateDelta(r.device_id, values)
    d = result.digest()
    peer.ledger.proposals[tx.tx_id] = result
    return result, Endorsement(peer.peer_id, d, sign(peer.secret, d))


def check_endorsements(etx: EndorsedTransaction, policy: EndorsementPolicy,
                       secrets: Mapping[str, bytes]) -> TxStatus:
    """VALID iff every required endorser signed the same result digest."""
    try:
        required = policy.required(etx.tx.app_id)
    except EndorsementError:
        return TxStatus.INVALID_ENDORSEMENT
    by_peer = {}
    for e in etx.endorsements:
        secret = secrets.get(e.peer_id)
        if secret is None or e.signature != sign(secret, e.result_digest):
            return TxStatus.INVALID_ENDORSEMENT
        by_peer[e.peer_id] = e
    if not required <= by_peer.keys():
        return TxStatus.INVALID_ENDORSEMENT
    digests = {by_peer[p].result_digest for p in required}
    if len(digests) != 1 or etx.result.digest() not in digests:
        return TxStatus.INVALID_ENDORSEMENT
    return TxStatus.VALID


@dataclass
class Orderer:
    tip_seq: int = -1
    tip_hash: bytes = ZERO_HASH
    allow_empty: bool = False

    def advance(self, block: Block) -> None:
        self.tip_seq, self.tip_hash = block.seq, block.block_hash


def build_block(orderer: Orderer, etxs: Iterable[EndorsedTransaction]) -> Block:
    """Next block on the orderer's tip, transactions sorted by (app_id, tx_id)."""
    txs = sorted(etxs, key=lambda t: t.sort_key)
    if not txs and not orderer.allow_empty:
        raise LedgerError("refusing to build an empty block")
    ids = [t.tx.tx_id for t in txs]
    if len(set(ids)) != len(ids):
        raise LedgerError("duplicate tx_id in block")
    return Block.make(orderer.tip_seq + 1, orderer.tip_hash, txs)


def genesis_block(readings: Iterable[DeviceReading], layout: DeviceLayout) -> Block:
    """Block 0: one unendorsed init transaction per device."""
    txs = []
    for r in readings:
        layout.span(r.device_id)
        tx = Transaction(f"init-{r.device_id}", "init", r.slot, r)
        txs.append(EndorsedTransaction(tx, StateDelta(r.device_id, r.values), ()))
    return Block.make(0, ZERO_HASH, sorted(txs, key=lambda t: t.sort_key))


def append_block(ledger: PeerLedger, block: Block, statuses: Sequence[TxStatus],
                 window_column: FusedVector | None = None,
                 censor: np.ndarray | None = None) -> WorldState:
    """Commit ``block`` to this ledger copy.

    Valid transactions update the world state in block order; every
    transaction stays in the block.  ``window_column`` (normally the
    sanitized fused slot) is pushed to the dataset window; by default the
    raw readings are fused.
    """
    seq, tip_hash = ledger.tip
    if block.seq != seq + 1:
        raise LedgerError(f"sequence gap: tip {seq}, block {block.seq}")
    if block.prev_hash != tip_hash:
        raise LedgerError(f"block {block.seq}: prev_hash does not match tip")
    if block.recompute_hash() != block.block_hash:
        raise ChainIntegrityError("block hash mismatch", block.seq)
    statuses = tuple(TxStatus(s) for s in statuses)
    if len(statuses) != len(block.txs):
        raise LedgerError("one status per transaction required")
    for etx, st in zip(block.txs, statuses):
        if st is TxStatus.VALID:
            ledger.layout.span(etx.result.device_id)
            ledger.state.current[etx.result.device_id] = etx.result.values.copy()
    if window_column is None and block.txs:
        readings = block.readings()
        if {r.device_id for r in readings} == set(ledger.layout.names):
            window_column = fuse(readings, ledger.layout)
    if window_column is not None:
        ledger.state.window.push(window_column, censor)
    ledger.chain.append(CommittedBlock(block, statuses))
    ledger.proposals.clear()
    return ledger.state


def query(peer: Peer | PeerLedger, device_id: str) -> np.ndarray:
    ledger = peer.ledger if isinstance(peer, Peer) else peer
    ledger.layout.index(device_id)
    try:
        return ledger.state.current[device_id].copy()
    except KeyError:
        raise UnknownDeviceError(f"device {device_id!r} has no committed value") from None


# --- chain verification and export ---------------------------------------------

def verify_chain(records: Sequence[CommittedBlock]) -> None:
    """Raise :class:`ChainIntegrityError` at the first bad block."""
    prev_seq, prev_hash = -1, ZERO_HASH
    for rec in records:
        b = rec.block
        if b.seq != prev_seq + 1:
            raise ChainIntegrityError(f"expected seq {prev_seq + 1}", b.seq)
        if b.prev_hash != prev_hash:
            raise ChainIntegrityError("prev_hash link broken", b.seq)
        if b.recompute_hash() != b.block_hash:
            raise ChainIntegrityError("block hash mismatch", b.seq)
        if len(rec.statuses) != len(b.txs):
            raise ChainIntegrityError("status count does not match transaction count", b.seq)
        prev_seq, prev_hash = b.seq, b.block_hash


def encode_chain(records: Sequence[CommittedBlock]) -> bytes:
    out = io.BytesIO()
    out.write(CHAIN_MAGIC)
    out.write(enc_str(HASH_NAME))
    out.write(enc_int(len(records)))
    for rec in records:
        out.write(enc_bytes(rec.encode()))
    return out.getvalue()


def decode_chain(data: bytes) -> list[CommittedBlock]:
    """Parse and verify an exported chain."""
    if not data.startswith(CHAIN_MAGIC):
        raise ChainIntegrityError("not a chain file")
    r = _Reader(data[len(CHAIN_MAGIC):])
    records: list[CommittedBlock] = []
    try:
        if r.str() != HASH_NAME:
            raise ChainIntegrityError("unsupported hash algorithm")
        n = r.int()
        if n < 0:
            raise ValueError("bad record count")
        for i in range(n):
            rec_bytes = r.bytes()
            try:
                records.append(decode_committed(rec_bytes))
            except ChainIntegrityError:
                raise
            except (ValueError, UnicodeDecodeError, struct.error) as exc:
                raise ChainIntegrityError(f"unreadable record: {exc}", i) from None
        r.done()
    except ChainIntegrityError:
        raise
    except (ValueError, UnicodeDecodeError, struct.error) as exc:
        raise ChainIntegrityError(f"unreadable chain file: {exc}", len(records)) from None
    verify_chain(records)
    return records


def chain_index(records: Sequence[CommittedBlock]) -> str:
    lines = ["seq,hash,tx_count,valid_count"]
    for rec in records:
        b = rec.block
        lines.append(f"{b.seq},{b.block_hash.hex()},{len(b.txs)},{rec.valid_count}")
    return "\n".join(lines) + "\n"


def state_csv(state: WorldState, layout: DeviceLayout) -> str:
    lines = ["device_id,value..."]
    for name in layout.names:
        if name in state.current:
            lines.append(",".join([name] + [repr(float(x)) for x in state.current[name]]))
    return "\n".join(lines) + "\n"


def export_chain(ledger: PeerLedger, directory) -> None:
    import os
    from .io_utils import atomic_write
    atomic_write(os.path.join(directory, "chain.bin"), encode_chain(ledger.chain))
    atomic_write(os.path.join(directory, "chain_index.csv"), chain_index(ledger.chain).encode())
    atomic_write(os.path.join(directory, "state.csv"), state_csv(ledger.state, ledger.layout).encode())
