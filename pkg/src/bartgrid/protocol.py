"""Wire messages for the master/worker exchange.

Every message is one opcode byte followed by a fixed-layout payload; integers
are 32-bit unsigned little-endian, reals IEEE-754 binary64 little-endian.
The sampler-phase payload sizes are pinned exactly:

    birth proposal 12, death proposal 8, move stats 24, accepts 28,
    reject 0, mu stats 20 per terminal node, mu values 8 per terminal node,
    partial RSS 8.

No payload grows with the number of observations.  Control messages (HELLO,
SHARD_META, RUN_SETUP, ITER_BEGIN, REPLICA_HASH, SHUTDOWN) are artifact
plumbing outside that ledger and carry whatever the handshake needs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

PROTOCOL_VERSION = 1

OP_HELLO = 0x01
OP_SHARD_META = 0x02
OP_RUN_SETUP = 0x03
OP_ITER_BEGIN = 0x04
OP_SHUTDOWN = 0x05
OP_REPLICA_HASH = 0x06
OP_BIRTH_PROPOSAL = 0x10
OP_DEATH_PROPOSAL = 0x11
OP_MOVE_STATS = 0x12
OP_BIRTH_ACCEPT = 0x13
OP_DEATH_ACCEPT = 0x14
OP_REJECT = 0x15
OP_MU_STATS = 0x16
OP_MU_VALUES = 0x17
OP_RSS_PARTIAL = 0x18

# Iteration phases carried by ITER_BEGIN.
PHASE_TREES = 0
PHASE_SIGMA = 1
PHASE_HASH = 2

_U32 = struct.Struct("<I")
_BIRTH_PROPOSAL = struct.Struct("<III")
_DEATH_PROPOSAL = struct.Struct("<II")
_MOVE_STATS = struct.Struct("<IIdd")
_BIRTH_ACCEPT = struct.Struct("<IIIdd")
_DEATH_ACCEPT_HEAD = struct.Struct("<Id")
_MU_RECORD = struct.Struct("<Idd")
_F64 = struct.Struct("<d")
_HELLO = struct.Struct("<III")
_ITER_BEGIN = struct.Struct("<IB")
_SHARD_META_HEAD = struct.Struct("<IddddI")
_RUN_SETUP_HEAD = struct.Struct("<IIIQddI")


class ProtocolError(ValueError):
    """Malformed frame: unknown opcode, wrong length, or bad field."""


@dataclass(frozen=True)
class Hello:
    version: int
    rank: int
    shard_rows: int


@dataclass(frozen=True)
class ShardMeta:
    """Worker data summaries the master needs to derive run constants."""

    n: int
    y_min: float
    y_max: float
    y_sum: float
    y_sumsq: float
    x_min: tuple[float, ...]
    x_max: tuple[float, ...]


@dataclass(frozen=True)
class RunSetup:
    """Derived constants broadcast so all replicas agree bit-for-bit."""

    m: int
    numcut: int
    blocks: int
    n_total: int
    y_mid: float
    y_range: float
    x_min: tuple[float, ...]
    x_max: tuple[float, ...]


@dataclass(frozen=True)
class IterBegin:
    iteration: int
    phase: int


@dataclass(frozen=True)
class BirthProposal:
    node_id: int
    v: int
    c: int


@dataclass(frozen=True)
class DeathProposal:
    left_id: int
    right_id: int


@dataclass(frozen=True)
class MoveStats:
    n_left: int
    n_right: int
    sum_left: float
    sum_right: float


@dataclass(frozen=True)
class BirthAccept:
    node_id: int
    v: int
    c: int
    mu_left: float
    mu_right: float


@dataclass(frozen=True)
class DeathAccept:
    node_id: int
    mu: float


@dataclass(frozen=True)
class Reject:
    pass


@dataclass(frozen=True)
class MuStats:
    records: tuple[tuple[int, float, float], ...]


@dataclass(frozen=True)
class MuValues:
    values: tuple[float, ...]


@dataclass(frozen=True)
class RssPartial:
    rss: float


@dataclass(frozen=True)
class ReplicaHash:
    digest: bytes  # 16-byte md5 of the canonical forest serialization


@dataclass(frozen=True)
class Shutdown:
    pass


Message = (
    Hello
    | ShardMeta
    | RunSetup
    | IterBegin
    | BirthProposal
    | DeathProposal
    | MoveStats
    | BirthAccept
    | DeathAccept
    | Reject
    | MuStats
    | MuValues
    | RssPartial
    | ReplicaHash
    | Shutdown
)

# Variable-length control payloads start with a fixed head whose trailing u32
# is the predictor count d; 16*d bytes of range data follow.
SHARD_META_HEAD_SIZE = _SHARD_META_HEAD.size
RUN_SETUP_HEAD_SIZE = _RUN_SETUP_HEAD.size

# Payload byte size per opcode; None = derived from message content.
FIXED_PAYLOAD_SIZES: dict[int, int | None] = {
    OP_HELLO: 12,
    OP_SHARD_META: None,
    OP_RUN_SETUP: None,
    OP_ITER_BEGIN: 5,
    OP_SHUTDOWN: 0,
    OP_REPLICA_HASH: 16,
    OP_BIRTH_PROPOSAL: 12,
    OP_DEATH_PROPOSAL: 8,
    OP_MOVE_STATS: 24,
    OP_BIRTH_ACCEPT: 28,
    OP_DEATH_ACCEPT: 28,
    OP_REJECT: 0,
    OP_MU_STATS: None,
    OP_MU_VALUES: None,
    OP_RSS_PARTIAL: 8,
}

# Opcodes whose payloads appear in the communication ledger (everything the
# per-iteration byte accounting covers); control plumbing is excluded.
SAMPLER_OPCODES = frozenset(
    {
        OP_BIRTH_PROPOSAL,
        OP_DEATH_PROPOSAL,
        OP_MOVE_STATS,
        OP_BIRTH_ACCEPT,
        OP_DEATH_ACCEPT,
        OP_REJECT,
        OP_MU_STATS,
        OP_MU_VALUES,
        OP_RSS_PARTIAL,
    }
)


def opcode_of(msg: Message) -> int:
    return _OPCODE_BY_TYPE[type(msg)]


def encode(msg: Message, expected_records: int | None = None) -> bytes:
    """Serialize a message: opcode byte plus its exact payload.

    For MU_STATS / MU_VALUES an optional `expected_records` asserts the
    record count matches the tree's terminal-node count on the sending side.
    """
    if isinstance(msg, Hello):
        payload = _HELLO.pack(msg.version, msg.rank, msg.shard_rows)
    elif isinstance(msg, ShardMeta):
        d = len(msg.x_min)
        if len(msg.x_max) != d:
            raise ProtocolError("x_min / x_max length mismatch")
        payload = _SHARD_META_HEAD.pack(
            msg.n, msg.y_min, msg.y_max, msg.y_sum, msg.y_sumsq, d
        ) + struct.pack(f"<{2 * d}d", *msg.x_min, *msg.x_max)
    elif isinstance(msg, RunSetup):
        d = len(msg.x_min)
        if len(msg.x_max) != d:
            raise ProtocolError("x_min / x_max length mismatch")
        payload = _RUN_SETUP_HEAD.pack(
            msg.m, msg.numcut, msg.blocks, msg.n_total, msg.y_mid, msg.y_range, d
        ) + struct.pack(f"<{2 * d}d", *msg.x_min, *msg.x_max)
    elif isinstance(msg, IterBegin):
        payload = _ITER_BEGIN.pack(msg.iteration, msg.phase)
    elif isinstance(msg, BirthProposal):
        payload = _BIRTH_PROPOSAL.pack(msg.node_id, msg.v, msg.c)
    elif isinstance(msg, DeathProposal):
        payload = _DEATH_PROPOSAL.pack(msg.left_id, msg.right_id)
    elif isinstance(msg, MoveStats):
        payload = _MOVE_STATS.pack(msg.n_left, msg.n_right, msg.sum_left, msg.sum_right)
    elif isinstance(msg, BirthAccept):
        payload = _BIRTH_ACCEPT.pack(msg.node_id, msg.v, msg.c, msg.mu_left, msg.mu_right)
    elif isinstance(msg, DeathAccept):
        # 12 bytes of content zero-padded to the ledger's 28-byte accept size.
        payload = _DEATH_ACCEPT_HEAD.pack(msg.node_id, msg.mu) + b"\x00" * 16
    elif isinstance(msg, Reject):
        payload = b""
    elif isinstance(msg, MuStats):
        if expected_records is not None and len(msg.records) != expected_records:
            raise ProtocolError(
                f"mu stats carry {len(msg.records)} records, expected {expected_records}"
            )
        payload = b"".join(_MU_RECORD.pack(n, s, s2) for n, s, s2 in msg.records)
    elif isinstance(msg, MuValues):
        if expected_records is not None and len(msg.values) != expected_records:
            raise ProtocolError(
                f"mu values carry {len(msg.values)} records, expected {expected_records}"
            )
        payload = struct.pack(f"<{len(msg.values)}d", *msg.values)
    elif isinstance(msg, RssPartial):
        payload = _F64.pack(msg.rss)
    elif isinstance(msg, ReplicaHash):
        if len(msg.digest) != 16:
            raise ProtocolError("replica hash must be 16 bytes")
        payload = msg.digest
    elif isinstance(msg, Shutdown):
        payload = b""
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return bytes([opcode_of(msg)]) + payload


def decode(data: bytes) -> Message:
    """Parse one full frame back into its message; inverse of `encode`.

    Rejects unknown opcodes, truncated payloads and trailing bytes.
    """
    if not data:
        raise ProtocolError("empty frame")
    opcode = data[0]
    payload = data[1:]
    fixed = FIXED_PAYLOAD_SIZES.get(opcode)
    if opcode not in FIXED_PAYLOAD_SIZES:
        raise ProtocolError(f"unknown opcode 0x{opcode:02x}")
    if fixed is not None and len(payload) != fixed:
        raise ProtocolError(
            f"opcode 0x{opcode:02x}: payload is {len(payload)} bytes, expected {fixed}"
        )
    if opcode == OP_HELLO:
        return Hello(*_HELLO.unpack(payload))
    if opcode == OP_SHARD_META:
        head = _SHARD_META_HEAD.size
        if len(payload) < head:
            raise ProtocolError("shard meta truncated")
        n, y_min, y_max, y_sum, y_sumsq, d = _SHARD_META_HEAD.unpack(payload[:head])
        if len(payload) != head + 16 * d:
            raise ProtocolError("shard meta length mismatch")
        vals = struct.unpack(f"<{2 * d}d", payload[head:])
        return ShardMeta(n, y_min, y_max, y_sum, y_sumsq, vals[:d], vals[d:])
    if opcode == OP_RUN_SETUP:
        head = _RUN_SETUP_HEAD.size
        if len(payload) < head:
            raise ProtocolError("run setup truncated")
        m, numcut, blocks, n_total, y_mid, y_range, d = _RUN_SETUP_HEAD.unpack(payload[:head])
        if len(payload) != head + 16 * d:
            raise ProtocolError("run setup length mismatch")
        vals = struct.unpack(f"<{2 * d}d", payload[head:])
        return RunSetup(m, numcut, blocks, n_total, y_mid, y_range, vals[:d], vals[d:])
    if opcode == OP_ITER_BEGIN:
        return IterBegin(*_ITER_BEGIN.unpack(payload))
    if opcode == OP_SHUTDOWN:
        return Shutdown()
    if opcode == OP_REPLICA_HASH:
        return ReplicaHash(payload)
    if opcode == OP_BIRTH_PROPOSAL:
        return BirthProposal(*_BIRTH_PROPOSAL.unpack(payload))
    if opcode == OP_DEATH_PROPOSAL:
        return DeathProposal(*_DEATH_PROPOSAL.unpack(payload))
    if opcode == OP_MOVE_STATS:
        return MoveStats(*_MOVE_STATS.unpack(payload))
    if opcode == OP_BIRTH_ACCEPT:
        return BirthAccept(*_BIRTH_ACCEPT.unpack(payload))
    if opcode == OP_DEATH_ACCEPT:
        if payload[12:] != b"\x00" * 16:
            raise ProtocolError("death accept padding must be zero")
        return DeathAccept(*_DEATH_ACCEPT_HEAD.unpack(payload[:12]))
    if opcode == OP_REJECT:
        return Reject()
    if opcode == OP_MU_STATS:
        if len(payload) % _MU_RECORD.size:
            raise ProtocolError("mu stats payload not a multiple of 20 bytes")
        records = tuple(
            _MU_RECORD.unpack(payload[i : i + _MU_RECORD.size])
            for i in range(0, len(payload), _MU_RECORD.size)
        )
        return MuStats(records)
    if opcode == OP_MU_VALUES:
        if len(payload) % 8:
            raise ProtocolError("mu values payload not a multiple of 8 bytes")
        return MuValues(struct.unpack(f"<{len(payload) // 8}d", payload))
    if opcode == OP_RSS_PARTIAL:
        return RssPartial(*_F64.unpack(payload))
    raise ProtocolError(f"unknown opcode 0x{opcode:02x}")  # pragma: no cover


_OPCODE_BY_TYPE = {
    Hello: OP_HELLO,
    ShardMeta: OP_SHARD_META,
    RunSetup: OP_RUN_SETUP,
    IterBegin: OP_ITER_BEGIN,
    BirthProposal: OP_BIRTH_PROPOSAL,
    DeathProposal: OP_DEATH_PROPOSAL,
    MoveStats: OP_MOVE_STATS,
    BirthAccept: OP_BIRTH_ACCEPT,
    DeathAccept: OP_DEATH_ACCEPT,
    Reject: OP_REJECT,
    MuStats: OP_MU_STATS,
    MuValues: OP_MU_VALUES,
    RssPartial: OP_RSS_PARTIAL,
    ReplicaHash: OP_REPLICA_HASH,
    Shutdown: OP_SHUTDOWN,
}


def iteration_byte_count(
    trace: Sequence[tuple[str | None, bool]], b_counts: Sequence[int], p: int
) -> int:
    """Exact sampler-phase payload bytes master<->workers for one iteration.

    `trace` holds (move, accepted) per tree where move is 'birth', 'death' or
    None (a proposal with no admissible rule, signalled by a bare reject);
    `b_counts` the matching terminal-node counts at the leaf-mean phase.
    Control messages are not part of the ledger and are not counted.
    """
    if len(trace) != len(b_counts):
        raise ValueError("trace and b_counts must cover the same trees")
    if p < 0:
        raise ValueError("worker count must be >= 0")
    per_worker = 0
    for (move, accepted), b in zip(trace, b_counts):
        if move == "birth":
            per_worker += 12 + 24 + (28 if accepted else 0)
        elif move == "death":
            per_worker += 8 + 24 + (28 if accepted else 0)
        elif move is not None:
            raise ValueError(f"unknown move {move!r}")
        per_worker += 20 * b + 8 * b
    per_worker += 8  # partial RSS
    return p * per_worker
