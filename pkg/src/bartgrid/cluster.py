"""Master/worker runtime: sharding, transports, and the per-iteration protocol.

The master owns the chain's randomness and the model replica but never sees a
row of data; workers hold contiguous shards and answer every request with
fixed-size reduced statistics.  Rows are partitioned into `reduction_blocks`
global blocks, workers own contiguous runs of blocks, and every floating-point
reduction is the balanced pairwise fold from `sampler`, which is what makes
the chain bit-identical across worker counts (and equal to the serial chain)
whenever each worker holds a power-of-two number of blocks.

Two transports: in-process byte queues (worker threads) and TCP stream
sockets.  Failure model is fail-stop: any worker loss aborts the run.
"""
from __future__ import annotations

import hashlib
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import protocol as proto
from .sampler import (
    BIRTH,
    DEATH,
    ChainResult,
    FitSettings,
    Proposal,
    ShardData,
    StatsProvider,
    SuffStats,
    derive_run_constants,
    forest_hash,
    pairwise_fold,
    partition_bounds,
    resolve_prior,
    run_chain_core,
    scale_moment_blocks,
    shard_move_stats,
    shard_mu_stats,
)
from .trees import CutpointGrid, Tree, children_ids, enumerate_nodes


class ClusterError(RuntimeError):
    """Protocol violation or worker failure; the run cannot continue."""


# ---------------------------------------------------------------------------
# Data partitioning
# ---------------------------------------------------------------------------

@dataclass(slots=True)
class Shard:
    """One worker's contiguous slice of the dataset."""

    rank: int
    start: int
    stop: int
    x: np.ndarray
    y: np.ndarray

    @property
    def n(self) -> int:
        return self.stop - self.start


def shard_data(x: np.ndarray, y: np.ndarray, p: int) -> list[Shard]:
    """Split rows into p contiguous shards whose sizes differ by at most one."""
    n = y.shape[0]
    if p < 1:
        raise ValueError("worker count must be >= 1")
    if p > n:
        raise ValueError("more workers than rows")
    bounds = partition_bounds(n, p)
    return [
        Shard(rank, int(bounds[rank - 1]), int(bounds[rank]),
              x[bounds[rank - 1] : bounds[rank]], y[bounds[rank - 1] : bounds[rank]])
        for rank in range(1, p + 1)
    ]


def worker_row_range(n_total: int, blocks: int, p: int, rank: int) -> tuple[int, int]:
    """Global row range of worker `rank` (1-based) under the block layout.

    Shards are unions of whole reduction blocks so that block sums never
    straddle a worker boundary.
    """
    if blocks % p != 0:
        raise ValueError("reduction_blocks must be a multiple of the worker count")
    per = blocks // p
    if per & (per - 1):
        raise ValueError("blocks per worker must be a power of two for a stable fold")
    bounds = partition_bounds(n_total, blocks)
    return int(bounds[(rank - 1) * per]), int(bounds[rank * per])


def shard_block_slices(n_local: int, blocks: int, p: int) -> list[tuple[int, int]]:
    """Shard-local [lo, hi) slices of the global blocks a worker owns.

    The near-equal partition of the shard's own rows into blocks/p slices is
    identical to the restriction of the global block partition to the shard:
    the oversized global blocks form a prefix, so their intersection with any
    contiguous run of blocks is a prefix of that run.
    """
    if blocks % p != 0:
        raise ValueError("reduction_blocks must be a multiple of the worker count")
    per = blocks // p
    if per & (per - 1):
        raise ValueError("blocks per worker must be a power of two for a stable fold")
    bounds = partition_bounds(n_local, per)
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(per)]


def reduce_stats(partials: Sequence):
    """Deterministically combine per-worker partials ordered by rank.

    Partials are merged with the fixed balanced pairwise fold shared by all
    reductions in this package; a missing entry is a protocol error.
    """
    if any(part is None for part in partials):
        missing = [i + 1 for i, part in enumerate(partials) if part is None]
        raise ClusterError(f"missing partial statistics from rank(s) {missing}")
    return pairwise_fold(partials)


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class Channel:
    """Ordered, reliable duplex byte channel (one endpoint)."""

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class QueueChannel(Channel):
    """In-process channel over a pair of byte queues."""

    def __init__(self, inbox: "queue.SimpleQueue[bytes]", outbox: "queue.SimpleQueue[bytes]",
                 fail_check: Callable[[], None] | None = None, timeout: float = 120.0):
        self._inbox = inbox
        self._outbox = outbox
        self._buffer = bytearray()
        self._fail_check = fail_check
        self._timeout = timeout

    def send(self, data: bytes) -> None:
        self._outbox.put(data)

    def recv(self, n: int) -> bytes:
        deadline = time.monotonic() + self._timeout
        while len(self._buffer) < n:
            # Poll in short slices so a peer failure surfaces promptly.
            try:
                self._buffer.extend(self._inbox.get(timeout=0.2))
            except queue.Empty:
                if self._fail_check is not None:
                    self._fail_check()
                if time.monotonic() > deadline:
                    raise ClusterError("channel receive timed out") from None
        out = bytes(self._buffer[:n])
        del self._buffer[:n]
        return out


def queue_channel_pair(fail_check: Callable[[], None] | None = None,
                       timeout: float = 120.0) -> tuple[QueueChannel, QueueChannel]:
    a_to_b: "queue.SimpleQueue[bytes]" = queue.SimpleQueue()
    b_to_a: "queue.SimpleQueue[bytes]" = queue.SimpleQueue()
    return (
        QueueChannel(b_to_a, a_to_b, fail_check, timeout),
        QueueChannel(a_to_b, b_to_a, fail_check, timeout),
    )


class SocketChannel(Channel):
    """TCP stream channel."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # non-TCP stream sockets (e.g. a unix socketpair) lack the option

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ClusterError(f"socket send failed: {exc}") from exc

    def recv(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self._sock.recv(n - len(chunks))
            except OSError as exc:
                raise ClusterError(f"socket receive failed: {exc}") from exc
            if not chunk:
                raise ClusterError("peer closed the connection mid-message")
            chunks.extend(chunk)
        return bytes(chunks)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


# ---------------------------------------------------------------------------
# Message framing over a channel
# ---------------------------------------------------------------------------

@dataclass
class ByteAudit:
    """Tally of payload bytes per opcode, split by direction."""

    sent: dict[int, int] = field(default_factory=dict)
    received: dict[int, int] = field(default_factory=dict)
    sent_count: dict[int, int] = field(default_factory=dict)
    received_count: dict[int, int] = field(default_factory=dict)

    def record(self, opcode: int, payload_len: int, outgoing: bool) -> None:
        bucket, counts = (
            (self.sent, self.sent_count) if outgoing else (self.received, self.received_count)
        )
        bucket[opcode] = bucket.get(opcode, 0) + payload_len
        counts[opcode] = counts.get(opcode, 0) + 1

    def sampler_payload_total(self) -> int:
        """Ledger bytes (both directions), control plumbing excluded."""
        return sum(
            v for op, v in self.sent.items() if op in proto.SAMPLER_OPCODES
        ) + sum(v for op, v in self.received.items() if op in proto.SAMPLER_OPCODES)


class MessageIO:
    """Sends and receives whole frames on a channel.

    The protocol is lockstep, so the receiver always knows which opcodes may
    arrive next and, for the per-leaf messages, how many records to expect.
    """

    def __init__(self, channel: Channel, audit: ByteAudit | None = None,
                 capture: list | None = None):
        self.channel = channel
        self.audit = audit
        self.capture = capture

    def send(self, msg: proto.Message, expected_records: int | None = None) -> None:
        frame = proto.encode(msg, expected_records)
        if self.audit is not None:
            self.audit.record(frame[0], len(frame) - 1, outgoing=True)
        if self.capture is not None:
            self.capture.append(("send", frame))
        self.channel.send(frame)

    def recv(
        self,
        allowed: tuple[type, ...],
        mu_records: int | Callable[[], int] | None = None,
    ) -> proto.Message:
        opcode = self.channel.recv(1)[0]
        size = proto.FIXED_PAYLOAD_SIZES.get(opcode)
        if opcode not in proto.FIXED_PAYLOAD_SIZES:
            raise ClusterError(f"unknown opcode 0x{opcode:02x} on the wire")
        if size is None:
            if opcode in (proto.OP_MU_STATS, proto.OP_MU_VALUES):
                if mu_records is None:
                    raise ClusterError("per-leaf message arrived without an expected count")
                records = mu_records() if callable(mu_records) else mu_records
                size = (20 if opcode == proto.OP_MU_STATS else 8) * records
            elif opcode in (proto.OP_SHARD_META, proto.OP_RUN_SETUP):
                head_size = (
                    proto.SHARD_META_HEAD_SIZE
                    if opcode == proto.OP_SHARD_META
                    else proto.RUN_SETUP_HEAD_SIZE
                )
                head = self.channel.recv(head_size)
                (d,) = struct.unpack("<I", head[-4:])
                tail = self.channel.recv(16 * d)
                frame = bytes([opcode]) + head + tail
                return self._finish(frame, allowed)
            else:  # pragma: no cover - table covers all variable opcodes
                raise ClusterError(f"cannot size opcode 0x{opcode:02x}")
        payload = self.channel.recv(size) if size else b""
        return self._finish(bytes([opcode]) + payload, allowed)

    def _finish(self, frame: bytes, allowed: tuple[type, ...]) -> proto.Message:
        if self.audit is not None:
            self.audit.record(frame[0], len(frame) - 1, outgoing=False)
        if self.capture is not None:
            self.capture.append(("recv", frame))
        try:
            msg = proto.decode(frame)
        except proto.ProtocolError as exc:
            raise ClusterError(str(exc)) from exc
        if not isinstance(msg, allowed):
            names = "/".join(t.__name__ for t in allowed)
            raise ClusterError(f"unexpected {type(msg).__name__}, wanted {names}")
        return msg


# ---------------------------------------------------------------------------
# Worker
# ---------------------------------------------------------------------------

def run_worker(
    channel: Channel,
    x: np.ndarray,
    y: np.ndarray,
    rank: int,
    workers: int,
    reduction_blocks: int,
    audit: ByteAudit | None = None,
) -> None:
    """Worker event loop: serve reduced statistics until SHUTDOWN.

    The worker consumes no randomness; its forest replica evolves purely by
    applying the master's accepted moves and leaf means, so after every
    iteration it is structurally identical to the master's.
    """
    io = MessageIO(channel, audit)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    blocks = shard_block_slices(y.size, reduction_blocks, workers)

    io.send(proto.Hello(proto.PROTOCOL_VERSION, rank, y.size))
    y_sums, y_sumsqs = scale_moment_blocks(y, blocks)
    io.send(
        proto.ShardMeta(
            y.size,
            float(y.min()),
            float(y.max()),
            pairwise_fold(y_sums),
            pairwise_fold(y_sumsqs),
            tuple(x.min(axis=0)),
            tuple(x.max(axis=0)),
        )
    )
    setup = io.recv((proto.RunSetup,))
    if setup.blocks != reduction_blocks:
        raise ClusterError(
            f"master uses {setup.blocks} reduction blocks, worker configured {reduction_blocks}"
        )
    expected_lo, expected_hi = worker_row_range(setup.n_total, setup.blocks, workers, rank)
    if expected_hi - expected_lo != y.size:
        raise ClusterError(
            f"rank {rank} shard holds {y.size} rows, layout expects {expected_hi - expected_lo}"
        )
    grid = CutpointGrid.from_ranges(
        np.array(setup.x_min), np.array(setup.x_max), setup.numcut
    )
    ys = (y - setup.y_mid) / setup.y_range
    shard = ShardData(x, ys, setup.m, blocks)
    forest = [Tree() for _ in range(setup.m)]

    j = 0
    pending = None  # proposal awaiting the master's decision
    expected_msgs = (
        proto.IterBegin,
        proto.BirthProposal,
        proto.DeathProposal,
        proto.BirthAccept,
        proto.DeathAccept,
        proto.Reject,
        proto.MuValues,
        proto.Shutdown,
    )
    while True:
        msg = io.recv(
            expected_msgs,
            mu_records=lambda: len(enumerate_nodes(forest[j], "terminal")),
        )
        if isinstance(msg, proto.Shutdown):
            return
        if isinstance(msg, proto.IterBegin):
            if msg.phase == proto.PHASE_TREES:
                j = 0
                pending = None
            elif msg.phase == proto.PHASE_SIGMA:
                io.send(proto.RssPartial(pairwise_fold(shard.rss_blocks())))
            elif msg.phase == proto.PHASE_HASH:
                io.send(proto.ReplicaHash(
                    hashlib.md5(forest_hash(forest).encode()).digest()
                ))
            else:
                raise ClusterError(f"unknown iteration phase {msg.phase}")
            continue
        tree = forest[j]
        if isinstance(msg, proto.BirthProposal):
            prop = Proposal(BIRTH, j, msg.node_id, msg.v, msg.c)
            left, right = shard_move_stats(shard, tree, grid, prop)
            io.send(proto.MoveStats(left.n, right.n, left.s, right.s))
            pending = prop
        elif isinstance(msg, proto.DeathProposal):
            if msg.left_id // 2 != msg.right_id // 2 or msg.left_id + 1 != msg.right_id:
                raise ClusterError("death proposal children are not siblings")
            prop = Proposal(DEATH, j, msg.left_id // 2)
            left, right = shard_move_stats(shard, tree, grid, prop)
            io.send(proto.MoveStats(left.n, right.n, left.s, right.s))
            pending = prop
        elif isinstance(msg, proto.BirthAccept):
            if pending is None or pending.node_id != msg.node_id:
                raise ClusterError("birth accept does not match the pending proposal")
            node = tree.node(msg.node_id)
            shard.apply_birth(
                j, msg.node_id, msg.v, grid.value(msg.v, msg.c), node.mu,
                msg.mu_left, msg.mu_right,
            )
            tree.birth(msg.node_id, msg.v, msg.c, msg.mu_left, msg.mu_right)
            pending = None
            _send_mu_stats(io, shard, tree, j)
        elif isinstance(msg, proto.DeathAccept):
            if pending is None or pending.node_id != msg.node_id:
                raise ClusterError("death accept does not match the pending proposal")
            node = tree.node(msg.node_id)
            shard.apply_death(j, msg.node_id, node.left.mu, node.right.mu, msg.mu)
            tree.death(msg.node_id, msg.mu)
            pending = None
            _send_mu_stats(io, shard, tree, j)
        elif isinstance(msg, proto.Reject):
            # Decision for a pending proposal, or a bare reject for a tree
            # whose drawn proposal had no admissible rule.
            pending = None
            _send_mu_stats(io, shard, tree, j)
        elif isinstance(msg, proto.MuValues):
            terminals = enumerate_nodes(tree, "terminal")
            if len(msg.values) != len(terminals):
                raise ClusterError("mu values do not match the terminal count")
            ids = np.array([t.id for t in terminals], dtype=np.uint32)
            old = np.array([t.mu for t in terminals], dtype=np.float64)
            new = np.array(msg.values, dtype=np.float64)
            shard.apply_mus(j, ids, old, new)
            for t, mu in zip(terminals, msg.values):
                t.mu = float(mu)
            j = (j + 1) % setup.m


def _send_mu_stats(io: MessageIO, shard: ShardData, tree: Tree, j: int) -> None:
    stats = shard_mu_stats(shard, tree, j)
    io.send(
        proto.MuStats(tuple((st.n, st.s, st.s2) for st in stats)),
        expected_records=len(enumerate_nodes(tree, "terminal")),
    )


# ---------------------------------------------------------------------------
# Master
# ---------------------------------------------------------------------------

class RemoteProvider(StatsProvider):
    """Statistics provider that speaks the wire protocol to every worker."""

    def __init__(self, ios: dict[int, MessageIO], n_total: int):
        self.ios = [ios[rank] for rank in sorted(ios)]
        self.n_total = n_total
        self._iteration = 0

    def _broadcast(self, msg: proto.Message, expected_records: int | None = None) -> None:
        for io in self.ios:
            io.send(msg, expected_records)

    def begin_iteration(self, iteration: int) -> None:
        self._iteration = iteration
        self._broadcast(proto.IterBegin(iteration, proto.PHASE_TREES))

    def null_move(self, j: int) -> None:
        self._broadcast(proto.Reject())

    def move_stats(self, j, tree, prop):
        if prop.move == BIRTH:
            self._broadcast(proto.BirthProposal(prop.node_id, prop.v, prop.c))
        else:
            left_id, right_id = children_ids(prop.node_id)
            self._broadcast(proto.DeathProposal(left_id, right_id))
        lefts = []
        rights = []
        for io in self.ios:
            msg = io.recv((proto.MoveStats,))
            # Wire move stats carry no sum of squares; the MH step needs none.
            lefts.append(SuffStats(msg.n_left, msg.sum_left, 0.0))
            rights.append(SuffStats(msg.n_right, msg.sum_right, 0.0))
        return reduce_stats(lefts), reduce_stats(rights)

    def apply_birth(self, j, tree, prop, mu_l, mu_r):
        self._broadcast(proto.BirthAccept(prop.node_id, prop.v, prop.c, mu_l, mu_r))

    def apply_death(self, j, tree, prop, mu):
        self._broadcast(proto.DeathAccept(prop.node_id, mu))

    def reject_move(self, j, prop):
        self._broadcast(proto.Reject())

    def mu_stats(self, j, tree):
        b = len(enumerate_nodes(tree, "terminal"))
        partials = []
        for io in self.ios:
            msg = io.recv((proto.MuStats,), mu_records=b)
            if len(msg.records) != b:
                raise ClusterError("mu stats record count does not match terminal count")
            partials.append(
                [SuffStats(n, s, s2) for n, s, s2 in msg.records]
            )
        return [
            reduce_stats([partials[w][i] for w in range(len(partials))]) for i in range(b)
        ]

    def apply_mus(self, j, tree, ids, old, new):
        self._broadcast(proto.MuValues(tuple(float(v) for v in new)), expected_records=ids.size)

    def rss(self) -> float:
        self._broadcast(proto.IterBegin(self._iteration, proto.PHASE_SIGMA))
        partials = [io.recv((proto.RssPartial,)).rss for io in self.ios]
        return reduce_stats(partials)

    def replica_hashes(self) -> list[bytes]:
        self._broadcast(proto.IterBegin(self._iteration, proto.PHASE_HASH))
        return [io.recv((proto.ReplicaHash,)).digest for io in self.ios]

    def finish(self) -> None:
        self._broadcast(proto.Shutdown())


def run_master(
    channels: dict[int, Channel],
    settings: FitSettings,
    *,
    audits: dict[int, ByteAudit] | None = None,
    captures: dict[int, list] | None = None,
    collect_hashes: bool = False,
    collect_trace: bool = False,
    check_replicas: bool = False,
    on_iteration: Callable[[int, float, list[Tree]], None] | None = None,
) -> ChainResult:
    """Drive the full distributed chain over connected worker channels.

    The channels map is keyed by rank (1..p); workers must already have sent
    nothing (the handshake starts here).  Returns the same result structure
    as the serial sampler: for equal seeds and block layouts the two are
    bit-identical.
    """
    settings.validate()
    p = len(channels)
    blocks = settings.reduction_blocks or p
    ios = {
        rank: MessageIO(
            chan,
            audits.get(rank) if audits else None,
            captures.get(rank) if captures else None,
        )
        for rank, chan in channels.items()
    }

    hellos: dict[int, proto.Hello] = {}
    metas: dict[int, proto.ShardMeta] = {}
    for rank in sorted(ios):
        hello = ios[rank].recv((proto.Hello,))
        if hello.version != proto.PROTOCOL_VERSION:
            raise ClusterError(
                f"protocol version mismatch: worker {hello.rank} speaks {hello.version}"
            )
        if hello.rank != rank:
            raise ClusterError(f"rank mismatch on channel {rank}: HELLO says {hello.rank}")
        hellos[rank] = hello
        metas[rank] = ios[rank].recv((proto.ShardMeta,))

    n_total = sum(h.shard_rows for h in hellos.values())
    for rank in sorted(ios):
        lo, hi = worker_row_range(n_total, blocks, p, rank)
        if hellos[rank].shard_rows != hi - lo:
            raise ClusterError(
                f"rank {rank} holds {hellos[rank].shard_rows} rows, layout expects {hi - lo}"
            )

    ordered = [metas[rank] for rank in sorted(metas)]
    derived = derive_run_constants(
        n_total,
        min(m.y_min for m in ordered),
        max(m.y_max for m in ordered),
        pairwise_fold([m.y_sum for m in ordered]),
        pairwise_fold([m.y_sumsq for m in ordered]),
        np.min([m.x_min for m in ordered], axis=0),
        np.max([m.x_max for m in ordered], axis=0),
    )
    setup = proto.RunSetup(
        settings.m,
        settings.numcut,
        blocks,
        n_total,
        derived.y_mid,
        derived.y_range,
        tuple(derived.x_min),
        tuple(derived.x_max),
    )
    for rank in sorted(ios):
        ios[rank].send(setup)

    grid = CutpointGrid.from_ranges(derived.x_min, derived.x_max, settings.numcut)
    prior = resolve_prior(settings, derived.sd_scaled)
    provider = RemoteProvider(ios, n_total)
    forest = [Tree() for _ in range(settings.m)]
    rng = np.random.default_rng(settings.seed)

    def iteration_hook(it: int, sigma: float, f: list[Tree]) -> None:
        if check_replicas:
            expected = hashlib.md5(forest_hash(f).encode()).digest()
            for rank, digest in zip(sorted(ios), provider.replica_hashes()):
                if digest != expected:
                    raise ClusterError(f"rank {rank} forest replica diverged at iteration {it}")
        if on_iteration is not None:
            on_iteration(it, sigma, f)

    result = run_chain_core(
        forest,
        grid,
        prior,
        derived.sd_scaled,
        rng,
        provider,
        settings,
        collect_hashes=collect_hashes,
        collect_trace=collect_trace,
        on_iteration=iteration_hook,
    )
    result.y_mid = derived.y_mid
    result.y_range = derived.y_range
    return result


# ---------------------------------------------------------------------------
# In-process cluster (worker threads over byte queues)
# ---------------------------------------------------------------------------

def run_cluster_inprocess(
    x: np.ndarray,
    y: np.ndarray,
    settings: FitSettings,
    workers: int,
    *,
    audits: dict[int, ByteAudit] | None = None,
    worker_audits: dict[int, ByteAudit] | None = None,
    captures: dict[int, list] | None = None,
    collect_hashes: bool = False,
    collect_trace: bool = False,
    check_replicas: bool = False,
) -> ChainResult:
    """Run master plus `workers` worker threads inside this process."""
    settings.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    blocks = settings.reduction_blocks or workers
    failures: list[BaseException] = []

    def fail_check() -> None:
        if failures:
            raise ClusterError(f"worker failed: {failures[0]!r}") from failures[0]

    master_channels: dict[int, Channel] = {}
    threads: list[threading.Thread] = []
    for rank in range(1, workers + 1):
        lo, hi = worker_row_range(n, blocks, workers, rank)
        master_end, worker_end = queue_channel_pair(fail_check)
        master_channels[rank] = master_end

        def target(rank=rank, chan=worker_end, lo=lo, hi=hi):
            try:
                run_worker(
                    chan, x[lo:hi], y[lo:hi], rank, workers, blocks,
                    audit=worker_audits.get(rank) if worker_audits else None,
                )
            except BaseException as exc:  # noqa: BLE001 - reported to the master
                failures.append(exc)

        thread = threading.Thread(target=target, name=f"bartgrid-worker-{rank}", daemon=True)
        threads.append(thread)
        thread.start()

    try:
        result = run_master(
            master_channels,
            settings,
            audits=audits,
            captures=captures,
            collect_hashes=collect_hashes,
            collect_trace=collect_trace,
            check_replicas=check_replicas,
        )
    except BaseException:
        # Unblock workers stuck in recv so the threads can exit promptly.
        for chan in master_channels.values():
            try:
                chan.send(proto.encode(proto.Shutdown()))
            except Exception:
                pass
        for thread in threads:
            thread.join(timeout=2.0)
        raise
    for thread in threads:
        thread.join(timeout=10.0)
    fail_check()
    return result


# ---------------------------------------------------------------------------
# TCP endpoints
# ---------------------------------------------------------------------------

def serve_master(
    listen: tuple[str, int],
    workers: int,
    settings: FitSettings,
    *,
    accept_timeout: float = 120.0,
    on_bound: Callable[[tuple[str, int]], None] | None = None,
    **master_kwargs,
) -> ChainResult:
    """Listen, accept `workers` connections, run the chain, shut down."""
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    channels: dict[int, Channel] = {}
    try:
        server.bind(listen)
        server.listen(workers)
        server.settimeout(accept_timeout)
        if on_bound is not None:
            on_bound(server.getsockname())
        pending: list[SocketChannel] = []
        for _ in range(workers):
            try:
                conn, _addr = server.accept()
            except socket.timeout:
                raise ClusterError(
                    f"only {len(pending)} of {workers} workers connected"
                ) from None
            pending.append(SocketChannel(conn))
        # Peek each HELLO to learn the rank without consuming the stream:
        # ranks arrive in arbitrary order, so buffer the frame and replay it.
        for chan in pending:
            frame = chan.recv(1 + 12)
            hello = proto.decode(frame)
            if not isinstance(hello, proto.Hello):
                raise ClusterError("worker did not start with HELLO")
            if hello.rank in channels:
                raise ClusterError(f"duplicate worker rank {hello.rank}")
            channels[hello.rank] = _ReplayChannel(frame, chan)
        if sorted(channels) != list(range(1, workers + 1)):
            raise ClusterError(f"expected ranks 1..{workers}, got {sorted(channels)}")
        return run_master(channels, settings, **master_kwargs)
    finally:
        for chan in channels.values():
            chan.close()
        server.close()


class _ReplayChannel(Channel):
    """Channel that replays already-read bytes before the live stream."""

    def __init__(self, buffered: bytes, inner: Channel):
        self._buffer = bytearray(buffered)
        self._inner = inner

    def send(self, data: bytes) -> None:
        self._inner.send(data)

    def recv(self, n: int) -> bytes:
        if self._buffer:
            take = min(n, len(self._buffer))
            out = bytes(self._buffer[:take])
            del self._buffer[:take]
            if take < n:
                out += self._inner.recv(n - take)
            return out
        return self._inner.recv(n)

    def close(self) -> None:
        self._inner.close()


def connect_worker(
    address: tuple[str, int],
    x: np.ndarray,
    y: np.ndarray,
    rank: int,
    workers: int,
    reduction_blocks: int,
    *,
    retry_for: float = 30.0,
    audit: ByteAudit | None = None,
) -> None:
    """Connect to the master (with retries while it binds) and serve a shard."""
    deadline = time.monotonic() + retry_for
    last_err: Exception | None = None
    sock = None
    while time.monotonic() < deadline:
        try:
            sock = socket.create_connection(address, timeout=10.0)
            break
        except OSError as exc:
            last_err = exc
            time.sleep(0.1)
    if sock is None:
        raise ClusterError(f"could not reach master at {address}: {last_err}")
    chan = SocketChannel(sock)
    try:
        run_worker(chan, x, y, rank, workers, reduction_blocks, audit=audit)
    finally:
        chan.close()
