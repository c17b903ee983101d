import socket
import threading

import numpy as np
import pytest

from bartgrid import protocol as proto
from bartgrid.cluster import (
    ByteAudit,
    ClusterError,
    MessageIO,
    SocketChannel,
    connect_worker,
    queue_channel_pair,
    reduce_stats,
    run_cluster_inprocess,
    serve_master,
    shard_block_slices,
    shard_data,
    worker_row_range,
)
from bartgrid.protocol import iteration_byte_count
from bartgrid.sampler import FitSettings, SuffStats, partition_bounds, run_serial


def toy_data(n=400, d=3, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (n, d))
    y = np.sin(2 * x[:, 0]) + 0.5 * x[:, 1] + 0.1 * rng.standard_normal(n)
    return x, y


def toy_settings(**overrides):
    base = dict(m=6, draws=40, burn=10, thin=5, seed=42, min_leaf=2, numcut=25)
    base.update(overrides)
    return FitSettings(**base)


class TestShardData:
    def test_near_equal_sizes(self):
        x, y = toy_data(10)
        shards = shard_data(x, y, 3)
        assert [s.n for s in shards] == [4, 3, 3]

    def test_paper_scale_partition(self):
        # 7,016,430 rows over 192 workers: 7016430 = 174*36544 + 18*36543.
        sizes = np.diff(partition_bounds(7_016_430, 192))
        assert sizes.sum() == 7_016_430
        assert sizes.max() - sizes.min() <= 1
        assert set(np.unique(sizes)) == {36543, 36544}

    def test_concatenation_round_trip(self):
        x, y = toy_data(101)
        shards = shard_data(x, y, 7)
        assert np.array_equal(np.concatenate([s.x for s in shards]), x)
        assert np.array_equal(np.concatenate([s.y for s in shards]), y)
        assert shards[0].start == 0 and shards[-1].stop == 101

    def test_more_workers_than_rows(self):
        x, y = toy_data(3)
        with pytest.raises(ValueError, match="more workers than rows"):
            shard_data(x, y, 4)

    def test_worker_row_ranges_tile_the_data(self):
        for n, blocks, p in [(100, 4, 2), (1001, 8, 4), (57, 2, 2), (64, 16, 4)]:
            stops = [worker_row_range(n, blocks, p, r) for r in range(1, p + 1)]
            assert stops[0][0] == 0 and stops[-1][1] == n
            for (lo1, hi1), (lo2, _hi2) in zip(stops, stops[1:]):
                assert hi1 == lo2
            for r, (lo, hi) in enumerate(stops, start=1):
                slices = shard_block_slices(hi - lo, blocks, p)
                assert slices[0][0] == 0 and slices[-1][1] == hi - lo

    def test_block_layout_validation(self):
        with pytest.raises(ValueError, match="multiple"):
            worker_row_range(100, 3, 2, 1)
        with pytest.raises(ValueError, match="power of two"):
            worker_row_range(100, 12, 2, 1)


class TestReduceStats:
    def test_all_zero(self):
        total = reduce_stats([SuffStats(), SuffStats(), SuffStats()])
        assert total == SuffStats(0, 0.0, 0.0)

    def test_single_identity(self):
        st = SuffStats(3, 1.5, 2.0)
        assert reduce_stats([st]) == st

    def test_rank_sorted_is_deterministic(self):
        rng = np.random.default_rng(1)
        parts = [SuffStats(int(rng.integers(10)), rng.normal(), abs(rng.normal())) for _ in range(7)]
        direct = reduce_stats(parts)
        order = rng.permutation(7)
        shuffled = [parts[i] for i in order]
        resorted = [shuffled[int(np.argsort(order)[i])] for i in range(7)]
        assert resorted == parts
        assert reduce_stats(resorted) == direct

    def test_missing_rank_errors(self):
        with pytest.raises(ClusterError, match="missing partial"):
            reduce_stats([SuffStats(), None, SuffStats()])


class TestEquivalence:
    def test_single_worker_equals_serial(self):
        x, y = toy_data(1000)
        settings = toy_settings(draws=100, burn=20, thin=20, reduction_blocks=1)
        serial = run_serial(x, y, settings, collect_hashes=True)
        one = run_cluster_inprocess(x, y, settings, workers=1, collect_hashes=True)
        assert np.array_equal(serial.sigmas, one.sigmas)
        assert serial.forest_hashes == one.forest_hashes

    def test_serial_vs_two_and_four_workers(self):
        x, y = toy_data(400)
        settings = toy_settings(reduction_blocks=4)
        serial = run_serial(x, y, settings, collect_hashes=True)
        two = run_cluster_inprocess(x, y, settings, workers=2, collect_hashes=True)
        four = run_cluster_inprocess(x, y, settings, workers=4, collect_hashes=True)
        assert np.array_equal(serial.sigmas, two.sigmas)
        assert np.array_equal(serial.sigmas, four.sigmas)
        assert serial.forest_hashes == two.forest_hashes == four.forest_hashes
        assert serial.y_mid == two.y_mid == four.y_mid
        assert serial.prior.lam == two.prior.lam == four.prior.lam

    def test_prior_only_distributed_matches_serial(self):
        x, y = toy_data(64)
        settings = toy_settings(m=2, prior_only=True, min_leaf=0, reduction_blocks=2)
        serial = run_serial(x, y, settings, collect_hashes=True)
        dist = run_cluster_inprocess(x, y, settings, workers=2, collect_hashes=True)
        assert serial.forest_hashes == dist.forest_hashes
        assert np.array_equal(serial.mean_b, dist.mean_b)

    def test_replica_coherence_debug_mode(self):
        x, y = toy_data(120)
        settings = toy_settings(draws=15, burn=5, thin=2)
        result = run_cluster_inprocess(x, y, settings, workers=2, check_replicas=True)
        assert result.sigmas.size == 15


class TestByteAccounting:
    def test_audit_matches_iteration_byte_count(self):
        x, y = toy_data(200)
        settings = toy_settings(draws=12, burn=2, thin=2)
        worker_audits = {1: ByteAudit(), 2: ByteAudit()}
        result = run_cluster_inprocess(
            x, y, settings, workers=2, worker_audits=worker_audits, collect_trace=True
        )
        assert result.trace is not None
        predicted = sum(
            iteration_byte_count(
                [(rec.move, rec.accepted) for rec in itrace],
                [rec.b_after for rec in itrace],
                p=2,
            )
            for itrace in result.trace
        )
        observed = sum(a.sampler_payload_total() for a in worker_audits.values())
        assert observed == predicted

    @pytest.mark.parametrize("n", [300, 1200])
    def test_fixed_opcode_sizes_on_the_wire(self, n):
        # Same assertions at two dataset sizes: no sampler payload may grow
        # with the shard size.
        x, y = toy_data(n)
        settings = toy_settings(draws=10, burn=2, thin=2)
        audit = ByteAudit()
        run_cluster_inprocess(x, y, settings, workers=2, worker_audits={1: audit, 2: ByteAudit()})
        fixed = {
            proto.OP_BIRTH_PROPOSAL: 12,
            proto.OP_DEATH_PROPOSAL: 8,
            proto.OP_MOVE_STATS: 24,
            proto.OP_BIRTH_ACCEPT: 28,
            proto.OP_DEATH_ACCEPT: 28,
            proto.OP_REJECT: 0,
            proto.OP_RSS_PARTIAL: 8,
        }
        for direction, counts in (("sent", audit.sent), ("received", audit.received)):
            count_map = audit.sent_count if direction == "sent" else audit.received_count
            for opcode, total in counts.items():
                if opcode in fixed:
                    assert total == fixed[opcode] * count_map[opcode]
                elif opcode == proto.OP_MU_STATS:
                    assert total % 20 == 0
                elif opcode == proto.OP_MU_VALUES:
                    assert total % 8 == 0

    def test_golden_trace_replays_identically(self):
        # Capture every frame of a live 2-worker run, then decode the byte
        # trace offline: every frame must parse, and re-encoding the parsed
        # message must reproduce the captured bytes exactly.
        x, y = toy_data(150)
        settings = toy_settings(draws=6, burn=1, thin=1)
        captures: dict[int, list] = {1: [], 2: []}
        result = run_cluster_inprocess(x, y, settings, workers=2, captures=captures)
        assert result.sigmas.size == settings.draws
        sampler_ops_seen = set()
        for rank, frames in captures.items():
            assert frames, "captured trace must be non-empty"
            for _direction, frame in frames:
                msg = proto.decode(frame)
                assert proto.encode(msg) == frame
                if frame[0] in proto.SAMPLER_OPCODES:
                    sampler_ops_seen.add(frame[0])
        assert proto.OP_MOVE_STATS in sampler_ops_seen
        assert proto.OP_MU_STATS in sampler_ops_seen
        assert proto.OP_RSS_PARTIAL in sampler_ops_seen


class TestTransportErrors:
    def test_unknown_opcode_is_fatal(self):
        a, b = queue_channel_pair()
        b.send(b"\xfe")
        io = MessageIO(a)
        with pytest.raises(ClusterError, match="unknown opcode"):
            io.recv((proto.Reject,))

    def test_unexpected_message_type(self):
        a, b = queue_channel_pair()
        b.send(proto.encode(proto.Reject()))
        io = MessageIO(a)
        with pytest.raises(ClusterError, match="unexpected Reject"):
            io.recv((proto.MoveStats,))

    def test_closed_socket_raises(self):
        left, right = socket.socketpair()
        chan = SocketChannel(left)
        right.close()
        with pytest.raises(ClusterError, match="closed the connection"):
            chan.recv(4)

    def test_worker_failure_surfaces(self):
        # A worker that dies instantly must abort the master with a diagnostic.
        x, y = toy_data(40)
        settings = toy_settings(draws=4, burn=1, thin=1)

        import bartgrid.cluster as cluster_mod

        orig = cluster_mod.run_worker

        def dying_worker(channel, *args, **kwargs):
            raise RuntimeError("synthetic worker crash")

        cluster_mod.run_worker = dying_worker
        try:
            with pytest.raises(ClusterError):
                run_cluster_inprocess(x, y, settings, workers=2)
        finally:
            cluster_mod.run_worker = orig


class TestTcpTransport:
    def test_tcp_matches_inprocess(self):
        x, y = toy_data(240)
        settings = toy_settings(draws=20, burn=5, thin=5, reduction_blocks=2)
        inproc = run_cluster_inprocess(x, y, settings, workers=2, collect_hashes=True)

        n = y.shape[0]
        results = {}
        errors = []

        def master():
            try:
                results["master"] = serve_master(
                    ("127.0.0.1", 0), 2, settings, on_bound=lambda addr: bound.append(addr),
                    collect_hashes=True,
                )
            except BaseException as exc:
                errors.append(exc)

        bound: list = []
        mt = threading.Thread(target=master, daemon=True)
        mt.start()
        while not bound and mt.is_alive():
            pass
        host, port = bound[0]
        workers = []
        for rank in (1, 2):
            lo, hi = worker_row_range(n, 2, 2, rank)

            def target(rank=rank, lo=lo, hi=hi):
                try:
                    connect_worker((host, port), x[lo:hi], y[lo:hi], rank, 2, 2)
                except BaseException as exc:
                    errors.append(exc)

            wt = threading.Thread(target=target, daemon=True)
            workers.append(wt)
            wt.start()
        mt.join(timeout=90)
        for wt in workers:
            wt.join(timeout=10)
        assert not errors, errors
        tcp = results["master"]
        assert np.array_equal(tcp.sigmas, inproc.sigmas)
        assert tcp.forest_hashes == inproc.forest_hashes
