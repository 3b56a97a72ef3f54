"""End-to-end properties of the write paths, the log modes and recovery.

The cheap checks run by default; the experiment-scale ones are marked slow.
"""

import dataclasses
import random
from collections import Counter

import pytest

from bminus.bench.crash_harness import crash_suite, explore
from bminus.bench.workload import WorkloadSpec, make_device, populate, run
from bminus.core.device import BLOCK_SIZE, CompressedBlockDevice, DeflateCodec
from bminus.core.engine import Engine, EngineConfig
from bminus.core.metrics import WriteCategory
from conftest import key, small_config


def log_writes(trace):
    """(op, lba) of every redo log write and trim in trace order."""
    events = []
    for entry in trace:
        if getattr(entry.tag, "issuer", "") != "redo":
            continue
        events.append((entry.op, entry.lba))
    return events


def rewritten_lbas(events):
    live = set()
    rewritten = set()
    for op, lba in events:
        if op == "trim":
            live.discard(lba)
        elif lba in live:
            rewritten.add(lba)
        else:
            live.add(lba)
    return rewritten


class TestLogModes:
    """Test the single-write property of sparse logging."""

    @pytest.mark.parametrize("log_mode, expect_rewrites", [("sparse", False), ("packed", True)])
    def test_log_block_rewrites(self, device, log_mode, expect_rewrites):
        """Should write each sparse log block once between trims and rewrite packed ones."""
        engine = Engine.open(small_config(log_mode=log_mode), device)
        device.start_trace()
        for n in range(200):
            with engine.transaction() as txn:
                engine.put(txn, key(n), b"v" * 100)
        trace = device.stop_trace()
        engine.abandon()
        assert bool(rewritten_lbas(log_writes(trace))) is expect_rewrites

    def test_sparse_log_compresses_better(self):
        """Should store fewer physical log bytes in sparse mode for small commits."""
        physical = {}
        for log_mode in ("sparse", "packed"):
            device = CompressedBlockDevice(4096, codec=DeflateCodec())
            engine = Engine.open(small_config(log_mode=log_mode), device)
            before = engine.accounting.snapshot()
            for n in range(100):
                with engine.transaction() as txn:
                    engine.put(txn, key(n), random.Random(n).randbytes(60) + bytes(60))
            report = engine.accounting.report(before)
            physical[log_mode] = report.physical[WriteCategory.LOG]
            engine.abandon()
        assert physical["sparse"] < physical["packed"]


class TestDeltaPath:
    """Test that small page changes cost one delta block."""

    def test_small_change_writes_only_delta_block(self, engine):
        """Should flush a one-record update as a single delta block write."""
        with engine.transaction() as txn:
            for n in range(30):
                engine.put(txn, key(n), b"v" * 100)
        engine.flush_all()
        with engine.transaction() as txn:
            engine.put(txn, key(7), b"w" * 100)
        engine.device.start_trace()
        engine.flush_worker_pass()
        issuers = [e.tag.issuer for e in engine.device.stop_trace() if e.op == "write"]
        assert issuers == ["modlog"]

    def test_evicted_page_reads_its_delta(self, engine):
        """Should rebuild an evicted page from its slot and delta block."""
        with engine.transaction() as txn:
            for n in range(30):
                engine.put(txn, key(n), b"v" * 100)
        engine.flush_all()
        with engine.transaction() as txn:
            engine.put(txn, key(7), b"w" * 100)
        engine.flush_all()
        assert engine.pool.evict_all() == 0
        assert engine.get(key(7)) == b"w" * 100
        assert engine.counters.modlog_applied >= 1


def experiment(mode, threshold=2048, record_size=128, page_size=8192, op_count=6000, seed=5,
               cache_bytes=None, dataset_bytes=2 * 1024 * 1024, threads=1, **engine_options):
    """Populate and run a write-only workload; the timer policy needs the background timer."""
    timer = engine_options.get("log_policy") == "per-timer"
    config = EngineConfig(page_size=page_size, threshold=threshold, mode=mode,
                          cache_bytes=cache_bytes or 16 * page_size, background=timer,
                          flusher_count=0, log_fraction=1 / 16,
                          **engine_options).with_threshold_cap().validate()
    spec = WorkloadSpec(record_size=record_size, dataset_bytes=dataset_bytes, client_threads=threads,
                        op_count=op_count, seed=seed, populate_batch=256).validate()
    device = make_device(config, spec, "deflate")
    with Engine.open(config, device) as engine:
        dataset = populate(spec, engine)
        return run(spec, engine, dataset)


def page_wa(result):
    return (result.wa.physical_wa_of(WriteCategory.PG)
            + result.wa.physical_wa_of(WriteCategory.E))


@pytest.mark.slow
class TestWriteAmplification:
    """Test WA relations between modes and thresholds."""

    def test_bminus_page_traffic_well_below_baseline(self):
        """Should cut page write traffic to under half of the page-table baseline."""
        bminus = experiment("bminus")
        baseline = experiment("baseline")
        assert bminus.conserved and baseline.conserved
        assert page_wa(bminus) < 0.5 * page_wa(baseline)
        assert bminus.wa.physical_wa < baseline.wa.physical_wa

    def test_threshold_trades_page_writes_for_space(self):
        """Should lower page writes and raise delta overhead as the threshold grows."""
        results = {t: experiment("bminus", threshold=t) for t in (1024, 2048, 4096)}
        pg = {t: r.wa.physical[WriteCategory.PG] for t, r in results.items()}
        beta = {t: r.overhead.beta for t, r in results.items()}
        assert pg[4096] <= pg[2048] <= pg[1024]
        assert beta[4096] >= beta[2048] >= beta[1024]
        assert all(0 <= b <= (BLOCK_SIZE - 28) / 8192 for b in beta.values())

    def test_total_wa_under_timer_policy(self):
        """Should keep total physical WA with four clients on a timer far below the baseline."""
        options = dict(log_policy="per-timer", log_timer_interval=0.05, threads=4)
        bminus = experiment("bminus", **options)
        baseline = experiment("baseline", **options)
        assert bminus.conserved and baseline.conserved
        assert bminus.wa.physical[WriteCategory.E] == 0
        # Desk-scale bound; a 16-page cache writes back nearly every update.
        assert bminus.wa.physical_wa <= 0.4 * baseline.wa.physical_wa

    def test_record_size_scaling(self):
        """Should grow baseline WA near-linearly as records shrink, bminus WA less so."""
        wa = {(mode, size): experiment(mode, record_size=size).wa.physical_wa
              for mode in ("bminus", "baseline") for size in (16, 128)}
        baseline_ratio = wa["baseline", 16] / wa["baseline", 128]
        bminus_ratio = wa["bminus", 16] / wa["bminus", 128]
        assert baseline_ratio >= 4
        assert bminus_ratio < baseline_ratio

    def test_page_size_scaling(self):
        """Should nearly double baseline WA with twice the page size, bminus WA less so."""
        # Same cache bytes for both sizes keeps the cached fraction of the dataset equal.
        wa = {(mode, size): experiment(mode, page_size=size, cache_bytes=256 * 1024).wa.physical_wa
              for mode in ("bminus", "baseline") for size in (8192, 16384)}
        baseline_ratio = wa["baseline", 16384] / wa["baseline", 8192]
        bminus_ratio = wa["bminus", 16384] / wa["bminus", 8192]
        assert 1.6 <= baseline_ratio <= 2.4
        assert bminus_ratio < baseline_ratio


def log_wa(log_mode, threads):
    result = experiment("bminus", log_mode=log_mode, threads=threads, op_count=3000,
                        dataset_bytes=512 * 1024)
    assert result.conserved
    return result.wa.physical_wa_of(WriteCategory.LOG)


@pytest.mark.slow
class TestLogThreadScaling:
    """Test log WA against the number of committing clients."""

    def test_sparse_log_wa_independent_of_threads(self):
        """Should keep sparse log WA nearly flat from one to sixteen clients."""
        wa = [log_wa("sparse", threads) for threads in (1, 2, 4, 8, 16)]
        # Grouped commits share one block header, so more clients cost slightly less.
        assert max(wa) < 1.35 * min(wa)

    def test_packed_single_client_rewrites_dominate(self):
        """Should cost a single packed client at least three times the sparse log WA."""
        assert log_wa("packed", 1) >= 3 * log_wa("sparse", 1)


@pytest.mark.slow
class TestDeltaOverhead:
    """Test the steady-state delta overhead against the threshold."""

    # Expected mean delta bytes per page, as a fraction of the page size.
    BETA = {
        8192: {1024: 0.056, 2048: 0.124, 4096: 0.270},
        16384: {1024: 0.028, 2048: 0.060, 4096: 0.127},
    }

    @pytest.mark.parametrize("page_size", [8192, 16384])
    def test_beta_at_steady_state(self, page_size):
        """Should land within three points of the expected overhead and rise with the threshold."""
        # About 90 pages updated a few hundred times each reaches the steady state.
        beta = {}
        for threshold, expected in self.BETA[page_size].items():
            result = experiment("bminus", threshold=threshold, page_size=page_size, op_count=40_000,
                                dataset_bytes=64 * page_size)
            beta[threshold] = result.overhead.beta
            assert beta[threshold] == pytest.approx(expected, abs=0.03)
        assert beta[1024] < beta[2048] < beta[4096]


@pytest.mark.slow
class TestModelEquivalence:
    """Test long randomized histories against a dict."""

    @pytest.mark.parametrize("mode", ["bminus", "baseline"])
    @pytest.mark.parametrize("page_size", [8192, 16384])
    def test_random_history(self, mode, page_size):
        """Should match a dict after every batch, including after a reopen."""
        config = small_config(mode=mode, page_size=page_size, cache_bytes=16 * page_size)
        device = CompressedBlockDevice(16384, codec=DeflateCodec())
        rng = random.Random(page_size)
        model = {}
        engine = Engine.open(config, device)
        ops = Counter()
        for batch in range(10_000):
            staged = set()
            with engine.transaction() as txn:
                for _ in range(10):
                    k = key(rng.randrange(20_000))
                    roll = rng.random()
                    if roll < 0.6:
                        value = rng.randbytes(rng.randrange(1, 200))
                        engine.put(txn, k, value)
                        model[k] = value
                        staged.add(k)
                        ops["put"] += 1
                    elif roll < 0.75:
                        engine.delete(txn, k)
                        model.pop(k, None)
                        staged.add(k)
                        ops["delete"] += 1
                    elif roll < 0.95:
                        assert engine.get(k, txn) == model.get(k)
                        ops["get"] += 1
                    else:
                        got = engine.scan(k, 5)
                        assert all(model.get(gk) == gv for gk, gv in got if gk not in staged)
                        ops["scan"] += 1
            if batch % 2500 == 2499:
                engine.close()
                engine = Engine.open(config, device)
        assert dict(engine.items()) == model
        engine.close()
        assert sum(ops.values()) == 100_000


@pytest.mark.slow
class TestCrashExploration:
    """Test every crash point of a full-size workload."""

    def test_every_write_of_a_workload(self):
        """Should pass every crash point and exercise both slot recovery cases."""
        summary = explore(seed=0, txn_count=200, stride=1)
        assert summary.passed, [v.describe() for v in summary.failures[:5]]
        assert summary.counters.torn_slots > 0
        assert summary.counters.lsn_resolved > 0
        assert summary.counters.modlog_corrupt > 0
        assert summary.counters.torn_log_blocks > 0

    @pytest.mark.parametrize("page_size", [8192, 16384])
    def test_modes_survive_sampled_crashes(self, page_size):
        """Should pass sampled crash points in every mode."""
        for mode in ("bminus", "baseline", "journal"):
            config = dataclasses.replace(EngineConfig(), page_size=page_size, mode=mode)
            summary = explore(seed=1, txn_count=60, stride=7, config=config)
            assert summary.passed, [v.describe() for v in summary.failures[:5]]

    def test_sampled_multithreaded_crashes(self):
        """Should keep the committed prefix at one random crash per seed with four clients."""
        summary = crash_suite(100, txn_count=40, clients=4)
        assert summary.scenarios == 100
        assert summary.passed, [v.describe() for v in summary.failures[:5]]
