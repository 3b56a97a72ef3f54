"""Crash-point exploration against the committed-prefix oracle.

A scenario replays a deterministic workload on a fresh device armed with a
``FaultPlan``, lets the device cut power, reopens the engine and compares
its full contents with the state the acknowledged commits imply. The
expected state is computed from the workload itself, never from recovery.
"""

import dataclasses
import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from ..core.device import BLOCK_SIZE, CompressedBlockDevice, FaultPlan, TraceEntry, ZeroRunCodec
from ..core.engine import Engine, EngineConfig
from ..core.errors import BMinusError
from ..core.metrics import RecoveryCounters

logger = logging.getLogger(__name__)

CRASH_DEVICE_BLOCKS = 2048
TORN_FRACTION = 0.5
# Cut just past the block header and into the first record.
HEADER_TEAR_FRACTION = 24 / BLOCK_SIZE
KEY_SPACE = 1500
FLUSH_EVERY = 7
EXTRAS_PER_CLASS = 3

STRIDE = "stride"
TORN_SLOT = "torn-slot"
SUPPRESSED_TRIM = "suppressed-trim"
TORN_MODLOG = "torn-modlog"
TORN_LOG = "torn-log"
SAMPLED = "sampled"
BOUNDARY_KINDS = (TORN_SLOT, SUPPRESSED_TRIM, TORN_MODLOG, TORN_LOG)

# ops of one transaction: (key, value) with ``None`` meaning delete
TxnOps = List[Tuple[bytes, Optional[bytes]]]


def crash_config(base: Optional[EngineConfig] = None) -> EngineConfig:
    """Small, single-threaded configuration whose write trace is reproducible."""
    base = base or EngineConfig()
    return dataclasses.replace(
        base,
        cache_bytes=16 * base.page_size,
        background=False,
        flusher_count=0,
        log_policy="per-commit",
        log_fraction=1 / 32,
        latch_watchdog=0.0,
    ).with_threshold_cap().validate()


def make_workload(seed: int, txn_count: int, client: int = 0) -> List[TxnOps]:
    """Transactions of one client; keys carry the client number as prefix."""
    rng = random.Random(f"{seed}/crash/{client}")
    prefix = bytes([client])
    txns: List[TxnOps] = []
    for _ in range(txn_count):
        ops: TxnOps = []
        for _ in range(rng.randint(1, 4)):
            key = prefix + rng.randrange(KEY_SPACE).to_bytes(8, "big")
            if rng.random() < 0.1:
                ops.append((key, None))
            else:
                size = rng.randint(8, 200)
                ops.append((key, rng.randbytes(size // 2) + bytes(size - size // 2)))
        txns.append(ops)
    return txns


def expected_state(txns: List[TxnOps], prefix: int) -> Dict[bytes, bytes]:
    """Contents after the first ``prefix`` transactions."""
    state: Dict[bytes, bytes] = {}
    for ops in txns[:prefix]:
        for key, value in ops:
            if value is None:
                state.pop(key, None)
            else:
                state[key] = value
    return state


@dataclass(frozen=True)
class CrashScenario:
    seed: int
    txn_count: int
    crash_after: Optional[int]
    partial_write_fraction: Optional[float] = None
    suppress_pending_trims: bool = False
    kind: str = STRIDE
    clients: int = 1

    def fault_plan(self) -> FaultPlan:
        return FaultPlan(
            crash_after_n_block_writes=self.crash_after,
            partial_write_fraction=self.partial_write_fraction,
            suppress_pending_trims=self.suppress_pending_trims,
        )

    @property
    def reproducer(self) -> str:
        return (f"seed={self.seed} write_index={self.crash_after} kind={self.kind} "
                f"txns={self.txn_count} clients={self.clients}")


@dataclass
class Verdict:
    scenario: CrashScenario
    passed: bool
    acked: List[int]
    recovered_records: int = 0
    divergent_keys: List[bytes] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    error: str = ""

    def describe(self) -> str:
        if self.passed:
            return f"PASS {self.scenario.reproducer}"
        detail = self.error or f"{len(self.divergent_keys)} divergent keys, e.g. {self.divergent_keys[:5]}"
        return f"FAIL {self.scenario.reproducer}: {detail}"


class _Driver:
    """Runs one client's transactions and records which commits were acknowledged."""

    def __init__(self, engine: Engine, txns: List[TxnOps]):
        self.engine = engine
        self.txns = txns
        self.acked = 0
        self.in_flight = False

    def __call__(self) -> None:
        engine = self.engine
        try:
            for i, ops in enumerate(self.txns):
                txn = engine.begin()
                for key, value in ops:
                    if value is None:
                        engine.delete(txn, key)
                    else:
                        engine.put(txn, key, value)
                self.in_flight = True
                engine.commit(txn)
                self.in_flight = False
                self.acked = i + 1
                if self.acked % FLUSH_EVERY == 0:
                    engine.flush_worker_pass()
        except BMinusError as e:
            logger.debug("client stopped after %d acked txns: %s", self.acked, e)


class CrashHarness:
    """Builds devices and engines for scenarios of one configuration."""

    def __init__(self, config: Optional[EngineConfig] = None, device_blocks: int = CRASH_DEVICE_BLOCKS,
                 atomic_overwrites: bool = True):
        self.config = crash_config(config)
        self.device_blocks = device_blocks
        self.atomic_overwrites = atomic_overwrites

    def _fresh(self) -> Tuple[CompressedBlockDevice, Engine]:
        device = CompressedBlockDevice(self.device_blocks, codec=ZeroRunCodec())
        return device, Engine.open(self.config, device)

    def _drive(self, engine: Engine, workloads: List[List[TxnOps]]) -> List[_Driver]:
        drivers = [_Driver(engine, txns) for txns in workloads]
        if len(drivers) == 1:
            drivers[0]()
            return drivers
        threads = [threading.Thread(target=d, name=f"bminus-crash-client-{i}") for i, d in enumerate(drivers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        return drivers

    def record_trace(self, seed: int, txn_count: int) -> List[TraceEntry]:
        """Device operations of a fault-free run, starting after format."""
        device, engine = self._fresh()
        device.start_trace()
        self._drive(engine, [make_workload(seed, txn_count)])
        trace = device.stop_trace()
        engine.abandon()
        return trace

    def evaluate(self, scenario: CrashScenario) -> Verdict:
        """Replay to the crash point, reopen and compare with the oracle."""
        workloads = [make_workload(scenario.seed, scenario.txn_count, c) for c in range(scenario.clients)]
        device, engine = self._fresh()
        plan = scenario.fault_plan()
        plan.atomic_overwrites = self.atomic_overwrites
        device.inject_crash(plan)
        drivers = self._drive(engine, workloads)
        if not device.crashed:
            device.crash_now(scenario.suppress_pending_trims)
        engine.abandon()
        device.reopen()

        acked = [d.acked for d in drivers]
        try:
            recovered = Engine.open(self.config, device)
        except BMinusError as e:
            return Verdict(scenario, False, acked, error=f"reopen failed: {type(e).__name__}: {e}")
        try:
            recovered.tree.check_structure()
            contents = dict(recovered.items())
            counters = recovered.counters.as_dict()
        except (BMinusError, AssertionError) as e:
            recovered.abandon()
            return Verdict(scenario, False, acked, error=f"scan failed: {type(e).__name__}: {e}")
        recovered.close()

        divergent: List[bytes] = []
        for client, (driver, txns) in enumerate(zip(drivers, workloads)):
            mine = {k: v for k, v in contents.items() if k[0] == client}
            candidates = [driver.acked] + ([driver.acked + 1] if driver.in_flight else [])
            if not any(mine == expected_state(txns, j) for j in candidates):
                want = expected_state(txns, driver.acked)
                divergent.extend(sorted(k for k in set(want) | set(mine) if want.get(k) != mine.get(k)))
        strays = [k for k in contents if k[0] >= scenario.clients]
        divergent.extend(strays)
        verdict = Verdict(scenario, not divergent, acked, len(contents), divergent, counters)
        if not verdict.passed:
            logger.error(verdict.describe())
        return verdict


def _evenly(entries: List[int], count: int) -> List[int]:
    if len(entries) <= count:
        return entries
    step = (len(entries) - 1) / (count - 1)
    return sorted({entries[round(i * step)] for i in range(count)})


def enumerate_crash_points(trace: List[TraceEntry], stride: int, seed: int = 0,
                           txn_count: int = 0) -> List[CrashScenario]:
    """One scenario per ``stride``-th block write plus forced boundary scenarios.

    Boundary scenarios tear a shadow-slot write, crash right after a slot
    trim with the trim reverted, tear a delta-block write and tear a redo
    log block write. Only writes to blocks holding no live data are torn;
    delta and log blocks are cut inside their first record so the tear
    cannot leave the intended content behind.
    """
    if not trace:
        raise ValueError("cannot enumerate crash points of an empty trace")
    if stride < 1:
        raise ValueError("stride must be >= 1")

    # Block-write ordinal of every trace entry (writes before it).
    ordinals: List[int] = []
    writes = 0
    for entry in trace:
        ordinals.append(writes)
        if entry.op == "write":
            writes += 1

    def scenario(ordinal: int, kind: str, **kwargs) -> CrashScenario:
        return CrashScenario(seed, txn_count, ordinal, kind=kind, **kwargs)

    scenarios = [scenario(n, STRIDE) for n in range(stride - 1, writes, stride)]

    def issuer(entry: TraceEntry) -> str:
        return getattr(entry.tag, "issuer", "")

    classes = {
        TORN_SLOT: [ordinals[e.index] for e in trace
                    if e.op == "write" and issuer(e) == "slot" and e.tearable],
        TORN_MODLOG: [ordinals[e.index] for e in trace
                      if e.op == "write" and issuer(e) == "modlog" and e.tearable],
        TORN_LOG: [ordinals[e.index] for e in trace
                   if e.op == "write" and issuer(e) == "redo" and e.tearable],
    }
    # The next write after a slot trim; its cut reverts the trim.
    classes[SUPPRESSED_TRIM] = sorted({ordinals[e.index] for e in trace
                                       if e.op == "trim" and issuer(e) == "slot"})
    for kind in BOUNDARY_KINDS:
        for ordinal in _evenly(sorted(set(classes[kind])), EXTRAS_PER_CLASS):
            if kind == SUPPRESSED_TRIM:
                scenarios.append(scenario(ordinal, kind, suppress_pending_trims=True))
            elif kind == TORN_SLOT:
                scenarios.append(scenario(ordinal, kind, partial_write_fraction=TORN_FRACTION))
            else:
                scenarios.append(scenario(ordinal, kind, partial_write_fraction=HEADER_TEAR_FRACTION))
    return scenarios


@dataclass
class SuiteSummary:
    scenarios: int = 0
    failures: List[Verdict] = field(default_factory=list)
    kinds: Dict[str, int] = field(default_factory=dict)
    counters: RecoveryCounters = field(default_factory=RecoveryCounters)

    @property
    def passed(self) -> bool:
        return not self.failures

    def add(self, verdict: Verdict) -> None:
        self.scenarios += 1
        kind = verdict.scenario.kind
        self.kinds[kind] = self.kinds.get(kind, 0) + 1
        if verdict.counters:
            self.counters.merge(RecoveryCounters(**verdict.counters))
        if not verdict.passed:
            self.failures.append(verdict)

    def absorb(self, other: "SuiteSummary") -> None:
        self.scenarios += other.scenarios
        self.failures.extend(other.failures)
        for kind, count in other.kinds.items():
            self.kinds[kind] = self.kinds.get(kind, 0) + count
        self.counters.merge(other.counters)

    def as_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"scenarios": self.scenarios, "failures": len(self.failures),
                                  "passed": self.passed}
        row.update({f"kind_{k}": v for k, v in sorted(self.kinds.items())})
        row.update(self.counters.as_dict())
        return row


def explore(seed: int, txn_count: int, stride: int = 1, config: Optional[EngineConfig] = None,
            harness: Optional[CrashHarness] = None, atomic_overwrites: bool = True) -> SuiteSummary:
    """Evaluate every enumerated crash point of one seed's workload."""
    harness = harness or CrashHarness(config, atomic_overwrites=atomic_overwrites)
    summary = SuiteSummary()
    trace = harness.record_trace(seed, txn_count)
    for scenario in enumerate_crash_points(trace, stride, seed, txn_count):
        summary.add(harness.evaluate(scenario))
    # No crash inside the workload: the full history must survive.
    summary.add(harness.evaluate(CrashScenario(seed, txn_count, len(trace) + 1, kind=STRIDE)))
    logger.info("explored seed %d: %d scenarios, %d failures", seed, summary.scenarios, len(summary.failures))
    return summary


def crash_suite(seed_count: int, txn_count: int = 200, clients: int = 1,
                config: Optional[EngineConfig] = None, first_seed: int = 0,
                atomic_overwrites: bool = True) -> SuiteSummary:
    """Per seed: one random crash point, plus one scenario per boundary class.

    With several clients the write order is not reproducible, so each seed
    gets a single randomly placed crash instead.
    """
    harness = CrashHarness(config, atomic_overwrites=atomic_overwrites)
    summary = SuiteSummary()
    for seed in range(first_seed, first_seed + seed_count):
        rng = random.Random(f"{seed}/suite")
        if clients > 1:
            # A single-client run of the same volume bounds the write count.
            total = harness.record_trace(seed, txn_count * clients)
            writes = sum(1 for e in total if e.op == "write")
            scenario = CrashScenario(seed, txn_count, rng.randrange(max(1, writes)),
                                     partial_write_fraction=TORN_FRACTION, kind=SAMPLED,
                                     suppress_pending_trims=rng.random() < 0.5, clients=clients)
            summary.add(harness.evaluate(scenario))
            continue
        trace = harness.record_trace(seed, txn_count)
        scenarios = enumerate_crash_points(trace, 1, seed, txn_count)
        picks = [rng.choice([s for s in scenarios if s.kind == STRIDE] or scenarios)]
        for kind in BOUNDARY_KINDS:
            of_kind = [s for s in scenarios if s.kind == kind]
            if of_kind:
                picks.append(rng.choice(of_kind))
        for scenario in picks:
            summary.add(harness.evaluate(scenario))
    logger.info("crash suite: %d scenarios over %d seeds, %d failures",
                summary.scenarios, seed_count, len(summary.failures))
    return summary
