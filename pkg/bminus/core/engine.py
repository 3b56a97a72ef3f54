"""The key-value engine: configuration, transactions, checkpoints and recovery.

Transactions stage their writes and apply them at commit under one commit
lock, so every transaction's records are contiguous in the log and are
followed by its COMMIT record. Recovery therefore redoes exactly the
transactions whose COMMIT survived.
"""

import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Iterator, List, Optional, Set, Tuple

from .btree import BTree
from .buffer_pool import MIN_POOL_PAGES, BufferPool
from .device import CompressedBlockDevice, DeviceStats
from .errors import (
    BMinusError,
    CommitError,
    ConfigError,
    ConfigMismatchError,
    DeviceCrashedError,
    EngineFailedError,
    InvalidThresholdError,
    TxnStateError,
)
from .metrics import AccountingSnapshot, RecoveryCounters, WriteAccounting
from .modlog import max_threshold, validate_threshold
from .page import PAGE_SIZES, SegmentTracker
from .redo_log import FlushTrigger, LogKind, LogMode, RedoLog
from .shadow import DATA_START_LBA, Superblock, SuperblockStore, make_page_store
from ..utils.crash_logger import safe_call
from ..utils.latch import LatchMonitor
from ..utils.safe_threading import PeriodicWorker, safe_join_thread

logger = logging.getLogger(__name__)

MODES = ("bminus", "baseline", "journal")
LOG_POLICIES = ("per-commit", "per-timer")
SYSTEM_TXN = 0


@dataclass
class EngineConfig:
    page_size: int = 8192
    segment_size: int = 128
    threshold: int = 2048
    cache_bytes: int = 256 * 1024
    flusher_count: int = 4
    flusher_interval: float = 0.02
    mode: str = "bminus"
    log_mode: str = "sparse"
    log_policy: str = "per-commit"
    log_timer_interval: float = 1.0
    log_fraction: float = 0.125
    commit_delay_us: int = 0
    commit_siblings: int = 5
    checkpoint_log_fraction: float = 0.5
    reset_with_trim: bool = False
    persist_whole_table: bool = False
    journal_slots: int = 64
    background: bool = True
    latch_watchdog: float = 0.0

    def validate(self) -> "EngineConfig":
        if self.page_size not in PAGE_SIZES:
            raise ConfigError(f"page_size must be one of {PAGE_SIZES}, got {self.page_size}")
        if not 16 <= self.segment_size <= self.page_size:
            raise ConfigError(f"segment_size {self.segment_size} outside [16, {self.page_size}]")
        k = SegmentTracker(self.page_size, self.segment_size).k
        try:
            validate_threshold(self.threshold, k)
        except InvalidThresholdError as e:
            raise ConfigError(str(e)) from e
        if self.cache_bytes < MIN_POOL_PAGES * self.page_size:
            raise ConfigError(f"cache_bytes must hold at least {MIN_POOL_PAGES} pages")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.log_mode not in (m.value for m in LogMode):
            raise ConfigError(f"log_mode must be sparse or packed, got {self.log_mode!r}")
        if self.log_policy not in LOG_POLICIES:
            raise ConfigError(f"log_policy must be one of {LOG_POLICIES}, got {self.log_policy!r}")
        if not 0 < self.log_fraction < 1:
            raise ConfigError("log_fraction must be in (0, 1)")
        if not 0 < self.checkpoint_log_fraction <= 1:
            raise ConfigError("checkpoint_log_fraction must be in (0, 1]")
        if self.flusher_count < 0:
            raise ConfigError("flusher_count must be >= 0")
        return self

    @property
    def segment_count(self) -> int:
        return SegmentTracker(self.page_size, self.segment_size).k

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def with_threshold_cap(self) -> "EngineConfig":
        """Clamp a threshold of a full block or more to the largest usable value."""
        cap = max_threshold(self.segment_count)
        if self.threshold > cap:
            self.threshold = cap
        return self


class TxnState(str, Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"
    FAILED = "failed"


@dataclass(eq=False)
class TxnHandle:
    txn_id: int
    ops: List[Tuple[LogKind, bytes, bytes]] = field(default_factory=list)
    state: TxnState = TxnState.ACTIVE
    user_bytes: int = 0
    _staged: Dict[bytes, Optional[bytes]] = field(default_factory=dict, repr=False)

    def require_active(self) -> None:
        if self.state is not TxnState.ACTIVE:
            raise TxnStateError(f"txn {self.txn_id} is {self.state.value}")


class Engine:
    """Open with ``Engine.open``; safe for concurrent client threads."""

    def __init__(self, config: EngineConfig, device: CompressedBlockDevice,
                 accounting: Optional[WriteAccounting] = None):
        self.config = config.validate()
        self.device = device
        self.accounting = accounting or WriteAccounting(strict=device.require_tags)
        device.attach_recorder(self.accounting)
        self.counters = RecoveryCounters()
        self.monitor = LatchMonitor(config.latch_watchdog) if config.latch_watchdog else None

        self.log_blocks = max(16, int(device.logical_blocks * config.log_fraction))
        self.log_start = device.logical_blocks - self.log_blocks
        data_blocks = self.log_start - DATA_START_LBA
        if data_blocks <= 0:
            raise ConfigError(f"device of {device.logical_blocks} blocks too small for the log region")

        self.superblocks = SuperblockStore(device)
        self.page_store = make_page_store(
            config.mode, device, config.page_size, config.segment_size, DATA_START_LBA, data_blocks,
            self.counters, persist_whole_table=config.persist_whole_table,
            journal_slots=config.journal_slots,
        )
        self.redo_log = RedoLog(device, self.log_start, self.log_blocks, LogMode(config.log_mode),
                                self.counters, config.commit_delay_us, config.commit_siblings)
        self.pool = BufferPool(self.page_store, self.redo_log, config.cache_bytes // config.page_size,
                               config.threshold, config.reset_with_trim, self.monitor,
                               FlushTrigger.TIMER if config.log_policy == "per-timer" else FlushTrigger.COMMIT)
        self.tree: Optional[BTree] = None

        self._commit_lock = threading.RLock()
        self._txn_lock = threading.Lock()
        self._next_txn = 1
        self._checkpoint_lsn = 0
        self._created = 0.0
        self._failed: Optional[BaseException] = None
        self._closed = False
        self._workers: List[PeriodicWorker] = []
        self.checkpoints = 0

    # -- lifecycle -----------------------------------------------------------

    @classmethod
    def open(cls, config: EngineConfig, device: CompressedBlockDevice,
             accounting: Optional[WriteAccounting] = None) -> "Engine":
        """Format a fresh device or recover an existing one, then start background work."""
        engine = cls(config, device, accounting)
        superblock = engine.superblocks.read()
        if superblock is None:
            engine._format()
        else:
            engine._recover(superblock)
        if config.background:
            engine._start_workers()
        return engine

    def _format(self) -> None:
        self._created = time.time()
        self.page_store.format()
        self.tree = BTree(self.pool, self.redo_log, 0, 0)
        with self._commit_lock:
            self.tree.create_root(SYSTEM_TXN)
            self.redo_log.log(LogKind.COMMIT, SYSTEM_TXN)
            self._checkpoint_locked(force=True)
        logger.info("formatted %s device: %d blocks, log %d blocks, %s pages of %d bytes",
                    self.config.mode, self.device.logical_blocks, self.log_blocks,
                    self.page_store.max_pages, self.config.page_size)

    def _recover(self, sb: Superblock) -> None:
        config = self.config
        sb.check_matches(config.page_size, config.segment_size, config.mode)
        if sb.log_mode != config.log_mode:
            raise ConfigMismatchError(f"device log written in {sb.log_mode} mode, opened as {config.log_mode}")
        self._created = sb.created
        started = time.monotonic()
        self.page_store.recover(sb.next_page_id)
        records = self.redo_log.open_at(sb.log_head, sb.next_lsn)
        self.tree = BTree(self.pool, self.redo_log, sb.root, sb.next_page_id)

        pending = [r for r in records if r.lsn > sb.checkpoint_lsn]
        committed: Set[int] = {SYSTEM_TXN} | {r.txn_id for r in pending if r.kind is LogKind.COMMIT}
        applied = 0
        max_txn = 0
        for rec in pending:
            max_txn = max(max_txn, rec.txn_id)
            if rec.txn_id in committed:
                applied += self.tree.redo(rec)
        self.counters.bump("replayed_records", len(pending))
        self._next_txn = max(self.redo_log.next_lsn, max_txn + 1)
        self.redo_log.set_checkpoint(sb.checkpoint_lsn)
        self._checkpoint_lsn = sb.checkpoint_lsn
        with self._commit_lock:
            self._checkpoint_locked(force=True)
        logger.info("recovered in %.3fs: %d records after checkpoint %d, %d page changes redone, "
                    "%d committed txns; %s", time.monotonic() - started, len(pending),
                    sb.checkpoint_lsn, applied, len(committed) - 1, self.counters.as_dict())

    def _start_workers(self) -> None:
        for i in range(self.config.flusher_count):
            worker = PeriodicWorker(self._background_flush, self.config.flusher_interval, f"bminus-flusher-{i}")
            self._workers.append(worker)
        if self.config.log_policy == "per-timer":
            self._workers.append(PeriodicWorker(self._timer_flush, self.config.log_timer_interval,
                                                "bminus-log-timer"))
        if self.monitor is not None:
            self._workers.append(PeriodicWorker(self.monitor.check_for_stalls, self.config.latch_watchdog,
                                                "bminus-latch-watchdog"))
        for worker in self._workers:
            worker.start()

    def _stop_workers(self) -> None:
        for worker in self._workers:
            worker.stop()
        for worker in self._workers:
            if not safe_join_thread(worker):
                logger.warning("worker %s did not stop", worker.name)
        self._workers.clear()

    @contextmanager
    def quiesced(self) -> Iterator["Engine"]:
        """Pause background flushers so a scan sees a stable device."""
        running = bool(self._workers)
        self._stop_workers()
        try:
            yield self
        finally:
            if running and not self._closed and self._failed is None:
                self._start_workers()

    def _background_flush(self) -> None:
        if self._failed is None and not self._closed:
            safe_call(self._guarded_pass, operation_name="background flush pass", logger=logger)

    def _guarded_pass(self) -> int:
        with self._guard():
            return self.pool.flush_pass(cold_fraction=0.25)

    def _timer_flush(self) -> None:
        if self._failed is None and not self._closed:
            safe_call(self._guarded_log_flush, operation_name="timer log flush", logger=logger)

    def _guarded_log_flush(self) -> bool:
        with self._guard():
            return self.redo_log.flush(FlushTrigger.TIMER)

    def close(self) -> None:
        """Checkpoint and stop; a failed engine just stops."""
        if self._closed:
            return
        self._stop_workers()
        if self._failed is None:
            with self._guard():
                self.checkpoint()
        self._closed = True
        self.pool.clear()
        logger.info("engine closed after %d checkpoints", self.checkpoints)

    def abandon(self) -> None:
        """Stop background work without writing anything, as a crash would."""
        self._stop_workers()
        self._closed = True
        self.pool.clear()

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.close()
        else:
            self.abandon()

    # -- failure handling ----------------------------------------------------

    @property
    def failed(self) -> bool:
        return self._failed is not None

    def _fail(self, exc: BaseException) -> None:
        if self._failed is None:
            self._failed = exc
            logger.warning("engine failed: %s", exc)

    def _check_usable(self) -> None:
        if self._failed is not None:
            raise EngineFailedError(f"engine failed: {self._failed}; reopen required")
        if self._closed:
            raise EngineFailedError("engine closed")

    @contextmanager
    def _guard(self) -> Iterator[None]:
        self._check_usable()
        try:
            yield
        except (DeviceCrashedError, CommitError) as exc:
            self._fail(exc)
            raise EngineFailedError(f"engine failed: {exc}") from exc

    # -- transactions --------------------------------------------------------

    def begin(self) -> TxnHandle:
        self._check_usable()
        with self._txn_lock:
            txn = TxnHandle(self._next_txn)
            self._next_txn += 1
        return txn

    def put(self, txn: TxnHandle, key: bytes, value: bytes) -> None:
        txn.require_active()
        self.tree.check_record(key, value)
        txn.ops.append((LogKind.INSERT, key, value))
        txn._staged[key] = value
        txn.user_bytes += len(key) + len(value)

    def delete(self, txn: TxnHandle, key: bytes) -> None:
        txn.require_active()
        txn.ops.append((LogKind.DELETE, key, b""))
        txn._staged[key] = None

    def abort(self, txn: TxnHandle) -> None:
        txn.require_active()
        txn.ops.clear()
        txn._staged.clear()
        txn.state = TxnState.ABORTED

    def commit(self, txn: TxnHandle) -> None:
        """Apply the staged writes and, under the per-commit policy, wait for durability."""
        txn.require_active()
        self._check_usable()
        try:
            with self._commit_lock:
                if self.redo_log.usage() > self.config.checkpoint_log_fraction:
                    self._checkpoint_locked()
                for kind, key, value in txn.ops:
                    if kind is LogKind.DELETE:
                        self.tree.delete(txn.txn_id, key)
                    else:
                        self.tree.put(txn.txn_id, key, value)
                commit_rec = self.redo_log.log(LogKind.COMMIT, txn.txn_id)
            if self.config.log_policy == "per-commit":
                self.redo_log.wait_durable(commit_rec.lsn)
        except BMinusError as exc:
            txn.state = TxnState.FAILED
            self._fail(exc)
            raise CommitError(f"txn {txn.txn_id} not committed: {exc}") from exc
        self.accounting.add_user_bytes(txn.user_bytes)
        txn.state = TxnState.COMMITTED

    @contextmanager
    def transaction(self) -> Iterator[TxnHandle]:
        txn = self.begin()
        try:
            yield txn
        except BaseException:
            if txn.state is TxnState.ACTIVE:
                self.abort(txn)
            raise
        if txn.state is TxnState.ACTIVE:
            self.commit(txn)

    # -- reads ---------------------------------------------------------------

    def get(self, key: bytes, txn: Optional[TxnHandle] = None) -> Optional[bytes]:
        if txn is not None and key in txn._staged:
            return txn._staged[key]
        with self._guard():
            return self.tree.get(key)

    def scan(self, start_key: bytes, count: int) -> List[Tuple[bytes, bytes]]:
        with self._guard():
            return self.tree.scan(start_key, count)

    def items(self, batch: int = 1024) -> Iterator[Tuple[bytes, bytes]]:
        """Every record in key order."""
        start = b"\x00"
        while True:
            chunk = self.scan(start, batch)
            yield from chunk
            if len(chunk) < batch:
                return
            start = chunk[-1][0] + b"\x00"

    # -- flushing and checkpoints --------------------------------------------

    def flush_worker_pass(self, cold_fraction: float = 1.0) -> int:
        """Flush dirty unpinned pages whose log records are durable."""
        with self._guard():
            return self.pool.flush_pass(cold_fraction)

    def flush_all(self) -> int:
        """Make the log durable and write every dirty page."""
        with self._guard(), self._commit_lock:
            self.redo_log.flush(FlushTrigger.COMMIT)
            return self.pool.flush_all()

    def checkpoint(self) -> None:
        with self._guard(), self._commit_lock:
            self._checkpoint_locked()

    def _checkpoint_locked(self, force: bool = False) -> None:
        log = self.redo_log
        if not force and log.last_lsn == self._checkpoint_lsn and not self.pool.dirty_count():
            self._write_superblock(self._checkpoint_lsn, log.head_index)
            return
        rec, start = log.log_at(LogKind.CHECKPOINT, SYSTEM_TXN)
        log.flush(FlushTrigger.COMMIT)
        flushed = self.pool.flush_all()
        self._write_superblock(rec.lsn, start)
        log.set_checkpoint(rec.lsn)
        self._checkpoint_lsn = rec.lsn
        trimmed = log.truncate(rec.lsn)
        self.checkpoints += 1
        logger.info("checkpoint at lsn %d: %d pages flushed, %d log blocks trimmed",
                    rec.lsn, flushed, trimmed)

    def _write_superblock(self, checkpoint_lsn: int, log_head: int) -> None:
        self.superblocks.write(Superblock(
            root=self.tree.root_id,
            next_page_id=self.tree.next_page_id,
            checkpoint_lsn=checkpoint_lsn,
            next_lsn=self.redo_log.next_lsn,
            log_head=log_head,
            page_size=self.config.page_size,
            segment_size=self.config.segment_size,
            mode=self.config.mode,
            log_mode=self.config.log_mode,
            created=self._created,
        ))

    # -- introspection -------------------------------------------------------

    @property
    def page_count(self) -> int:
        return self.tree.next_page_id

    @property
    def checkpoint_lsn(self) -> int:
        return self._checkpoint_lsn

    def measurement_snapshot(self) -> Tuple[AccountingSnapshot, DeviceStats]:
        """Accounting and device counters taken with no write in between."""
        with self.device.io_lock:
            return self.accounting.snapshot(), self.device.stats()

    def stats(self) -> Dict[str, object]:
        return {
            "pages": self.page_count,
            "height": self.tree.height() if self._failed is None else None,
            "pool": self.pool.stats.as_dict(),
            "log": self.redo_log.stats(),
            "recovery": self.counters.as_dict(),
            "checkpoints": self.checkpoints,
            "device": self.device.stats().__dict__,
        }
