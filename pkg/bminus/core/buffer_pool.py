"""Page cache between the B-tree and a page store.

Entries are kept in LRU order. Dirty pages reach the device only through
``flush_entry``, which enforces the write-ahead rule: a page whose LSN is
above the newest durable commit stays in memory.
"""

import collections
import logging
import threading
from dataclasses import dataclass, field
from typing import List, Optional

from .errors import CapacityError
from .modlog import FlushPath, decide_flush, flush_delta, flush_full_reset
from .page import PageImage, SegmentTracker
from .redo_log import FlushTrigger, RedoLog
from .shadow import PageStore
from ..utils.latch import LatchMonitor, ReadWriteLatch

logger = logging.getLogger(__name__)

MIN_POOL_PAGES = 16


@dataclass(eq=False)
class PoolEntry:
    page_id: int
    page: Optional[PageImage]
    tracker: Optional[SegmentTracker]
    latch: ReadWriteLatch
    pin_count: int = 0
    dirty: bool = False
    has_base: bool = True
    modlog_clean: bool = True
    # LSN of the image last written whole; deltas at or below it are discarded on load.
    base_lsn: int = 0
    flush_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    ready: threading.Event = field(default_factory=threading.Event, repr=False)
    load_error: Optional[BaseException] = field(default=None, repr=False)

    def mark_dirty(self) -> None:
        """Caller holds the exclusive latch and has changed the page."""
        self.dirty = True


@dataclass
class PoolStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    delta_flushes: int = 0
    full_flushes: int = 0
    wal_deferred: int = 0
    forced_log_flushes: int = 0
    overcommits: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class BufferPool:
    def __init__(self, store: PageStore, log: RedoLog, capacity_pages: int, threshold: int,
                 reset_with_trim: bool = False, monitor: Optional[LatchMonitor] = None,
                 log_trigger: FlushTrigger = FlushTrigger.COMMIT):
        if capacity_pages < MIN_POOL_PAGES:
            raise CapacityError(f"buffer pool needs at least {MIN_POOL_PAGES} pages, got {capacity_pages}")
        self.store = store
        self.log = log
        self.capacity = capacity_pages
        self.threshold = threshold
        self.reset_with_trim = reset_with_trim
        self.monitor = monitor
        self.log_trigger = log_trigger
        self.page_size = store.page_size
        self.segment_size = store.segment_size
        self.stats = PoolStats()
        self._entries: "collections.OrderedDict[int, PoolEntry]" = collections.OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    # -- pin / unpin ---------------------------------------------------------

    def _reserve_locked(self, page_id: int) -> PoolEntry:
        entry = PoolEntry(page_id, None, None, ReadWriteLatch(f"page-{page_id}", self.monitor))
        entry.pin_count = 1
        self._entries[page_id] = entry
        return entry

    def _abandon(self, entry: PoolEntry, error: BaseException) -> None:
        with self._lock:
            entry.load_error = error
            entry.pin_count -= 1
            if self._entries.get(entry.page_id) is entry:
                del self._entries[entry.page_id]
        entry.ready.set()

    def fetch(self, page_id: int) -> PoolEntry:
        """Pin the page, loading and rebuilding it from the store on a miss.

        Only the table lookup runs under the pool lock. A miss reserves its
        entry first, so concurrent fetches of the same page wait on that
        entry while misses on other pages load in parallel.
        """
        loading = False
        with self._lock:
            entry = self._entries.get(page_id)
            if entry is not None:
                self._entries.move_to_end(page_id)
                entry.pin_count += 1
                self.stats.hits += 1
            else:
                self.stats.misses += 1
                entry = self._reserve_locked(page_id)
                loading = True
        if not loading:
            entry.ready.wait()
            if entry.load_error is not None:
                raise entry.load_error
            return entry

        try:
            self._make_room()
            loaded = self.store.load_page(page_id)
            tracker = SegmentTracker(self.page_size, self.segment_size, loaded.f)
            if loaded.fresh:
                # Referenced but never durably written: recovery will redo its records.
                page = PageImage(bytearray(self.page_size), tracker)
                tracker.mark_all()
            else:
                page = PageImage.deserialize(loaded.image, tracker)
        except BaseException as e:
            self._abandon(entry, e)
            raise
        entry.page, entry.tracker = page, tracker
        entry.has_base = loaded.has_base
        entry.modlog_clean = loaded.modlog_clean
        entry.base_lsn = loaded.base_lsn
        entry.ready.set()
        return entry

    def new_page(self, page_id: int, level: int) -> PoolEntry:
        """Pin a freshly allocated empty page; it is dirty until its first flush."""
        with self._lock:
            if page_id in self._entries:
                raise CapacityError(f"page {page_id} allocated twice")
            tracker = SegmentTracker(self.page_size, self.segment_size)
            entry = self._reserve_locked(page_id)
            entry.page = PageImage.empty(page_id, self.page_size, level, tracker)
            entry.tracker = tracker
            entry.has_base = False
            entry.dirty = True
            entry.ready.set()
        self._make_room()
        return entry

    def unpin(self, entry: PoolEntry) -> None:
        with self._lock:
            if entry.pin_count <= 0:
                raise RuntimeError(f"page {entry.page_id} unpinned more often than pinned")
            entry.pin_count -= 1

    # -- eviction ------------------------------------------------------------

    def _make_room(self) -> None:
        """Evict until the pool is back at capacity; log and page writes run unlocked."""
        tried = set()
        while True:
            with self._lock:
                if len(self._entries) <= self.capacity:
                    return
                victim = self._pick_victim_locked(tried)
                if victim is None:
                    self.stats.overcommits += 1
                    if self.stats.overcommits % 1000 == 1:
                        logger.warning("buffer pool overcommitted: %d pages cached, capacity %d",
                                       len(self._entries), self.capacity)
                    return
                if not victim.dirty:
                    self._drop_locked(victim)
                    continue
                victim.pin_count += 1
            tried.add(victim.page_id)
            flushed = False
            try:
                if victim.page.lsn > self.log.safe_lsn:
                    self.log.flush(self.log_trigger)
                    self.stats.forced_log_flushes += 1
                flushed = self.flush_entry(victim)
            finally:
                with self._lock:
                    victim.pin_count -= 1
                    if (flushed and not victim.dirty and victim.pin_count == 0
                            and self._entries.get(victim.page_id) is victim):
                        self._drop_locked(victim)

    def _pick_victim_locked(self, tried: set) -> Optional[PoolEntry]:
        candidates = [e for e in self._entries.values()
                      if e.pin_count == 0 and e.page is not None and e.page_id not in tried]
        for entry in candidates:
            if not entry.dirty:
                return entry
        for entry in candidates:
            lsn = entry.page.lsn
            if lsn > self.log.safe_lsn and lsn > self.log.last_boundary_lsn:
                continue
            return entry
        return None

    def _drop_locked(self, entry: PoolEntry) -> None:
        del self._entries[entry.page_id]
        self.stats.evictions += 1

    # -- flushing ------------------------------------------------------------

    def flush_entry(self, entry: PoolEntry) -> bool:
        """Persist one dirty page under its shared latch; False when skipped."""
        with entry.flush_lock:
            entry.latch.acquire_shared()
            try:
                if not entry.dirty:
                    return False
                if entry.page.lsn > self.log.safe_lsn:
                    self.stats.wal_deferred += 1
                    return False
                image = entry.page.serialize()
                if self.store.supports_delta:
                    decision = decide_flush(entry.tracker, self.threshold)
                    # A delta no newer than its base would be discarded on load.
                    if (decision.path is FlushPath.DELTA_LOG and entry.has_base
                            and entry.page.lsn > entry.base_lsn):
                        flush_delta(self.store, entry.page_id, image, entry.tracker)
                        entry.modlog_clean = False
                        self.stats.delta_flushes += 1
                        logger.debug("page %d: delta flush, %s", entry.page_id, decision.reason)
                    else:
                        flush_full_reset(self.store, entry.page_id, image, entry.tracker,
                                         self.reset_with_trim, reset_modlog=not entry.modlog_clean)
                        entry.modlog_clean = True
                        self.stats.full_flushes += 1
                        entry.base_lsn = entry.page.lsn
                        logger.debug("page %d: full flush, %s", entry.page_id, decision.reason)
                else:
                    self.store.flush_page(entry.page_id, image)
                    entry.tracker.clear()
                    entry.base_lsn = entry.page.lsn
                    self.stats.full_flushes += 1
                entry.has_base = True
                entry.dirty = False
                return True
            finally:
                entry.latch.release_shared()

    def _pin_dirty(self, cold_fraction: float) -> List[PoolEntry]:
        with self._lock:
            entries = list(self._entries.values())
            cold = max(1, int(len(entries) * cold_fraction)) if entries else 0
            picked = [e for e in entries[:cold] if e.dirty and e.pin_count == 0]
            for entry in picked:
                entry.pin_count += 1
            return picked

    def flush_pass(self, cold_fraction: float = 1.0) -> int:
        """Flush dirty unpinned pages from the cold end of the LRU order."""
        flushed = 0
        for entry in self._pin_dirty(cold_fraction):
            try:
                if self.flush_entry(entry):
                    flushed += 1
            finally:
                self.unpin(entry)
        return flushed

    def flush_all(self) -> int:
        """Flush every dirty page; the caller guarantees they are all WAL-safe."""
        with self._lock:
            entries = [e for e in self._entries.values() if e.dirty]
            for entry in entries:
                entry.pin_count += 1
        flushed = 0
        try:
            for entry in entries:
                if self.flush_entry(entry):
                    flushed += 1
        finally:
            for entry in entries:
                self.unpin(entry)
        return flushed

    def dirty_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries.values() if e.dirty)

    def cached(self, page_id: int) -> Optional[PoolEntry]:
        with self._lock:
            return self._entries.get(page_id)

    def evict_all(self) -> int:
        """Drop every clean unpinned page; returns how many remain cached."""
        with self._lock:
            for entry in [e for e in self._entries.values() if not e.dirty and e.pin_count == 0]:
                self._drop_locked(entry)
            return len(self._entries)

    def clear(self) -> None:
        """Forget all cached pages without writing them."""
        with self._lock:
            self._entries.clear()
