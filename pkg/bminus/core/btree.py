"""B+tree over buffer-pool pages with physiological redo records.

Writers are serialized by the engine and descend with exclusive latch
coupling, splitting full internal pages on the way down so a leaf split
always finds room in its parent. Readers descend with shared coupling and
recheck the root after latching it.

Structural records:

- SPLIT   page_id=left, aux=right, key=first key moved right (the pushed-up
          separator for internal pages), value=level, sibling, leftmost
          child and the records of the new right page.
- LINK    page_id=parent, aux=right child, key=separator.
- NEW_ROOT page_id=new root, aux=old root (NO_PAGE on a fresh tree),
          value=level byte.
"""

import logging
import struct
import threading
from typing import Callable, List, Optional, Tuple

from .buffer_pool import BufferPool, PoolEntry
from .errors import OversizedRecordError
from .page import (
    CHILD,
    HEADER_SIZE,
    MAX_KEY_SIZE,
    NO_PAGE,
    SLOT_SIZE,
    TRAILER_SIZE,
    PageImage,
    max_record_bytes,
)
from .redo_log import LogKind, LogRecord, RedoLog

logger = logging.getLogger(__name__)

SPLIT_HEADER = struct.Struct("<BQQ")
SPLIT_RECORD = struct.Struct("<HI")

# Free space an internal page must keep so one more separator always fits.
INTERNAL_RESERVE = MAX_KEY_SIZE + CHILD.size + SLOT_SIZE

Record = Tuple[bytes, bytes]


def encode_split(level: int, sibling: int, leftmost: int, records: List[Record]) -> bytes:
    parts = [SPLIT_HEADER.pack(level, sibling, leftmost)]
    for key, value in records:
        parts.append(SPLIT_RECORD.pack(len(key), len(value)))
        parts.append(key)
        parts.append(value)
    return b"".join(parts)


def decode_split(payload: bytes) -> Tuple[int, int, int, List[Record]]:
    level, sibling, leftmost = SPLIT_HEADER.unpack_from(payload)
    pos = SPLIT_HEADER.size
    records: List[Record] = []
    while pos < len(payload):
        key_len, value_len = SPLIT_RECORD.unpack_from(payload, pos)
        pos += SPLIT_RECORD.size
        records.append((payload[pos:pos + key_len], payload[pos + key_len:pos + key_len + value_len]))
        pos += key_len + value_len
    return level, sibling, leftmost, records


def split_point(records: List[Record], capacity: int) -> int:
    """Index of the first record of the right half, balancing bytes."""
    sizes = [len(k) + len(v) + SLOT_SIZE for k, v in records]
    total = sum(sizes)
    prefix = 0
    cut = len(records) - 1
    for i, size in enumerate(sizes):
        if prefix + size > total / 2:
            cut = i
            break
        prefix += size
    cut = min(max(cut, 1), len(records) - 1)
    while cut > 1 and sum(sizes[:cut]) > capacity:
        cut -= 1
    while cut < len(records) - 1 and sum(sizes[cut:]) > capacity:
        cut += 1
    return cut


class BTree:
    def __init__(self, pool: BufferPool, log: RedoLog, root_id: int, next_page_id: int):
        self.pool = pool
        self.log = log
        self.root_id = root_id
        self.next_page_id = next_page_id
        self.page_size = pool.page_size
        self.capacity = self.page_size - HEADER_SIZE - TRAILER_SIZE
        self.max_record = max_record_bytes(self.page_size)
        self._alloc_lock = threading.Lock()

    # -- helpers -------------------------------------------------------------

    def allocate_page_id(self) -> int:
        with self._alloc_lock:
            page_id = self.next_page_id
            self.pool.store.check_page(page_id)
            self.next_page_id += 1
            return page_id

    def _acquire(self, page_id: int, exclusive: bool) -> PoolEntry:
        entry = self.pool.fetch(page_id)
        entry.latch.acquire(exclusive)
        return entry

    def _release(self, entry: PoolEntry, exclusive: bool) -> None:
        entry.latch.release(exclusive)
        self.pool.unpin(entry)

    def _new(self, page_id: int, level: int) -> PoolEntry:
        entry = self.pool.new_page(page_id, level)
        entry.latch.acquire_exclusive()
        return entry

    def check_record(self, key: bytes, value: bytes) -> None:
        if not key:
            raise ValueError("keys must be non-empty")
        if len(key) > MAX_KEY_SIZE:
            raise OversizedRecordError(f"key of {len(key)} bytes exceeds {MAX_KEY_SIZE}")
        if len(key) + len(value) > self.max_record:
            raise OversizedRecordError(
                f"record of {len(key) + len(value)} bytes exceeds {self.max_record} for {self.page_size}B pages"
            )

    @staticmethod
    def _internal_full(page: PageImage) -> bool:
        return not page.is_leaf and page.total_free < INTERNAL_RESERVE

    # -- page mutations shared by forward processing and redo -----------------

    @staticmethod
    def _apply_put(page: PageImage, rec: LogRecord) -> None:
        i, found = page.search(rec.key)
        if found:
            page.update_at(i, rec.value)
        else:
            page.insert_at(i, rec.key, rec.value)
        page.lsn = rec.lsn

    @staticmethod
    def _apply_delete(page: PageImage, rec: LogRecord) -> None:
        i, found = page.search(rec.key)
        if found:
            page.delete_at(i)
        page.lsn = rec.lsn

    @staticmethod
    def _apply_split_left(page: PageImage, rec: LogRecord) -> None:
        i, _ = page.search(rec.key)
        page.truncate_from(i)
        page.right_sibling = rec.aux
        page.lsn = rec.lsn

    @staticmethod
    def _apply_split_right(page: PageImage, rec: LogRecord) -> None:
        level, sibling, leftmost, records = decode_split(rec.value)
        page.reset(level, rec.aux)
        page.right_sibling = sibling
        page.leftmost_child = leftmost
        for j, (key, value) in enumerate(records):
            page.insert_at(j, key, value)
        page.lsn = rec.lsn

    @staticmethod
    def _apply_link(page: PageImage, rec: LogRecord) -> None:
        i, found = page.search(rec.key)
        if not found:
            page.insert_at(i, rec.key, CHILD.pack(rec.aux))
        page.lsn = rec.lsn

    @staticmethod
    def _apply_new_root(page: PageImage, rec: LogRecord) -> None:
        page.reset(rec.value[0], rec.page_id)
        page.leftmost_child = rec.aux
        page.lsn = rec.lsn

    # -- structure changes ---------------------------------------------------

    def create_root(self, txn_id: int) -> None:
        """Allocate the first leaf of an empty tree."""
        page_id = self.allocate_page_id()
        rec = self.log.log(LogKind.NEW_ROOT, txn_id, value=bytes([0]), page_id=page_id, aux=NO_PAGE)
        entry = self._new(page_id, 0)
        try:
            self._apply_new_root(entry.page, rec)
            entry.mark_dirty()
            self.root_id = page_id
        finally:
            self._release(entry, True)

    def _grow_root(self, txn_id: int, old_root: PoolEntry) -> PoolEntry:
        new_id = self.allocate_page_id()
        level = old_root.page.level + 1
        rec = self.log.log(LogKind.NEW_ROOT, txn_id, value=bytes([level]), page_id=new_id,
                           aux=old_root.page_id)
        entry = self._new(new_id, level)
        self._apply_new_root(entry.page, rec)
        entry.mark_dirty()
        self.root_id = new_id
        logger.debug("tree grew to height %d, root %d", level + 1, new_id)
        return entry

    def _split(self, txn_id: int, parent: PoolEntry, child: PoolEntry, cut_key: bytes,
               right_records: List[Record], leftmost: int) -> PoolEntry:
        """Log and apply a split of ``child`` plus the separator link in ``parent``."""
        right_id = self.allocate_page_id()
        page = child.page
        payload = encode_split(page.level, page.right_sibling, leftmost, right_records)
        rec = self.log.log(LogKind.SPLIT, txn_id, key=cut_key, value=payload,
                           page_id=child.page_id, aux=right_id)
        right = self._new(right_id, page.level)
        self._apply_split_right(right.page, rec)
        right.mark_dirty()
        self._apply_split_left(page, rec)
        child.mark_dirty()
        link = self.log.log(LogKind.LINK, txn_id, key=cut_key, page_id=parent.page_id, aux=right_id)
        self._apply_link(parent.page, link)
        parent.mark_dirty()
        return right

    def _split_internal(self, txn_id: int, parent: PoolEntry, child: PoolEntry) -> Tuple[bytes, PoolEntry]:
        records = list(child.page.records())
        m = split_point(records, self.capacity)
        m = min(m, len(records) - 2) if len(records) > 2 else m
        sep, pointer = records[m]
        right = self._split(txn_id, parent, child, sep, records[m + 1:], CHILD.unpack(pointer)[0])
        return sep, right

    def _split_leaf(self, txn_id: int, parent: PoolEntry, leaf: PoolEntry,
                    key: bytes, value: bytes) -> Tuple[bytes, PoolEntry]:
        records = list(leaf.page.records())
        i, _ = leaf.page.search(key)
        merged = records[:i] + [(key, value)] + records[i:]
        cut_key = merged[split_point(merged, self.capacity)][0]
        right_records = [r for r in records if r[0] >= cut_key]
        right = self._split(txn_id, parent, leaf, cut_key, right_records, NO_PAGE)
        return cut_key, right

    # -- writes --------------------------------------------------------------

    def _descend_for_write(self, txn_id: int, key: bytes, held: List[PoolEntry]) -> Tuple[Optional[PoolEntry], PoolEntry]:
        """Exclusive descent; returns (parent, leaf), both latched and in ``held``."""
        node = self._acquire(self.root_id, True)
        held.append(node)
        parent: Optional[PoolEntry] = None
        if self._internal_full(node.page):
            parent = self._grow_root(txn_id, node)
            held.append(parent)
            sep, right = self._split_internal(txn_id, parent, node)
            held.append(right)
            if key >= sep:
                node = right
        while not node.page.is_leaf:
            child = self._acquire(node.page.child_for(key), True)
            held.append(child)
            if self._internal_full(child.page):
                sep, right = self._split_internal(txn_id, node, child)
                held.append(right)
                if key >= sep:
                    child = right
            # Everything above ``node`` is safe now.
            for entry in [e for e in held if e is not node and e is not child]:
                self._release(entry, True)
                held.remove(entry)
            parent, node = node, child
        return parent, node

    def _release_all(self, held: List[PoolEntry]) -> None:
        for entry in reversed(held):
            self._release(entry, True)
        held.clear()

    def put(self, txn_id: int, key: bytes, value: bytes) -> None:
        self.check_record(key, value)
        held: List[PoolEntry] = []
        try:
            parent, leaf = self._descend_for_write(txn_id, key, held)
            page = leaf.page
            i, found = page.search(key)
            if found:
                if page.total_free + len(page.value_at(i)) >= len(value):
                    rec = self.log.log(LogKind.UPDATE, txn_id, key, value, page_id=leaf.page_id)
                    self._apply_put(page, rec)
                    leaf.mark_dirty()
                    return
                rec = self.log.log(LogKind.DELETE, txn_id, key, page_id=leaf.page_id)
                self._apply_delete(page, rec)
                leaf.mark_dirty()
            target = leaf
            if not page.has_room(len(key), len(value)):
                if parent is None:
                    parent = self._grow_root(txn_id, leaf)
                    held.append(parent)
                cut_key, right = self._split_leaf(txn_id, parent, leaf, key, value)
                held.append(right)
                if key >= cut_key:
                    target = right
            rec = self.log.log(LogKind.INSERT, txn_id, key, value, page_id=target.page_id)
            self._apply_put(target.page, rec)
            target.mark_dirty()
        finally:
            self._release_all(held)

    def delete(self, txn_id: int, key: bytes) -> bool:
        """Remove ``key``; underfull leaves are left as they are."""
        held: List[PoolEntry] = []
        try:
            _, leaf = self._descend_for_write(txn_id, key, held)
            _, found = leaf.page.search(key)
            if not found:
                return False
            rec = self.log.log(LogKind.DELETE, txn_id, key, page_id=leaf.page_id)
            self._apply_delete(leaf.page, rec)
            leaf.mark_dirty()
            return True
        finally:
            self._release_all(held)

    # -- reads ---------------------------------------------------------------

    def _descend_shared(self, key: bytes) -> PoolEntry:
        while True:
            root_id = self.root_id
            node = self._acquire(root_id, False)
            if root_id == self.root_id:
                break
            self._release(node, False)
        while not node.page.is_leaf:
            child = self._acquire(node.page.child_for(key), False)
            self._release(node, False)
            node = child
        return node

    def get(self, key: bytes) -> Optional[bytes]:
        leaf = self._descend_shared(key)
        try:
            i, found = leaf.page.search(key)
            return leaf.page.value_at(i) if found else None
        finally:
            self._release(leaf, False)

    def scan(self, start_key: bytes, count: int) -> List[Record]:
        """Up to ``count`` records with key >= ``start_key`` in key order."""
        if count < 1:
            raise ValueError("scan count must be >= 1")
        out: List[Record] = []
        leaf = self._descend_shared(start_key)
        try:
            i, _ = leaf.page.search(start_key)
            while True:
                page = leaf.page
                while i < page.record_count and len(out) < count:
                    out.append(page.record_at(i))
                    i += 1
                sibling = page.right_sibling
                if len(out) >= count or sibling == NO_PAGE:
                    return out
                nxt = self._acquire(sibling, False)
                self._release(leaf, False)
                leaf, i = nxt, 0
        finally:
            self._release(leaf, False)

    def height(self) -> int:
        entry = self._acquire(self.root_id, False)
        try:
            return entry.page.level + 1
        finally:
            self._release(entry, False)

    # -- redo ----------------------------------------------------------------

    def _redo_on(self, page_id: int, rec: LogRecord, apply: Callable[[PageImage, LogRecord], None]) -> bool:
        entry = self._acquire(page_id, True)
        try:
            if entry.page.lsn >= rec.lsn:
                return False
            apply(entry.page, rec)
            entry.mark_dirty()
            return True
        finally:
            self._release(entry, True)

    def redo(self, rec: LogRecord) -> int:
        """Reapply a committed record to every page it touches that predates it."""
        kind = rec.kind
        if kind in (LogKind.INSERT, LogKind.UPDATE):
            return int(self._redo_on(rec.page_id, rec, self._apply_put))
        if kind is LogKind.DELETE:
            return int(self._redo_on(rec.page_id, rec, self._apply_delete))
        if kind is LogKind.LINK:
            return int(self._redo_on(rec.page_id, rec, self._apply_link))
        if kind is LogKind.SPLIT:
            self._bump_next(rec.aux)
            left = self._redo_on(rec.page_id, rec, self._apply_split_left)
            right = self._redo_on(rec.aux, rec, self._apply_split_right)
            return int(left) + int(right)
        if kind is LogKind.NEW_ROOT:
            self._bump_next(rec.page_id)
            self.root_id = rec.page_id
            return int(self._redo_on(rec.page_id, rec, self._apply_new_root))
        return 0

    def _bump_next(self, page_id: int) -> None:
        with self._alloc_lock:
            self.next_page_id = max(self.next_page_id, page_id + 1)

    # -- verification --------------------------------------------------------

    def check_structure(self) -> int:
        """Walk the leaf chain verifying key order; returns the record count."""
        node = self._acquire(self.root_id, False)
        while not node.page.is_leaf:
            child = self._acquire(node.page.leftmost_child, False)
            self._release(node, False)
            node = child
        total = 0
        previous: Optional[bytes] = None
        try:
            while True:
                for key in node.page.keys():
                    if previous is not None and key <= previous:
                        raise AssertionError(f"page {node.page_id}: key order broken at {key!r}")
                    previous = key
                    total += 1
                sibling = node.page.right_sibling
                if sibling == NO_PAGE:
                    return total
                nxt = self._acquire(sibling, False)
                self._release(node, False)
                node = nxt
        finally:
            self._release(node, False)
