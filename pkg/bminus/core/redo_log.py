"""Write-ahead redo log over a ring of 4KB blocks, in packed or sparse mode.

Packed mode fills a block across flushes, so a partially filled block is
rewritten at the same LBA by every flush that adds to it. Sparse mode
zero-pads the block at each commit flush and moves on, so no LBA is
written twice between truncations.

Block layout: 16-byte header ``<4sQHH`` (magic b"BMLG", LSN of the first
record starting in the block, payload bytes used, offset of the first
record start or 0xFFFF) followed by 4080 payload bytes. The payload of
consecutive blocks forms one stream of frames::

    u32 frame_len, u64 lsn, u64 txn_id, u8 kind, u64 page_id, u64 aux,
    u16 key_len, u32 value_len, key, value, u32 crc32
"""

import collections
import logging
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Deque, Iterator, List, Optional, Tuple

from .device import BLOCK_SIZE, ZERO_BLOCK, CompressedBlockDevice
from .errors import BMinusError, CommitError, LogFullError, LsnRegressionError, TruncationError
from .metrics import RecoveryCounters, WriteCategory, WriteTag
from .page import NO_PAGE

logger = logging.getLogger(__name__)

TAG_LOG = WriteTag(WriteCategory.LOG, "redo")

FRAME = struct.Struct("<IQQBQQHI")
CRC = struct.Struct("<I")
BLOCK_HEADER = struct.Struct("<4sQHH")
LOG_MAGIC = b"BMLG"
PAYLOAD_SIZE = BLOCK_SIZE - BLOCK_HEADER.size
NO_FRAME_START = 0xFFFF


class LogKind(IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3
    COMMIT = 4
    CHECKPOINT = 5
    SPLIT = 6
    LINK = 7
    NEW_ROOT = 8


BOUNDARY_KINDS = (LogKind.COMMIT, LogKind.CHECKPOINT)


class LogMode(str, Enum):
    SPARSE = "sparse"
    PACKED = "packed"


class FlushTrigger(str, Enum):
    COMMIT = "commit"
    TIMER = "timer"


@dataclass(frozen=True)
class LogRecord:
    lsn: int
    txn_id: int
    kind: LogKind
    key: bytes = b""
    value: bytes = b""
    page_id: int = NO_PAGE
    aux: int = 0

    @property
    def frame_size(self) -> int:
        return FRAME.size + len(self.key) + len(self.value) + CRC.size

    def encode(self) -> bytes:
        body = FRAME.pack(self.frame_size, self.lsn, self.txn_id, int(self.kind), self.page_id,
                          self.aux, len(self.key), len(self.value)) + self.key + self.value
        return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def decode_from(cls, stream, offset: int) -> Tuple[Optional["LogRecord"], int]:
        """Decode the frame at ``offset``; ``(None, offset)`` when it is incomplete or corrupt."""
        if offset + FRAME.size > len(stream):
            return None, offset
        frame_len, lsn, txn_id, kind, page_id, aux, key_len, value_len = FRAME.unpack_from(stream, offset)
        if frame_len != FRAME.size + key_len + value_len + CRC.size or offset + frame_len > len(stream):
            return None, offset
        end = offset + frame_len - CRC.size
        (crc,) = CRC.unpack_from(stream, end)
        if crc != zlib.crc32(memoryview(stream)[offset:end]) & 0xFFFFFFFF:
            return None, offset
        try:
            kind = LogKind(kind)
        except ValueError:
            return None, offset
        key_start = offset + FRAME.size
        key = bytes(stream[key_start:key_start + key_len])
        value = bytes(stream[key_start + key_len:end])
        return cls(lsn, txn_id, kind, key, value, page_id, aux), offset + frame_len


class RedoLog:
    """Redo ring with group commit.

    ``safe_lsn`` is the LSN of the newest commit or checkpoint record known
    durable; pages whose LSN is at or below it may be written to storage.
    """

    def __init__(self, device: CompressedBlockDevice, start_lba: int, block_count: int,
                 mode: LogMode = LogMode.SPARSE, counters: Optional[RecoveryCounters] = None,
                 commit_delay_us: int = 0, commit_siblings: int = 5):
        if block_count < 2:
            raise ValueError("log ring needs at least two blocks")
        self.device = device
        self.start_lba = start_lba
        self.block_count = block_count
        self.mode = LogMode(mode)
        self.counters = counters or RecoveryCounters()
        self.commit_delay_us = commit_delay_us
        self.commit_siblings = commit_siblings

        self._lock = threading.Lock()
        self._flush_mutex = threading.Lock()
        self._cond = threading.Condition()

        self._next_lsn = 1
        self._last_lsn = 0
        self._last_boundary = 0
        self._flushed_lsn = 0
        self._safe_lsn = 0
        self._checkpoint_lsn = 0
        self._failed: Optional[BaseException] = None
        self._flush_active = False
        self._waiters = 0

        self._head = 0
        self._reset_position(0)
        self.flush_count = 0
        self.blocks_written = 0

    # -- position ----------------------------------------------------------

    def _reset_position(self, index: int) -> None:
        self._cur_index = index
        self._cur_payload = bytearray()
        self._cur_first_lsn = 0
        self._cur_first_offset = NO_FRAME_START
        self._cur_dirty = False
        self._cur_closed = False
        self._sealed: List[Tuple[int, bytes, int]] = []
        self._retained: Deque[List[int]] = collections.deque([[index, 0]])

    @property
    def region_bytes(self) -> int:
        return self.block_count * BLOCK_SIZE

    @property
    def head_index(self) -> int:
        return self._head

    @property
    def current_index(self) -> int:
        return self._cur_index

    @property
    def next_lsn(self) -> int:
        return self._next_lsn

    @property
    def last_lsn(self) -> int:
        return self._last_lsn

    @property
    def flushed_lsn(self) -> int:
        return self._flushed_lsn

    @property
    def safe_lsn(self) -> int:
        return self._safe_lsn

    @property
    def last_boundary_lsn(self) -> int:
        return self._last_boundary

    @property
    def checkpoint_lsn(self) -> int:
        return self._checkpoint_lsn

    def set_checkpoint(self, lsn: int) -> None:
        self._checkpoint_lsn = lsn

    def used_blocks(self) -> int:
        with self._lock:
            return self._used_locked()

    def _used_locked(self) -> int:
        used = (self._cur_index - self._head) % self.block_count + 1
        return used + (1 if self._cur_closed else 0)

    def usage(self) -> float:
        return self.used_blocks() / self.block_count

    # -- appending ---------------------------------------------------------

    def _encode_current(self) -> bytes:
        header = BLOCK_HEADER.pack(LOG_MAGIC, self._cur_first_lsn, len(self._cur_payload), self._cur_first_offset)
        return (header + bytes(self._cur_payload)).ljust(BLOCK_SIZE, b"\0")

    def _open_next_block(self) -> None:
        self._cur_index = (self._cur_index + 1) % self.block_count
        self._cur_payload = bytearray()
        self._cur_first_lsn = 0
        self._cur_first_offset = NO_FRAME_START
        self._cur_dirty = False
        self._cur_closed = False
        self._retained.append([self._cur_index, 0])

    def _seal_current(self) -> None:
        self._sealed.append((self._cur_index, self._encode_current(), self._retained[-1][1]))
        self._open_next_block()

    def _stage(self, frame: bytes, lsn: int) -> int:
        extra = 1 if self._cur_closed else 0
        fill = 0 if self._cur_closed else len(self._cur_payload)
        needed = extra + (fill + len(frame) - 1) // PAYLOAD_SIZE
        free = self.block_count - self._used_locked() + extra
        if needed > free:
            raise LogFullError(f"log ring full: {needed} blocks needed, {free} free")

        if self._cur_closed or len(self._cur_payload) == PAYLOAD_SIZE:
            if self._cur_closed:
                self._open_next_block()
            else:
                self._seal_current()
        start_index = self._cur_index
        if self._cur_first_offset == NO_FRAME_START:
            self._cur_first_offset = len(self._cur_payload)
            self._cur_first_lsn = lsn
        pos = 0
        while pos < len(frame):
            if len(self._cur_payload) == PAYLOAD_SIZE:
                self._seal_current()
            room = PAYLOAD_SIZE - len(self._cur_payload)
            chunk = frame[pos:pos + room]
            self._cur_payload += chunk
            self._cur_dirty = True
            self._retained[-1][1] = lsn
            pos += len(chunk)
        return start_index

    def append(self, rec: LogRecord) -> int:
        """Stage a record; returns the ring index where its frame starts."""
        with self._lock:
            if rec.lsn <= self._last_lsn:
                raise LsnRegressionError(f"lsn {rec.lsn} after {self._last_lsn}")
            if rec.kind is LogKind.COMMIT and (rec.key or rec.value):
                raise ValueError("commit records carry no payload")
            start = self._stage(rec.encode(), rec.lsn)
            self._last_lsn = rec.lsn
            self._next_lsn = max(self._next_lsn, rec.lsn + 1)
            if rec.kind in BOUNDARY_KINDS:
                self._last_boundary = rec.lsn
            return start

    def log(self, kind: LogKind, txn_id: int, key: bytes = b"", value: bytes = b"",
            page_id: int = NO_PAGE, aux: int = 0) -> LogRecord:
        """Assign the next LSN and stage the record."""
        return self.log_at(kind, txn_id, key, value, page_id, aux)[0]

    def log_at(self, kind: LogKind, txn_id: int, key: bytes = b"", value: bytes = b"",
               page_id: int = NO_PAGE, aux: int = 0) -> Tuple[LogRecord, int]:
        with self._lock:
            rec = LogRecord(self._next_lsn, txn_id, kind, key, value, page_id, aux)
        return rec, self.append(rec)

    # -- flushing ----------------------------------------------------------

    def flush(self, trigger: FlushTrigger = FlushTrigger.COMMIT) -> bool:
        """Write every staged byte; returns False when there was nothing to write."""
        with self._flush_mutex:
            with self._lock:
                writes = self._sealed
                self._sealed = []
                if self._cur_dirty:
                    writes.append((self._cur_index, self._encode_current(), self._retained[-1][1]))
                    self._cur_dirty = False
                    if self.mode is LogMode.SPARSE and trigger is FlushTrigger.COMMIT:
                        self._cur_closed = True
                target_lsn = self._last_lsn
                target_boundary = self._last_boundary
            if not writes:
                return False
            try:
                for index, block, _ in writes:
                    self.device.write_block(self.start_lba + index, block, TAG_LOG)
            except BaseException as exc:
                with self._cond:
                    self._failed = exc
                    self._cond.notify_all()
                raise
            self.flush_count += 1
            self.blocks_written += len(writes)
            with self._cond:
                self._flushed_lsn = max(self._flushed_lsn, target_lsn)
                self._safe_lsn = max(self._safe_lsn, target_boundary)
                self._cond.notify_all()
            return True

    def wait_durable(self, lsn: int) -> None:
        """Block until ``lsn`` is durable, leading a group flush when none is running."""
        with self._cond:
            self._waiters += 1
            try:
                while self._flushed_lsn < lsn:
                    if self._failed is not None:
                        raise CommitError(f"log flush failed: {self._failed}") from self._failed
                    if self._flush_active:
                        self._cond.wait()
                        continue
                    self._flush_active = True
                    siblings = self._waiters - 1
                    self._cond.release()
                    try:
                        if self.commit_delay_us and siblings >= self.commit_siblings:
                            time.sleep(self.commit_delay_us / 1e6)
                        self.flush(FlushTrigger.COMMIT)
                    except BMinusError as exc:
                        raise CommitError(f"log flush failed: {exc}") from exc
                    finally:
                        self._cond.acquire()
                        self._flush_active = False
                        self._cond.notify_all()
            finally:
                self._waiters -= 1

    # -- truncation --------------------------------------------------------

    def truncate(self, up_to_lsn: int) -> int:
        """Trim blocks holding only records below ``up_to_lsn``; returns blocks trimmed."""
        if up_to_lsn <= 0:
            return 0
        if up_to_lsn > self._checkpoint_lsn or up_to_lsn > self._flushed_lsn:
            raise TruncationError(
                f"truncate to {up_to_lsn} beyond checkpoint {self._checkpoint_lsn} "
                f"or flushed {self._flushed_lsn}"
            )
        trimmed = []
        with self._lock:
            while len(self._retained) > 1 and self._retained[0][1] < up_to_lsn:
                trimmed.append(self._retained.popleft()[0])
            self._head = self._retained[0][0]
        for index in trimmed:
            self.device.trim(self.start_lba + index, TAG_LOG)
        if trimmed:
            logger.debug("log truncated to lsn %d: %d blocks trimmed", up_to_lsn, len(trimmed))
        return len(trimmed)

    # -- recovery ----------------------------------------------------------

    def _read_ring(self) -> List[bytes]:
        raw = self.device.read_blocks(self.start_lba, self.block_count)
        return [raw[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE] for i in range(self.block_count)]

    def _scan(self, head: int) -> Tuple[List[LogRecord], List[Tuple[int, int]]]:
        """Records readable from ``head`` and the blocks they came from as (index, last_lsn)."""
        blocks = self._read_ring()
        stream = bytearray()
        spans: List[Tuple[int, int]] = []
        started = False
        for step in range(self.block_count):
            index = (head + step) % self.block_count
            raw = blocks[index]
            if raw == ZERO_BLOCK:
                if self.mode is LogMode.SPARSE:
                    continue
                break
            magic, _first_lsn, fill, first_offset = BLOCK_HEADER.unpack_from(raw)
            if magic != LOG_MAGIC or fill > PAYLOAD_SIZE:
                self.counters.bump("torn_log_blocks")
                break
            payload = raw[BLOCK_HEADER.size:BLOCK_HEADER.size + fill]
            if not started:
                if first_offset == NO_FRAME_START or first_offset > fill:
                    continue
                payload = payload[first_offset:]
                started = True
            spans.append((index, len(stream)))
            stream += payload

        records: List[LogRecord] = []
        block_last = [0] * len(spans)
        span_starts = [start for _, start in spans]
        pos = 0
        span_i = 0
        while pos < len(stream):
            rec, next_pos = LogRecord.decode_from(stream, pos)
            if rec is None or (records and rec.lsn <= records[-1].lsn):
                if stream[pos:].strip(b"\x00"):
                    self.counters.bump("torn_log_blocks")
                break
            records.append(rec)
            while span_i + 1 < len(spans) and span_starts[span_i + 1] <= pos:
                span_i += 1
            j = span_i
            while j < len(spans) and span_starts[j] < next_pos:
                block_last[j] = rec.lsn
                j += 1
            pos = next_pos
        marks = [(index, block_last[i]) for i, (index, _) in enumerate(spans)]
        return records, marks

    def replay(self, from_lsn: int) -> Iterator[LogRecord]:
        """Yield durable records above ``from_lsn`` in LSN order, stopping at a torn tail."""
        records, _ = self._scan(self._head)
        for rec in records:
            if rec.lsn > from_lsn:
                yield rec

    def open_at(self, head: int, next_lsn: int) -> List[LogRecord]:
        """Scan from ``head`` and position new appends in a fresh block after the tail."""
        records, marks = self._scan(head)
        with self._lock:
            self._head = head
            last_index = marks[-1][0] if marks else (head - 1) % self.block_count
            cur = (last_index + 1) % self.block_count if marks else head
            self._reset_position(cur)
            if marks:
                self._retained = collections.deque([list(m) for m in marks] + [[cur, 0]])
            last_lsn = records[-1].lsn if records else 0
            self._last_lsn = max(last_lsn, next_lsn - 1)
            self._next_lsn = self._last_lsn + 1
            boundary = max((r.lsn for r in records if r.kind in BOUNDARY_KINDS), default=0)
            self._last_boundary = boundary
            self._failed = None
        with self._cond:
            self._flushed_lsn = self._last_lsn
            self._safe_lsn = self._last_lsn
        logger.info("redo log opened at block %d: %d records readable, next lsn %d",
                    head, len(records), self._next_lsn)
        return records

    def stats(self) -> dict:
        return {
            "mode": self.mode.value,
            "flushes": self.flush_count,
            "blocks_written": self.blocks_written,
            "flushed_lsn": self._flushed_lsn,
            "safe_lsn": self._safe_lsn,
            "used_blocks": self.used_blocks(),
        }
