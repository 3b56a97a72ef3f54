"""Slotted B-tree page image, checksums and segment-granular dirty tracking.

Byte layout (little-endian)::

    0    u32   checksum   crc32 over bytes [4, page_size)
    4    4s    magic      b"BMPG"
    8    u64   page_id
    16   u64   lsn
    24   u16   record_count
    26   u16   heap_start  lowest offset used by record bytes
    28   u8    level       0 for leaves
    29   u8    flags
    30   u64   right_sibling
    38   u64   leftmost_child  (internal pages)
    48   slot directory, 6 bytes per record: u16 offset, u16 key_len, u16 value_len
    ...  free space
    ...  record heap (key bytes then value bytes), grows down
    -16  u64   lsn copy, 4s b"BMTL", 4 bytes pad

The slot directory is kept in key order.
"""

import bisect
import math
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

from .errors import GeometryMismatchError, PageOverflowError, SegmentRangeError

HEADER = struct.Struct("<I4sQQHHBBQQ2x")
TRAILER = struct.Struct("<Q4s4x")
SLOT = struct.Struct("<HHH")
CHILD = struct.Struct("<Q")

PAGE_MAGIC = b"BMPG"
TRAILER_MAGIC = b"BMTL"
HEADER_SIZE = HEADER.size
TRAILER_SIZE = TRAILER.size
SLOT_SIZE = SLOT.size

_OFF_LSN = 16
_OFF_COUNT = 24
_OFF_HEAP = 26
_OFF_LEVEL = 28
_OFF_SIBLING = 30
_OFF_LEFTMOST = 38

NO_PAGE = 2 ** 64 - 1
MAX_KEY_SIZE = 2048
PAGE_SIZES = (8192, 16384)


def max_record_bytes(page_size: int) -> int:
    """Largest key+value accepted, leaving room for at least three records."""
    return (page_size - HEADER_SIZE - TRAILER_SIZE) // 3 - SLOT_SIZE


def records_per_page(page_size: int, record_bytes: int) -> int:
    """Records of ``record_bytes`` that fit an empty page."""
    return (page_size - HEADER_SIZE - TRAILER_SIZE) // (record_bytes + SLOT_SIZE)


class SegmentTracker:
    """k-bit vector marking the segments modified since the last full-page flush."""

    __slots__ = ("page_size", "segment_size", "k", "bits")

    def __init__(self, page_size: int, segment_size: int, bits: int = 0):
        if segment_size <= 0 or page_size <= 0:
            raise GeometryMismatchError("page and segment sizes must be positive")
        self.page_size = page_size
        self.segment_size = segment_size
        self.k = math.ceil(page_size / segment_size)
        self.bits = bits

    def mark_dirty(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.page_size:
            raise SegmentRangeError(f"range [{offset}, {offset + length}) outside page of {self.page_size}")
        if length == 0:
            return
        first = offset // self.segment_size
        last = (offset + length - 1) // self.segment_size
        self.bits |= ((1 << (last - first + 1)) - 1) << first

    def segment_length(self, i: int) -> int:
        return min(self.segment_size, self.page_size - i * self.segment_size)

    def set_segments(self) -> Iterator[int]:
        bits = self.bits
        i = 0
        while bits:
            if bits & 1:
                yield i
            bits >>= 1
            i += 1

    def runs(self) -> Iterator[Tuple[int, int]]:
        """Contiguous (start, end) byte ranges covered by set bits."""
        start = prev = None
        for i in self.set_segments():
            if start is None:
                start = prev = i
            elif i == prev + 1:
                prev = i
            else:
                yield start * self.segment_size, min((prev + 1) * self.segment_size, self.page_size)
                start = prev = i
        if start is not None:
            yield start * self.segment_size, min((prev + 1) * self.segment_size, self.page_size)

    @property
    def popcount(self) -> int:
        return bin(self.bits).count("1")

    def delta_size(self) -> int:
        size = self.popcount * self.segment_size
        last = self.k - 1
        if self.bits >> last & 1:
            size -= self.segment_size - self.segment_length(last)
        return size

    def clear(self) -> None:
        self.bits = 0

    def mark_all(self) -> None:
        self.bits = (1 << self.k) - 1

    def is_clean(self) -> bool:
        return self.bits == 0

    def copy(self) -> "SegmentTracker":
        return SegmentTracker(self.page_size, self.segment_size, self.bits)

    @property
    def byte_length(self) -> int:
        return (self.k + 7) // 8

    def to_bytes(self) -> bytes:
        return self.bits.to_bytes(self.byte_length, "little")

    @classmethod
    def from_bytes(cls, page_size: int, segment_size: int, raw: bytes) -> "SegmentTracker":
        tracker = cls(page_size, segment_size)
        bits = int.from_bytes(raw[:tracker.byte_length], "little")
        if bits >> tracker.k:
            raise GeometryMismatchError("f vector has bits beyond the segment count")
        tracker.bits = bits
        return tracker


def mark_dirty(tracker: SegmentTracker, offset: int, length: int) -> None:
    tracker.mark_dirty(offset, length)


def delta_size(tracker: SegmentTracker) -> int:
    return tracker.delta_size()


@dataclass(frozen=True)
class Delta:
    """Concatenated modified segments plus the vector selecting them."""

    page_size: int
    segment_size: int
    f: int
    segments: bytes

    @property
    def size(self) -> int:
        return len(self.segments)

    def tracker(self) -> SegmentTracker:
        return SegmentTracker(self.page_size, self.segment_size, self.f)


def extract_delta(mem, tracker: SegmentTracker) -> Delta:
    """Copy the segments selected by ``tracker`` out of a page or a page image."""
    buf = mem.buf if isinstance(mem, PageImage) else mem
    if tracker.page_size != len(buf):
        raise GeometryMismatchError("tracker does not match page size")
    segments = b"".join(bytes(buf[start:end]) for start, end in tracker.runs())
    return Delta(len(buf), tracker.segment_size, tracker.bits, segments)


def apply_delta(base: bytes, delta: Delta) -> bytes:
    if len(base) != delta.page_size:
        raise GeometryMismatchError(f"base of {len(base)} bytes, delta for {delta.page_size}")
    tracker = delta.tracker()
    if tracker.bits >> tracker.k:
        raise GeometryMismatchError("f vector has bits beyond the segment count")
    if tracker.delta_size() != len(delta.segments):
        raise GeometryMismatchError("payload length disagrees with f")
    out = bytearray(base)
    pos = 0
    for start, end in tracker.runs():
        out[start:end] = delta.segments[pos:pos + end - start]
        pos += end - start
    return bytes(out)


def page_checksum(image) -> int:
    return zlib.crc32(memoryview(image)[4:]) & 0xFFFFFFFF


def verify_checksum(image: bytes) -> bool:
    """True iff the stored checksum matches the page bytes."""
    if len(image) < HEADER_SIZE + TRAILER_SIZE:
        return False
    (stored,) = struct.unpack_from("<I", image, 0)
    return stored == page_checksum(image)


def image_lsn(image: bytes) -> int:
    return struct.unpack_from("<Q", image, _OFF_LSN)[0]


def image_page_id(image: bytes) -> int:
    return struct.unpack_from("<Q", image, 8)[0]


def is_intact(image: bytes) -> bool:
    """Checksum plus the header/trailer LSN and magic cross-checks."""
    if not verify_checksum(image):
        return False
    trailer_lsn, magic = TRAILER.unpack_from(image, len(image) - TRAILER_SIZE)
    return magic == TRAILER_MAGIC and image[4:8] == PAGE_MAGIC and trailer_lsn == image_lsn(image)


class _KeyView:
    """Sequence of a page's keys for bisect."""

    __slots__ = ("page",)

    def __init__(self, page: "PageImage"):
        self.page = page

    def __len__(self) -> int:
        return self.page.record_count

    def __getitem__(self, i: int) -> bytes:
        return self.page.key_at(i)


class PageImage:
    """In-memory page; every byte change is reported to the attached tracker."""

    def __init__(self, buf: bytearray, tracker: Optional[SegmentTracker] = None):
        self.buf = buf
        self.page_size = len(buf)
        self.tracker = tracker
        self._live = sum(k + v for _, k, v in self._slots())

    # -- construction ------------------------------------------------------

    @classmethod
    def empty(cls, page_id: int, page_size: int, level: int = 0,
              tracker: Optional[SegmentTracker] = None) -> "PageImage":
        page = cls(bytearray(page_size), tracker)
        page.reset(level, page_id=page_id)
        return page

    @classmethod
    def deserialize(cls, image: bytes, tracker: Optional[SegmentTracker] = None) -> "PageImage":
        return cls(bytearray(image), tracker)

    def serialize(self) -> bytes:
        """Embed the checksum and return the page bytes."""
        self._write(0, struct.pack("<I", page_checksum(self.buf)))
        return bytes(self.buf)

    def reset(self, level: int, page_id: Optional[int] = None) -> None:
        """Reinitialise as an empty page, keeping the LSN."""
        lsn = self.lsn if self.buf[4:8] == PAGE_MAGIC else 0
        pid = self.page_id if page_id is None else page_id
        self.buf[:] = bytes(self.page_size)
        header = HEADER.pack(0, PAGE_MAGIC, pid, lsn, 0, self.page_size - TRAILER_SIZE,
                             level, 0, NO_PAGE, NO_PAGE)
        self.buf[:HEADER_SIZE] = header
        self.buf[self.page_size - TRAILER_SIZE:] = TRAILER.pack(lsn, TRAILER_MAGIC)
        self._live = 0
        if self.tracker is not None:
            self.tracker.mark_all()

    # -- raw access --------------------------------------------------------

    def _write(self, offset: int, data: bytes) -> None:
        self.buf[offset:offset + len(data)] = data
        if self.tracker is not None:
            self.tracker.mark_dirty(offset, len(data))

    def _u16(self, offset: int) -> int:
        return struct.unpack_from("<H", self.buf, offset)[0]

    def _u64(self, offset: int) -> int:
        return struct.unpack_from("<Q", self.buf, offset)[0]

    def _slot(self, i: int) -> Tuple[int, int, int]:
        return SLOT.unpack_from(self.buf, HEADER_SIZE + i * SLOT_SIZE)

    def _slots(self) -> Iterator[Tuple[int, int, int]]:
        count = self._u16(_OFF_COUNT) if self.buf[4:8] == PAGE_MAGIC else 0
        for i in range(count):
            yield self._slot(i)

    # -- header fields -----------------------------------------------------

    @property
    def page_id(self) -> int:
        return self._u64(8)

    @property
    def lsn(self) -> int:
        return self._u64(_OFF_LSN)

    @lsn.setter
    def lsn(self, value: int) -> None:
        packed = struct.pack("<Q", value)
        self._write(_OFF_LSN, packed)
        self._write(self.page_size - TRAILER_SIZE, packed)

    @property
    def record_count(self) -> int:
        return self._u16(_OFF_COUNT)

    def _set_count(self, count: int) -> None:
        self._write(_OFF_COUNT, struct.pack("<H", count))

    @property
    def heap_start(self) -> int:
        return self._u16(_OFF_HEAP)

    def _set_heap_start(self, offset: int) -> None:
        self._write(_OFF_HEAP, struct.pack("<H", offset))

    @property
    def level(self) -> int:
        return self.buf[_OFF_LEVEL]

    @property
    def is_leaf(self) -> bool:
        return self.level == 0

    @property
    def right_sibling(self) -> int:
        return self._u64(_OFF_SIBLING)

    @right_sibling.setter
    def right_sibling(self, page_id: int) -> None:
        self._write(_OFF_SIBLING, struct.pack("<Q", page_id))

    @property
    def leftmost_child(self) -> int:
        return self._u64(_OFF_LEFTMOST)

    @leftmost_child.setter
    def leftmost_child(self, page_id: int) -> None:
        self._write(_OFF_LEFTMOST, struct.pack("<Q", page_id))

    # -- space -------------------------------------------------------------

    @property
    def total_free(self) -> int:
        usable = self.page_size - HEADER_SIZE - TRAILER_SIZE
        return usable - self.record_count * SLOT_SIZE - self._live

    @property
    def contiguous_free(self) -> int:
        return self.heap_start - (HEADER_SIZE + self.record_count * SLOT_SIZE)

    @property
    def used_bytes(self) -> int:
        return self.record_count * SLOT_SIZE + self._live

    def has_room(self, key_len: int, value_len: int) -> bool:
        return self.total_free >= key_len + value_len + SLOT_SIZE

    def _compact(self) -> None:
        records = list(self.records())
        end = self.page_size - TRAILER_SIZE
        heap = bytearray()
        slots = bytearray()
        offset = end
        for key, value in records:
            offset -= len(key) + len(value)
            slots += SLOT.pack(offset, len(key), len(value))
        for key, value in reversed(records):
            heap += key + value
        self._write(HEADER_SIZE, bytes(slots))
        if heap:
            self._write(offset, bytes(heap))
        self._set_heap_start(offset)

    def _allocate(self, size: int) -> int:
        if self.contiguous_free < size + SLOT_SIZE:
            self._compact()
        offset = self.heap_start - size
        self._set_heap_start(offset)
        return offset

    # -- records -----------------------------------------------------------

    def key_at(self, i: int) -> bytes:
        offset, key_len, _ = self._slot(i)
        return bytes(self.buf[offset:offset + key_len])

    def value_at(self, i: int) -> bytes:
        offset, key_len, value_len = self._slot(i)
        start = offset + key_len
        return bytes(self.buf[start:start + value_len])

    def record_at(self, i: int) -> Tuple[bytes, bytes]:
        offset, key_len, value_len = self._slot(i)
        data = bytes(self.buf[offset:offset + key_len + value_len])
        return data[:key_len], data[key_len:]

    def records(self) -> Iterator[Tuple[bytes, bytes]]:
        for i in range(self.record_count):
            yield self.record_at(i)

    def keys(self) -> List[bytes]:
        return [self.key_at(i) for i in range(self.record_count)]

    def search(self, key: bytes) -> Tuple[int, bool]:
        """Index of ``key`` or of its insertion point, and whether it was found."""
        i = bisect.bisect_left(_KeyView(self), key)
        return i, i < self.record_count and self.key_at(i) == key

    def insert_at(self, i: int, key: bytes, value: bytes) -> None:
        count = self.record_count
        if not 0 <= i <= count:
            raise IndexError(i)
        if not self.has_room(len(key), len(value)):
            raise PageOverflowError(
                f"page {self.page_id}: {len(key) + len(value)} byte record, {self.total_free} free"
            )
        offset = self._allocate(len(key) + len(value))
        self._write(offset, key + value)
        start = HEADER_SIZE + i * SLOT_SIZE
        end = HEADER_SIZE + count * SLOT_SIZE
        tail = bytes(self.buf[start:end])
        self._write(start, SLOT.pack(offset, len(key), len(value)) + tail)
        self._set_count(count + 1)
        self._live += len(key) + len(value)

    def update_at(self, i: int, value: bytes) -> None:
        offset, key_len, value_len = self._slot(i)
        if len(value) == value_len:
            self._write(offset + key_len, value)
            return
        if self.total_free + value_len < len(value):
            raise PageOverflowError(f"page {self.page_id}: value of {len(value)} bytes does not fit")
        key = bytes(self.buf[offset:offset + key_len])
        # Drop the old bytes from the live count before compaction can run.
        self._live -= key_len + value_len
        self._write(HEADER_SIZE + i * SLOT_SIZE, SLOT.pack(0, 0, 0))
        slot_offset = HEADER_SIZE + i * SLOT_SIZE
        size = key_len + len(value)
        if self.contiguous_free < size:
            self._compact_excluding(i)
        new_offset = self.heap_start - size
        self._set_heap_start(new_offset)
        self._write(new_offset, key + value)
        self._write(slot_offset, SLOT.pack(new_offset, key_len, len(value)))
        self._live += size

    def _compact_excluding(self, hole: int) -> None:
        # Compaction while slot ``hole`` is temporarily empty.
        end = self.page_size - TRAILER_SIZE
        slots = bytearray()
        heap = bytearray()
        offset = end
        for i in range(self.record_count):
            if i == hole:
                slots += SLOT.pack(0, 0, 0)
                continue
            key, value = self.record_at(i)
            offset -= len(key) + len(value)
            slots += SLOT.pack(offset, len(key), len(value))
            heap[:0] = key + value
        self._write(HEADER_SIZE, bytes(slots))
        if heap:
            self._write(offset, bytes(heap))
        self._set_heap_start(offset)

    def delete_at(self, i: int) -> None:
        count = self.record_count
        _, key_len, value_len = self._slot(i)
        start = HEADER_SIZE + i * SLOT_SIZE
        end = HEADER_SIZE + count * SLOT_SIZE
        tail = bytes(self.buf[start + SLOT_SIZE:end])
        self._write(start, tail + bytes(SLOT_SIZE))
        self._set_count(count - 1)
        self._live -= key_len + value_len
        if count == 1:
            self._set_heap_start(self.page_size - TRAILER_SIZE)

    def truncate_from(self, i: int) -> None:
        """Drop records ``i..`` (their heap bytes become reclaimable)."""
        count = self.record_count
        if i >= count:
            return
        dropped = sum(k + v for _, k, v in (self._slot(j) for j in range(i, count)))
        self._set_count(i)
        self._live -= dropped
        if i == 0:
            self._set_heap_start(self.page_size - TRAILER_SIZE)

    # -- internal pages ----------------------------------------------------

    def child_at(self, i: int) -> int:
        return CHILD.unpack(self.value_at(i))[0]

    def child_for(self, key: bytes) -> int:
        """Child page covering ``key``."""
        i = bisect.bisect_right(_KeyView(self), key)
        return self.leftmost_child if i == 0 else self.child_at(i - 1)

    def child_index_for(self, key: bytes) -> int:
        """-1 means the leftmost child."""
        return bisect.bisect_right(_KeyView(self), key) - 1

    def __repr__(self) -> str:
        return (f"PageImage(id={self.page_id}, lsn={self.lsn}, level={self.level}, "
                f"records={self.record_count})")


def serialize(page: PageImage) -> bytes:
    return page.serialize()


def deserialize(image: bytes, tracker: Optional[SegmentTracker] = None) -> PageImage:
    return PageImage.deserialize(image, tracker)
