"""Per-page modification log: the dedicated 4KB delta block and the flush decision.

Delta block layout (little-endian, zero padded to 4096 bytes)::

    0    u32   checksum     crc32 over bytes [4, 4096)
    4    4s    magic        b"BMDL"
    8    u64   page_id
    16   u64   lsn          newest modification covered
    24   u16   k            segment count
    26   u16   payload_len
    28   f     ceil(k / 8) bytes
    ...  payload (modified segments in ascending order)

An all-zero block is the reserved empty encoding.
"""

import logging
import struct
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .device import BLOCK_SIZE, ZERO_BLOCK
from .errors import GeometryMismatchError, InvalidThresholdError, UnrecoverablePageError
from .page import Delta, SegmentTracker, apply_delta, extract_delta, image_lsn, is_intact

logger = logging.getLogger(__name__)

DELTA_HEADER = struct.Struct("<I4sQQHH")
DELTA_MAGIC = b"BMDL"


def max_threshold(k: int) -> int:
    """Largest T whose delta still fits the block next to header and f."""
    return BLOCK_SIZE - DELTA_HEADER.size - (k + 7) // 8


def validate_threshold(threshold: int, k: int) -> int:
    if not 0 < threshold <= max_threshold(k):
        raise InvalidThresholdError(
            f"threshold {threshold} outside (0, {max_threshold(k)}] for {k} segments"
        )
    return threshold


@dataclass(frozen=True)
class DeltaBlock:
    page_id: int
    lsn: int
    k: int
    f: int
    payload: bytes

    @classmethod
    def empty(cls, page_id: int, lsn: int, k: int) -> "DeltaBlock":
        return cls(page_id, lsn, k, 0, b"")

    @property
    def is_empty(self) -> bool:
        return self.f == 0

    def encode(self) -> bytes:
        f_bytes = self.f.to_bytes((self.k + 7) // 8, "little")
        body_len = DELTA_HEADER.size + len(f_bytes) + len(self.payload)
        if body_len > BLOCK_SIZE:
            raise GeometryMismatchError(f"delta of {len(self.payload)} bytes exceeds the block")
        block = bytearray(BLOCK_SIZE)
        DELTA_HEADER.pack_into(block, 0, 0, DELTA_MAGIC, self.page_id, self.lsn, self.k, len(self.payload))
        block[DELTA_HEADER.size:body_len] = f_bytes + self.payload
        struct.pack_into("<I", block, 0, zlib.crc32(memoryview(block)[4:]) & 0xFFFFFFFF)
        return bytes(block)

    @classmethod
    def decode(cls, raw: bytes) -> Optional["DeltaBlock"]:
        """Parse a block; ``None`` for the zero block or anything failing validation."""
        if len(raw) != BLOCK_SIZE or raw == ZERO_BLOCK:
            return None
        checksum, magic, page_id, lsn, k, payload_len = DELTA_HEADER.unpack_from(raw)
        if magic != DELTA_MAGIC or checksum != zlib.crc32(memoryview(raw)[4:]) & 0xFFFFFFFF:
            return None
        f_len = (k + 7) // 8
        start = DELTA_HEADER.size + f_len
        if start + payload_len > BLOCK_SIZE:
            return None
        f = int.from_bytes(raw[DELTA_HEADER.size:start], "little")
        return cls(page_id, lsn, k, f, bytes(raw[start:start + payload_len]))


class FlushPath(str, Enum):
    DELTA_LOG = "delta-log"
    FULL_PAGE_RESET = "full-page-reset"


@dataclass(frozen=True)
class FlushDecision:
    path: FlushPath
    delta_size: int
    threshold: int

    @property
    def is_clean(self) -> bool:
        return self.delta_size == 0

    @property
    def reason(self) -> str:
        op = "<=" if self.path is FlushPath.DELTA_LOG else ">"
        return f"|delta|={self.delta_size} {op} T={self.threshold}"


def decide_flush(tracker: SegmentTracker, threshold: int) -> FlushDecision:
    validate_threshold(threshold, tracker.k)
    size = tracker.delta_size()
    path = FlushPath.DELTA_LOG if size <= threshold else FlushPath.FULL_PAGE_RESET
    return FlushDecision(path, size, threshold)


def flush_delta(store, page_id: int, image: bytes, tracker: SegmentTracker) -> int:
    """Write the cumulative delta since the last reset; the tracker is kept.

    ``image`` must already carry its checksum. Returns the payload size.
    """
    delta = extract_delta(image, tracker)
    block = DeltaBlock(page_id, image_lsn(image), tracker.k, tracker.bits, delta.segments)
    store.write_modlog(page_id, block.encode())
    return delta.size


def flush_full_reset(store, page_id: int, image: bytes, tracker: Optional[SegmentTracker],
                     reset_with_trim: bool = False, reset_modlog: bool = True) -> None:
    """Write the whole page to its shadow slot, then empty the delta block.

    ``reset_modlog=False`` skips the delta block when it is known to be empty.
    """
    store.flush_page(page_id, image)
    if reset_modlog and store.modlog_lba(page_id) is not None and tracker is not None:
        if reset_with_trim:
            store.trim_modlog(page_id)
        else:
            store.write_modlog(page_id, DeltaBlock.empty(page_id, image_lsn(image), tracker.k).encode())
    if tracker is not None:
        tracker.clear()


class ModlogOutcome(str, Enum):
    EMPTY = "empty"
    STALE = "stale"
    CORRUPT = "corrupt"
    APPLIED = "applied"


@dataclass(frozen=True)
class Reconstruction:
    image: bytes
    f: int
    outcome: ModlogOutcome


def reconstruct(base: bytes, raw_modlog: Optional[bytes], page_id: int,
                segment_size: int) -> Reconstruction:
    """Bring a resolved slot image up to date with its delta block."""
    if raw_modlog is None or raw_modlog == ZERO_BLOCK:
        return Reconstruction(base, 0, ModlogOutcome.EMPTY)
    block = DeltaBlock.decode(raw_modlog)
    if block is None:
        return Reconstruction(base, 0, ModlogOutcome.CORRUPT)
    if block.page_id != page_id:
        raise UnrecoverablePageError(page_id, f"delta block belongs to page {block.page_id}")
    if block.is_empty or block.lsn <= image_lsn(base):
        return Reconstruction(base, 0, ModlogOutcome.STALE if not block.is_empty else ModlogOutcome.EMPTY)

    tracker = SegmentTracker(len(base), segment_size)
    if block.k != tracker.k:
        raise GeometryMismatchError(f"delta block has {block.k} segments, page has {tracker.k}")
    image = apply_delta(base, Delta(len(base), segment_size, block.f, block.payload))
    if not is_intact(image):
        raise UnrecoverablePageError(page_id, "delta applied over its base fails the checksum")
    return Reconstruction(image, block.f, ModlogOutcome.APPLIED)
