"""Page persistence strategies.

``DeterministicShadowStore`` gives every page a fixed region of two page
slots plus one 4KB delta block and flips between the slots on each full
flush; which slot is current lives only in memory and is rebuilt lazily
on load. ``MappedShadowStore`` is the conventional alternative that
allocates slots from a free list and persists a page table.
``JournaledStore`` updates pages in place behind a double-write journal.

Device layout::

    [superblock slot 0][superblock slot 1][page data area ...][redo log ring]
"""

import abc
import heapq
import logging
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .device import BLOCK_SIZE, ZERO_BLOCK, CompressedBlockDevice
from .errors import CapacityError, ConfigMismatchError, UnrecoverablePageError
from .metrics import RecoveryCounters, WriteCategory, WriteTag
from .page import NO_PAGE, image_lsn, image_page_id, is_intact
from .modlog import ModlogOutcome, reconstruct

logger = logging.getLogger(__name__)

SUPERBLOCK_LBAS = (0, 1)
DATA_START_LBA = 2

TAG_SLOT = WriteTag(WriteCategory.PG, "slot")
TAG_MODLOG = WriteTag(WriteCategory.PG, "modlog")
TAG_SUPERBLOCK = WriteTag(WriteCategory.PG, "superblock")
TAG_HOME = WriteTag(WriteCategory.PG, "home")
TAG_PAGE_TABLE = WriteTag(WriteCategory.E, "page-table")
TAG_JOURNAL = WriteTag(WriteCategory.E, "journal")


def _is_zero(data: bytes) -> bool:
    return data == ZERO_BLOCK if len(data) == BLOCK_SIZE else not data.strip(b"\x00")


# -- deterministic regions ------------------------------------------------

@dataclass(frozen=True)
class PageRegion:
    page_id: int
    slot0_lba: int
    slot1_lba: int
    modlog_lba: int
    blocks_per_page: int

    @property
    def first_lba(self) -> int:
        return self.slot0_lba

    @property
    def block_count(self) -> int:
        return 2 * self.blocks_per_page + 1

    def slot_lba(self, slot: int) -> int:
        return self.slot1_lba if slot else self.slot0_lba


def region_stride(page_size: int) -> int:
    return 2 * (page_size // BLOCK_SIZE) + 1


def allocate_region(page_id: int, page_size: int, base_lba: int = 0,
                    max_pages: Optional[int] = None) -> PageRegion:
    """Fixed region of ``page_id``: two slots then the delta block. No I/O."""
    if page_id < 0 or (max_pages is not None and page_id >= max_pages):
        raise CapacityError(f"page {page_id} beyond the {max_pages} pages the device holds")
    bpp = page_size // BLOCK_SIZE
    start = base_lba + page_id * region_stride(page_size)
    return PageRegion(page_id, start, start + bpp, start + 2 * bpp, bpp)


class SlotDirectory:
    """One bit per page naming the valid slot, plus a known bit. Never persisted."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._bits = bytearray((capacity + 7) // 8)
        self._known = bytearray((capacity + 7) // 8)
        self._lock = threading.Lock()

    def get(self, page_id: int) -> Optional[int]:
        byte, mask = page_id >> 3, 1 << (page_id & 7)
        with self._lock:
            if not self._known[byte] & mask:
                return None
            return 1 if self._bits[byte] & mask else 0

    def set(self, page_id: int, slot: int) -> None:
        byte, mask = page_id >> 3, 1 << (page_id & 7)
        with self._lock:
            if slot:
                self._bits[byte] |= mask
            else:
                self._bits[byte] &= ~mask & 0xFF
            self._known[byte] |= mask

    def is_known(self, page_id: int) -> bool:
        return self.get(page_id) is not None

    def forget_all(self) -> None:
        with self._lock:
            self._bits[:] = bytes(len(self._bits))
            self._known[:] = bytes(len(self._known))


@dataclass(frozen=True)
class SlotResolution:
    slot: int
    torn: int = 0
    lsn_resolved: bool = False


def resolve_valid_slot(img0: bytes, img1: bytes, page_id: int = NO_PAGE) -> SlotResolution:
    """Pick the slot holding the newest intact image.

    A slot that is all-zero or fails its checksum loses; if both are
    intact the higher LSN wins, ties going to slot 0.
    """
    ok0 = not _is_zero(img0) and is_intact(img0)
    ok1 = not _is_zero(img1) and is_intact(img1)
    torn = sum(1 for img, ok in ((img0, ok0), (img1, ok1)) if not ok and not _is_zero(img))
    if ok0 and ok1:
        return SlotResolution(1 if image_lsn(img1) > image_lsn(img0) else 0, torn, True)
    if ok0:
        return SlotResolution(0, torn)
    if ok1:
        return SlotResolution(1, torn)
    raise UnrecoverablePageError(page_id, "neither slot holds an intact image")


@dataclass
class LoadedPage:
    page_id: int
    image: Optional[bytes]
    f: int = 0
    has_base: bool = True
    modlog_clean: bool = True
    base_lsn: int = 0

    @property
    def fresh(self) -> bool:
        return self.image is None


# -- superblock -------------------------------------------------------------

SUPERBLOCK = struct.Struct("<I4sQQQQQQIHBBd")
SUPERBLOCK_MAGIC = b"BMSB"

MODE_CODES = {"bminus": 1, "baseline": 2, "journal": 3}
LOG_MODE_CODES = {"sparse": 1, "packed": 2}


@dataclass
class Superblock:
    generation: int = 0
    root: int = 0
    next_page_id: int = 0
    checkpoint_lsn: int = 0
    next_lsn: int = 1
    log_head: int = 0
    page_size: int = 8192
    segment_size: int = 128
    mode: str = "bminus"
    log_mode: str = "sparse"
    created: float = 0.0

    def encode(self) -> bytes:
        block = bytearray(BLOCK_SIZE)
        SUPERBLOCK.pack_into(
            block, 0, 0, SUPERBLOCK_MAGIC, self.generation, self.root, self.next_page_id,
            self.checkpoint_lsn, self.next_lsn, self.log_head, self.page_size, self.segment_size,
            MODE_CODES[self.mode], LOG_MODE_CODES[self.log_mode], self.created,
        )
        struct.pack_into("<I", block, 0, zlib.crc32(memoryview(block)[4:]) & 0xFFFFFFFF)
        return bytes(block)

    @classmethod
    def decode(cls, raw: bytes) -> Optional["Superblock"]:
        (checksum, magic, generation, root, next_page_id, checkpoint_lsn, next_lsn, log_head,
         page_size, segment_size, mode, log_mode, created) = SUPERBLOCK.unpack_from(raw)
        if magic != SUPERBLOCK_MAGIC or checksum != zlib.crc32(memoryview(raw)[4:]) & 0xFFFFFFFF:
            return None
        modes = {v: k for k, v in MODE_CODES.items()}
        log_modes = {v: k for k, v in LOG_MODE_CODES.items()}
        if mode not in modes or log_mode not in log_modes:
            return None
        return cls(generation, root, next_page_id, checkpoint_lsn, next_lsn, log_head,
                   page_size, segment_size, modes[mode], log_modes[log_mode], created)

    def check_matches(self, page_size: int, segment_size: int, mode: str) -> None:
        if (self.page_size, self.segment_size, self.mode) != (page_size, segment_size, mode):
            raise ConfigMismatchError(
                f"device formatted with page_size={self.page_size} segment_size={self.segment_size} "
                f"mode={self.mode}; opened with page_size={page_size} segment_size={segment_size} mode={mode}"
            )


class SuperblockStore:
    """Two single-block slots at the head of the device, flipped like page slots."""

    def __init__(self, device: CompressedBlockDevice):
        self.device = device
        self._valid: Optional[int] = None
        self._generation = 0
        self._lock = threading.Lock()

    def read(self) -> Optional[Superblock]:
        """Newest intact superblock; ``None`` on a never-formatted device."""
        raw = self.device.read_blocks(SUPERBLOCK_LBAS[0], 2)
        images = (raw[:BLOCK_SIZE], raw[BLOCK_SIZE:])
        decoded = [Superblock.decode(img) if not _is_zero(img) else None for img in images]
        if decoded[0] is None and decoded[1] is None:
            if any(not _is_zero(img) for img in images):
                raise UnrecoverablePageError(NO_PAGE, "no intact superblock")
            self._valid = None
            return None
        if decoded[1] is not None and (decoded[0] is None or decoded[1].generation > decoded[0].generation):
            self._valid = 1
        else:
            self._valid = 0
        self._generation = decoded[self._valid].generation
        return decoded[self._valid]

    def write(self, superblock: Superblock) -> None:
        with self._lock:
            target = 0 if self._valid is None else 1 - self._valid
            self._generation += 1
            superblock.generation = self._generation
            self.device.write_block(SUPERBLOCK_LBAS[target], superblock.encode(), TAG_SUPERBLOCK)
            if self._valid is not None:
                self.device.trim(SUPERBLOCK_LBAS[self._valid], TAG_SUPERBLOCK)
            self._valid = target


# -- page stores --------------------------------------------------------------

class PageStore(abc.ABC):
    """Where full page images and delta blocks live on the device."""

    supports_delta = False

    def __init__(self, device: CompressedBlockDevice, page_size: int, segment_size: int,
                 base_lba: int, block_count: int, counters: Optional[RecoveryCounters] = None):
        self.device = device
        self.page_size = page_size
        self.segment_size = segment_size
        self.blocks_per_page = page_size // BLOCK_SIZE
        self.base_lba = base_lba
        self.block_count = block_count
        self.counters = counters or RecoveryCounters()

    @property
    def max_pages(self) -> int:
        raise NotImplementedError

    def check_page(self, page_id: int) -> None:
        if not 0 <= page_id < self.max_pages:
            raise CapacityError(f"page {page_id} beyond the {self.max_pages} pages the device holds")

    def format(self) -> None:
        """Prepare a never-used data area."""

    def recover(self, page_count: int) -> None:
        """Repair on-device state after reopen, before any page is loaded."""

    @abc.abstractmethod
    def load_page(self, page_id: int) -> LoadedPage:
        ...

    @abc.abstractmethod
    def flush_page(self, page_id: int, image: bytes) -> None:
        ...

    def modlog_lba(self, page_id: int) -> Optional[int]:
        return None

    def write_modlog(self, page_id: int, block: bytes) -> None:
        raise NotImplementedError(f"{type(self).__name__} keeps no delta blocks")

    def trim_modlog(self, page_id: int) -> None:
        raise NotImplementedError(f"{type(self).__name__} keeps no delta blocks")

    @abc.abstractmethod
    def logical_footprint(self, pages: int) -> int:
        """LBA bytes reserved for ``pages`` pages."""


class DeterministicShadowStore(PageStore):
    supports_delta = True

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.stride = region_stride(self.page_size)
        self.directory = SlotDirectory(self.max_pages)

    @property
    def max_pages(self) -> int:
        return self.block_count // self.stride

    def region(self, page_id: int) -> PageRegion:
        return allocate_region(page_id, self.page_size, self.base_lba, self.max_pages)

    def modlog_lba(self, page_id: int) -> Optional[int]:
        return self.region(page_id).modlog_lba

    def logical_footprint(self, pages: int) -> int:
        return pages * self.stride * BLOCK_SIZE

    def _resolve(self, page_id: int, img0: bytes, img1: bytes) -> Tuple[Optional[int], int]:
        """Valid slot (``None`` when the page was never durably written) and torn count."""
        zero0, zero1 = _is_zero(img0), _is_zero(img1)
        if zero0 and zero1:
            return None, 0
        if zero0 or zero1:
            other, other_slot = (img1, 1) if zero0 else (img0, 0)
            if is_intact(other):
                return other_slot, 0
            # A first write that never completed.
            return None, 1
        resolution = resolve_valid_slot(img0, img1, page_id)
        if resolution.lsn_resolved:
            self.counters.bump("lsn_resolved")
        return resolution.slot, resolution.torn

    def load_page(self, page_id: int) -> LoadedPage:
        """Read both slots and the delta block with one request and rebuild the page."""
        region = self.region(page_id)
        raw = self.device.read_blocks(region.first_lba, region.block_count)
        size = self.page_size
        img0, img1, modlog = raw[:size], raw[size:2 * size], raw[2 * size:]
        slot, torn = self._resolve(page_id, img0, img1)
        if torn:
            self.counters.bump("torn_slots", torn)

        if slot is None:
            # Keep writes going to the empty slot so a torn leftover gets trimmed.
            self.directory.set(page_id, 1 if _is_zero(img0) and not _is_zero(img1) else 0)
            self.counters.bump("fresh_pages")
            return LoadedPage(page_id, None, has_base=False, modlog_clean=_is_zero(modlog))

        self.directory.set(page_id, slot)
        base = img1 if slot else img0
        if image_page_id(base) != page_id:
            raise UnrecoverablePageError(page_id, f"slot {slot} holds page {image_page_id(base)}")
        rebuilt = reconstruct(base, modlog, page_id, self.segment_size)
        if rebuilt.outcome is ModlogOutcome.APPLIED:
            self.counters.bump("modlog_applied")
        elif rebuilt.outcome is ModlogOutcome.STALE:
            self.counters.bump("modlog_stale")
        elif rebuilt.outcome is ModlogOutcome.CORRUPT:
            self.counters.bump("modlog_corrupt")
        return LoadedPage(page_id, rebuilt.image, rebuilt.f,
                          modlog_clean=rebuilt.outcome is ModlogOutcome.EMPTY,
                          base_lsn=image_lsn(base))

    def flush_page(self, page_id: int, image: bytes) -> None:
        """Write the non-valid slot, trim the old one, then flip the directory bit."""
        region = self.region(page_id)
        valid = self.directory.get(page_id)
        if valid is None:
            size = self.page_size
            raw = self.device.read_blocks(region.first_lba, 2 * region.blocks_per_page)
            valid, _ = self._resolve(page_id, raw[:size], raw[size:])
            valid = 0 if valid is None else valid
        target = 1 - valid
        self.device.write_blocks(region.slot_lba(target), image, TAG_SLOT)
        self.device.trim_range(region.slot_lba(valid), region.blocks_per_page, TAG_SLOT)
        self.directory.set(page_id, target)

    def write_modlog(self, page_id: int, block: bytes) -> None:
        self.device.write_block(self.region(page_id).modlog_lba, block, TAG_MODLOG)

    def trim_modlog(self, page_id: int) -> None:
        self.device.trim(self.region(page_id).modlog_lba, TAG_MODLOG)


NO_SLOT = 2 ** 64 - 1
TABLE_ENTRIES_PER_BLOCK = BLOCK_SIZE // 8


class MappedShadowStore(PageStore):
    """Shadow paging through a persisted page table (slot per page)."""

    def __init__(self, *args, persist_whole_table: bool = False, **kwargs):
        super().__init__(*args, **kwargs)
        self.persist_whole_table = persist_whole_table
        # Solve table_blocks + 2 * pages * bpp <= block_count.
        pages = self.block_count * TABLE_ENTRIES_PER_BLOCK // (2 * self.blocks_per_page * TABLE_ENTRIES_PER_BLOCK + 1)
        self._max_pages = pages
        self.table_blocks = (pages + TABLE_ENTRIES_PER_BLOCK - 1) // TABLE_ENTRIES_PER_BLOCK
        self.slot_base = self.base_lba + self.table_blocks
        self.slot_count = (self.block_count - self.table_blocks) // self.blocks_per_page
        self._table: List[int] = [NO_SLOT] * pages
        self._free: List[int] = list(range(self.slot_count))
        self._lock = threading.Lock()

    @property
    def max_pages(self) -> int:
        return self._max_pages

    def logical_footprint(self, pages: int) -> int:
        return (self.table_blocks + 2 * pages * self.blocks_per_page) * BLOCK_SIZE

    def _slot_lba(self, slot: int) -> int:
        return self.slot_base + slot * self.blocks_per_page

    def _table_block(self, index: int) -> bytes:
        start = index * TABLE_ENTRIES_PER_BLOCK
        entries = self._table[start:start + TABLE_ENTRIES_PER_BLOCK]
        entries += [NO_SLOT] * (TABLE_ENTRIES_PER_BLOCK - len(entries))
        return struct.pack(f"<{TABLE_ENTRIES_PER_BLOCK}Q", *entries)

    def format(self) -> None:
        # Table blocks are pre-written so later updates are in-place overwrites.
        for index in range(self.table_blocks):
            self.device.write_block(self.base_lba + index, self._table_block(index), TAG_PAGE_TABLE)

    def recover(self, page_count: int) -> None:
        raw = self.device.read_blocks(self.base_lba, self.table_blocks)
        table = list(struct.unpack(f"<{self.table_blocks * TABLE_ENTRIES_PER_BLOCK}Q", raw))
        with self._lock:
            self._table = table[:self._max_pages]
            used = {slot for slot in self._table if slot != NO_SLOT}
            self._free = [slot for slot in range(self.slot_count) if slot not in used]
            heapq.heapify(self._free)
        logger.info("page table loaded: %d mapped pages", len(used))

    def load_page(self, page_id: int) -> LoadedPage:
        self.check_page(page_id)
        with self._lock:
            slot = self._table[page_id]
        if slot == NO_SLOT:
            self.counters.bump("fresh_pages")
            return LoadedPage(page_id, None, has_base=False)
        image = self.device.read_blocks(self._slot_lba(slot), self.blocks_per_page)
        if not is_intact(image):
            raise UnrecoverablePageError(page_id, f"mapped slot {slot} fails its checksum")
        return LoadedPage(page_id, image, base_lsn=image_lsn(image))

    def flush_page(self, page_id: int, image: bytes) -> None:
        """New slot, then the table, then release the old slot."""
        self.check_page(page_id)
        with self._lock:
            if not self._free:
                raise CapacityError("no free page slots")
            slot = heapq.heappop(self._free)
            old = self._table[page_id]
        try:
            self.device.write_blocks(self._slot_lba(slot), image, TAG_SLOT)
        except Exception:
            with self._lock:
                heapq.heappush(self._free, slot)
            raise
        with self._lock:
            self._table[page_id] = slot
            if self.persist_whole_table:
                blocks = [(i, self._table_block(i)) for i in range(self.table_blocks)]
            else:
                index = page_id // TABLE_ENTRIES_PER_BLOCK
                blocks = [(index, self._table_block(index))]
        for index, block in blocks:
            self.device.write_block(self.base_lba + index, block, TAG_PAGE_TABLE)
        if old != NO_SLOT:
            self.device.trim_range(self._slot_lba(old), self.blocks_per_page, TAG_SLOT)
            with self._lock:
                heapq.heappush(self._free, old)


class JournaledStore(PageStore):
    """In-place page updates protected by a double-write journal."""

    def __init__(self, *args, journal_slots: int = 64, **kwargs):
        super().__init__(*args, **kwargs)
        self.journal_slots = journal_slots
        self.home_base = self.base_lba + journal_slots * self.blocks_per_page
        self._next_journal = 0
        self._lock = threading.Lock()

    @property
    def max_pages(self) -> int:
        return (self.block_count - self.journal_slots * self.blocks_per_page) // self.blocks_per_page

    def logical_footprint(self, pages: int) -> int:
        return (self.journal_slots + pages) * self.blocks_per_page * BLOCK_SIZE

    def _journal_lba(self, slot: int) -> int:
        return self.base_lba + slot * self.blocks_per_page

    def _home_lba(self, page_id: int) -> int:
        return self.home_base + page_id * self.blocks_per_page

    def recover(self, page_count: int) -> None:
        """Copy back journal images newer than a torn or older home copy."""
        newest: Dict[int, bytes] = {}
        for slot in range(self.journal_slots):
            image = self.device.read_blocks(self._journal_lba(slot), self.blocks_per_page)
            if _is_zero(image) or not is_intact(image):
                continue
            page_id = image_page_id(image)
            if page_id >= self.max_pages:
                continue
            if page_id not in newest or image_lsn(image) > image_lsn(newest[page_id]):
                newest[page_id] = image
        for page_id, image in sorted(newest.items()):
            home = self.device.read_blocks(self._home_lba(page_id), self.blocks_per_page)
            if is_intact(home) and image_lsn(home) >= image_lsn(image):
                continue
            self.device.write_blocks(self._home_lba(page_id), image, TAG_HOME)
            self.counters.bump("journal_restores")
        if newest:
            logger.info("journal scan: %d candidate pages, %d restored",
                        len(newest), self.counters.journal_restores)

    def load_page(self, page_id: int) -> LoadedPage:
        self.check_page(page_id)
        image = self.device.read_blocks(self._home_lba(page_id), self.blocks_per_page)
        if _is_zero(image):
            self.counters.bump("fresh_pages")
            return LoadedPage(page_id, None, has_base=False)
        if not is_intact(image):
            raise UnrecoverablePageError(page_id, "home copy torn and no journal image covers it")
        return LoadedPage(page_id, image, base_lsn=image_lsn(image))

    def flush_page(self, page_id: int, image: bytes) -> None:
        self.check_page(page_id)
        # The journal slot must not be reused before the home write lands.
        with self._lock:
            slot = self._next_journal
            self._next_journal = (slot + 1) % self.journal_slots
            self.device.write_blocks(self._journal_lba(slot), image, TAG_JOURNAL)
            self.device.write_blocks(self._home_lba(page_id), image, TAG_HOME)


def make_page_store(mode: str, device: CompressedBlockDevice, page_size: int, segment_size: int,
                    base_lba: int, block_count: int, counters: RecoveryCounters,
                    persist_whole_table: bool = False, journal_slots: int = 64) -> PageStore:
    if mode == "bminus":
        return DeterministicShadowStore(device, page_size, segment_size, base_lba, block_count, counters)
    if mode == "baseline":
        return MappedShadowStore(device, page_size, segment_size, base_lba, block_count, counters,
                                 persist_whole_table=persist_whole_table)
    if mode == "journal":
        return JournaledStore(device, page_size, segment_size, base_lba, block_count, counters,
                              journal_slots=journal_slots)
    raise ValueError(f"unknown mode {mode!r}")
