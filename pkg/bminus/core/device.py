"""Simulated block device with transparent per-block compression."""

import abc
import logging
import os
import re
import struct
import threading
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Set

from .errors import (
    AddressOutOfRangeError,
    DeviceCrashedError,
    DeviceFullError,
    UntaggedWriteError,
)
from ..utils.data_storage import atomic_writer, read_kv_file, write_kv_file

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096
ZERO_BLOCK = bytes(BLOCK_SIZE)
IMAGE_MAGIC = b"CSDSIM01"
IMAGE_HEADER = struct.Struct("<8sQHQQ")
IMAGE_RECORD = struct.Struct("<Q")

_NONZERO_RUN = re.compile(rb"[^\x00]+")

# (tag, logical bytes, physical bytes)
WriteRecorder = Callable[[object, int, int], None]


class BlockCodec(abc.ABC):
    """Deterministic lossless codec applied to every written block."""

    codec_id: int = 0
    name: str = ""
    overhead: int = 0

    @abc.abstractmethod
    def compressed_size(self, data: bytes) -> int:
        """Return the exact stored size of one block."""


class DeflateCodec(BlockCodec):
    """zlib/deflate, the class of engine used inside compressing drives."""

    codec_id = 1
    name = "deflate"
    # compressBound(4096) - 4096
    overhead = 14

    def __init__(self, level: int = 6):
        self.level = level

    def compressed_size(self, data: bytes) -> int:
        return len(zlib.compress(data, self.level))


class ZeroRunCodec(BlockCodec):
    """Zero-run elimination only. Fast stand-in for property tests."""

    codec_id = 2
    name = "zero-run"
    overhead = 3

    def compressed_size(self, data: bytes) -> int:
        size = 2
        for run in _NONZERO_RUN.finditer(data):
            size += 4 + (run.end() - run.start())
        return min(size, 3 + len(data))


_CODECS = {
    DeflateCodec.name: DeflateCodec,
    ZeroRunCodec.name: ZeroRunCodec,
}
_CODECS_BY_ID = {cls.codec_id: cls for cls in _CODECS.values()}


def make_codec(name: str) -> BlockCodec:
    """Build a codec by name."""
    try:
        return _CODECS[name]()
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; choose from {sorted(_CODECS)}") from None


@dataclass(frozen=True)
class DeviceStats:
    logical_bytes_written: int = 0
    physical_bytes_written: int = 0
    logical_bytes_read: int = 0
    trims_issued: int = 0
    physical_bytes_resident: int = 0
    block_writes: int = 0
    block_reads: int = 0


@dataclass
class FaultPlan:
    """Where and how the device crashes.

    ``crash_after_n_block_writes`` counts completed block writes from the
    moment the plan is injected; the next write after that is the cut.
    ``None`` crashes immediately. The cut block is torn at
    ``round(4096 * partial_write_fraction)`` when the target holds no
    data or when overwrites are not atomic; otherwise it is dropped.

    ``atomic_overwrites`` models a drive that never exposes a half-written
    4KB block over live data: the cut write either lands whole before the
    crash or not at all. Only writes to free or trimmed blocks tear. Turn
    it off to tear every cut write; the engine's cumulative delta blocks
    rely on 4KB atomicity, so that setting can lose committed changes.
    """

    crash_after_n_block_writes: Optional[int] = None
    partial_write_fraction: Optional[float] = None
    suppress_pending_trims: bool = False
    atomic_overwrites: bool = True

    def __post_init__(self):
        if self.crash_after_n_block_writes is not None and self.crash_after_n_block_writes < 0:
            raise ValueError("crash_after_n_block_writes must be >= 0")
        fraction = self.partial_write_fraction
        if fraction is not None and not 0.0 < fraction < 1.0:
            raise ValueError("partial_write_fraction must be in (0, 1)")


@dataclass(frozen=True)
class TraceEntry:
    index: int
    op: str
    lba: int
    tag: object
    tearable: bool
    request: int


class CompressedBlockDevice:
    """4KB-LBA device that compresses each block on the write path.

    Logical capacity may exceed ``physical_capacity``; only resident
    (post-compression) bytes count against it.
    """

    def __init__(
        self,
        logical_blocks: int,
        physical_capacity: Optional[int] = None,
        codec: Optional[BlockCodec] = None,
        recorder: Optional[WriteRecorder] = None,
        require_tags: bool = __debug__,
    ):
        if logical_blocks <= 0:
            raise ValueError("logical_blocks must be positive")
        self.logical_blocks = logical_blocks
        self.physical_capacity = physical_capacity
        self.codec = codec or DeflateCodec()
        self.require_tags = require_tags
        self._recorder = recorder
        self._lock = threading.RLock()

        self._blocks: Dict[int, bytes] = {}
        self._resident: Dict[int, int] = {}
        self._resident_total = 0
        self._counters = {
            "logical_bytes_written": 0,
            "physical_bytes_written": 0,
            "logical_bytes_read": 0,
            "trims_issued": 0,
            "block_writes": 0,
            "block_reads": 0,
        }

        self._crashed = False
        self._plan: Optional[FaultPlan] = None
        self._writes_before_cut: Optional[int] = None
        # trims since the last completed write: (lba, data, resident size)
        self._pending_trims: List[tuple] = []

        self._trace: Optional[List[TraceEntry]] = None
        self._request_seq = 0

    # -- helpers -----------------------------------------------------------

    def _check_lba(self, lba: int) -> None:
        if not 0 <= lba < self.logical_blocks:
            raise AddressOutOfRangeError(f"lba {lba} outside [0, {self.logical_blocks})")

    def _check_open(self) -> None:
        if self._crashed:
            raise DeviceCrashedError("device crashed; reopen required")

    def _store(self, lba: int, data: bytes) -> int:
        size = self.codec.compressed_size(data)
        self._resident_total += size - self._resident.get(lba, 0)
        self._blocks[lba] = data
        self._resident[lba] = size
        return size

    def _drop(self, lba: int) -> None:
        self._resident_total -= self._resident.pop(lba, 0)
        self._blocks.pop(lba, None)

    def _enter_crashed(self) -> None:
        plan = self._plan
        if plan is not None and plan.suppress_pending_trims:
            for lba, data, _size in reversed(self._pending_trims):
                self._store(lba, data)
            if self._pending_trims:
                logger.debug("crash reverted %d pending trims", len(self._pending_trims))
        self._pending_trims.clear()
        self._crashed = True
        self._writes_before_cut = None
        logger.debug("device entered crashed state")

    def _write_locked(self, lba: int, data: bytes, tag: object, request: int) -> None:
        self._check_open()
        self._check_lba(lba)
        if len(data) != BLOCK_SIZE:
            raise ValueError(f"block write must be {BLOCK_SIZE} bytes, got {len(data)}")
        if tag is None and self.require_tags:
            raise UntaggedWriteError(f"untagged write to lba {lba}")
        data = bytes(data)
        empty_target = lba not in self._blocks

        if self._writes_before_cut is not None:
            if self._writes_before_cut == 0:
                plan = self._plan
                if plan.partial_write_fraction is not None and (
                    empty_target or not plan.atomic_overwrites
                ):
                    cut = round(BLOCK_SIZE * plan.partial_write_fraction)
                    old = self._blocks.get(lba, ZERO_BLOCK)
                    self._store(lba, data[:cut] + old[cut:])
                self._enter_crashed()
                raise DeviceCrashedError(f"crash injected at write to lba {lba}")
            self._writes_before_cut -= 1

        size = self.codec.compressed_size(data)
        if self.physical_capacity is not None:
            projected = self._resident_total - self._resident.get(lba, 0) + size
            if projected > self.physical_capacity:
                raise DeviceFullError(
                    f"resident {projected} bytes would exceed capacity {self.physical_capacity}"
                )
        self._resident_total += size - self._resident.get(lba, 0)
        self._blocks[lba] = data
        self._resident[lba] = size
        self._pending_trims.clear()

        self._counters["logical_bytes_written"] += BLOCK_SIZE
        self._counters["physical_bytes_written"] += size
        self._counters["block_writes"] += 1
        if self._trace is not None:
            self._trace.append(
                TraceEntry(len(self._trace), "write", lba, tag, empty_target, request)
            )
        if self._recorder is not None:
            self._recorder(tag, BLOCK_SIZE, size)

    def _next_request(self) -> int:
        self._request_seq += 1
        return self._request_seq

    # -- block I/O ---------------------------------------------------------

    def write_block(self, lba: int, data: bytes, tag: object = None) -> None:
        """Write one 4KB block."""
        with self._lock:
            self._write_locked(lba, data, tag, self._next_request())

    def write_blocks(self, lba: int, data: bytes, tag: object = None) -> None:
        """Write a contiguous run of blocks as one request, low LBA first."""
        if len(data) % BLOCK_SIZE:
            raise ValueError("multi-block write must be a multiple of the block size")
        with self._lock:
            request = self._next_request()
            for i in range(len(data) // BLOCK_SIZE):
                chunk = data[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]
                self._write_locked(lba + i, chunk, tag, request)

    def read_block(self, lba: int) -> bytes:
        """Read one block; never-written and trimmed blocks read as zeros."""
        with self._lock:
            self._check_open()
            self._check_lba(lba)
            self._counters["logical_bytes_read"] += BLOCK_SIZE
            self._counters["block_reads"] += 1
            return self._blocks.get(lba, ZERO_BLOCK)

    def read_blocks(self, lba: int, count: int) -> bytes:
        """Read ``count`` contiguous blocks as a single request."""
        with self._lock:
            self._check_open()
            self._check_lba(lba)
            self._check_lba(lba + count - 1)
            self._counters["logical_bytes_read"] += BLOCK_SIZE * count
            self._counters["block_reads"] += count
            return b"".join(self._blocks.get(lba + i, ZERO_BLOCK) for i in range(count))

    def trim(self, lba: int, tag: object = None) -> None:
        """Discard a block's content and free its resident bytes."""
        with self._lock:
            self._check_open()
            self._check_lba(lba)
            if lba in self._blocks:
                self._pending_trims.append((lba, self._blocks[lba], self._resident[lba]))
                self._drop(lba)
            self._counters["trims_issued"] += 1
            if self._trace is not None:
                self._trace.append(
                    TraceEntry(len(self._trace), "trim", lba, tag, False, self._next_request())
                )

    def trim_range(self, lba: int, count: int, tag: object = None) -> None:
        """Trim ``count`` contiguous blocks."""
        with self._lock:
            for i in range(count):
                self.trim(lba + i, tag)

    # -- accounting --------------------------------------------------------

    def stats(self) -> DeviceStats:
        """Snapshot of all counters."""
        with self._lock:
            return DeviceStats(physical_bytes_resident=self._resident_total, **self._counters)

    def resident_size(self, lba: int) -> int:
        """Resident compressed size of one block (0 when empty)."""
        with self._lock:
            return self._resident.get(lba, 0)

    def resident_bytes_in(self, lba: int, count: int) -> int:
        """Resident bytes across a contiguous LBA range."""
        with self._lock:
            if count > len(self._resident):
                return sum(size for addr, size in self._resident.items() if lba <= addr < lba + count)
            return sum(self._resident.get(lba + i, 0) for i in range(count))

    def attach_recorder(self, recorder: Optional[WriteRecorder]) -> None:
        """Route (tag, logical, physical) of each completed write to ``recorder``."""
        with self._lock:
            self._recorder = recorder

    # -- fault injection ---------------------------------------------------

    @property
    def io_lock(self) -> threading.RLock:
        """Held to take counter snapshots no write can interleave with."""
        return self._lock

    @property
    def crashed(self) -> bool:
        return self._crashed

    def inject_crash(self, plan: FaultPlan) -> None:
        """Arm a crash; with no write count the device crashes now."""
        with self._lock:
            self._check_open()
            self._plan = plan
            if plan.crash_after_n_block_writes is None:
                self._enter_crashed()
            else:
                self._writes_before_cut = plan.crash_after_n_block_writes

    def crash_now(self, suppress_pending_trims: bool = False) -> None:
        """Crash immediately."""
        self.inject_crash(FaultPlan(suppress_pending_trims=suppress_pending_trims))

    def reopen(self) -> None:
        """Leave the crashed state exposing exactly the surviving blocks."""
        with self._lock:
            self._crashed = False
            self._plan = None
            self._writes_before_cut = None
            self._pending_trims.clear()

    # -- tracing -----------------------------------------------------------

    def start_trace(self) -> None:
        with self._lock:
            self._trace = []

    def stop_trace(self) -> List[TraceEntry]:
        with self._lock:
            trace, self._trace = self._trace or [], None
            return trace

    def written_lbas(self) -> Set[int]:
        with self._lock:
            return set(self._blocks)

    # -- file-backed image -------------------------------------------------

    def save_image(self, path: str) -> None:
        """Write the block image and its stats sidecar atomically."""
        with self._lock:
            capacity = self.physical_capacity or 0
            with atomic_writer(path, binary=True) as f:
                header = IMAGE_HEADER.pack(
                    IMAGE_MAGIC, self.logical_blocks, self.codec.codec_id, capacity, len(self._blocks)
                )
                f.write(header.ljust(BLOCK_SIZE, b"\0"))
                for lba in sorted(self._blocks):
                    f.write(IMAGE_RECORD.pack(lba))
                    f.write(self._blocks[lba])
            stats = self.stats()
            write_kv_file(path + ".stats", {k: v for k, v in stats.__dict__.items()})
        logger.info("saved device image %s (%d blocks resident)", path, len(self._blocks))

    @classmethod
    def load_image(cls, path: str, recorder: Optional[WriteRecorder] = None) -> "CompressedBlockDevice":
        """Rebuild a device from an image written by ``save_image``."""
        with open(path, "rb") as f:
            header = f.read(BLOCK_SIZE)
            magic, blocks, codec_id, capacity, count = IMAGE_HEADER.unpack_from(header)
            if magic != IMAGE_MAGIC:
                raise ValueError(f"{path}: not a device image")
            try:
                codec = _CODECS_BY_ID[codec_id]()
            except KeyError:
                raise ValueError(f"{path}: unknown codec id {codec_id}") from None
            device = cls(blocks, capacity or None, codec, recorder)
            for _ in range(count):
                (lba,) = IMAGE_RECORD.unpack(f.read(IMAGE_RECORD.size))
                device._store(lba, f.read(BLOCK_SIZE))

        sidecar = path + ".stats"
        if os.path.exists(sidecar):
            saved = read_kv_file(sidecar)
            for key in device._counters:
                if key in saved:
                    device._counters[key] = int(saved[key])
        logger.info("loaded device image %s (%d blocks resident)", path, count)
        return device
