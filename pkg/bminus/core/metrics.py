"""Write-traffic attribution and write-amplification reports."""

import logging
import threading
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, Optional

from .errors import UndefinedWAError, UntaggedWriteError

logger = logging.getLogger(__name__)


class WriteCategory(str, Enum):
    """The three classes of storage write traffic."""
    LOG = "log"
    PG = "pg"
    E = "e"


@dataclass(frozen=True)
class WriteTag:
    category: WriteCategory
    issuer: str


def _zeroed() -> Dict[WriteCategory, int]:
    return {c: 0 for c in WriteCategory}


@dataclass(frozen=True)
class AccountingSnapshot:
    user_bytes: int
    logical: Dict[WriteCategory, int]
    physical: Dict[WriteCategory, int]


@dataclass(frozen=True)
class WAReport:
    """Per-category volumes over a window, with derived WA and α terms."""

    w_usr: int
    logical: Dict[WriteCategory, int]
    physical: Dict[WriteCategory, int]

    def wa(self, category: WriteCategory) -> float:
        return self.logical[category] / self.w_usr

    def alpha(self, category: WriteCategory) -> float:
        written = self.logical[category]
        return self.physical[category] / written if written else 0.0

    @property
    def wa_total(self) -> float:
        return sum(self.alpha(c) * self.wa(c) for c in WriteCategory)

    @property
    def physical_wa(self) -> float:
        return sum(self.physical.values()) / self.w_usr

    @property
    def logical_wa(self) -> float:
        return sum(self.logical.values()) / self.w_usr

    def physical_wa_of(self, category: WriteCategory) -> float:
        return self.physical[category] / self.w_usr

    def as_row(self) -> Dict[str, float]:
        row: Dict[str, float] = {"w_usr": self.w_usr}
        for c in WriteCategory:
            row[f"w_{c.value}"] = self.logical[c]
            row[f"p_{c.value}"] = self.physical[c]
            row[f"wa_{c.value}"] = round(self.wa(c), 6)
            row[f"alpha_{c.value}"] = round(self.alpha(c), 6)
        row["wa_total"] = round(self.wa_total, 6)
        return row


class WriteAccounting:
    """Thread-safe byte counters keyed by write category.

    Attached to a device as its recorder so every completed block write
    lands in exactly one category.
    """

    def __init__(self, strict: bool = __debug__):
        self.strict = strict
        self._lock = threading.Lock()
        self._user_bytes = 0
        self._logical = _zeroed()
        self._physical = _zeroed()
        self._by_issuer: Dict[str, int] = {}

    def record_write(self, tag: Optional[WriteTag], logical: int, physical: int) -> None:
        if not isinstance(tag, WriteTag):
            if self.strict:
                raise UntaggedWriteError(f"write of {logical} bytes without a category tag")
            return
        with self._lock:
            self._logical[tag.category] += logical
            self._physical[tag.category] += physical
            self._by_issuer[tag.issuer] = self._by_issuer.get(tag.issuer, 0) + physical

    __call__ = record_write

    def add_user_bytes(self, count: int) -> None:
        with self._lock:
            self._user_bytes += count

    def snapshot(self) -> AccountingSnapshot:
        with self._lock:
            return AccountingSnapshot(self._user_bytes, dict(self._logical), dict(self._physical))

    def physical_by_issuer(self) -> Dict[str, int]:
        with self._lock:
            return dict(self._by_issuer)

    def report(self, since: Optional[AccountingSnapshot] = None,
               until: Optional[AccountingSnapshot] = None) -> WAReport:
        """WA decomposition over the window from ``since`` to ``until`` (default: now)."""
        now = until or self.snapshot()
        base = since or AccountingSnapshot(0, _zeroed(), _zeroed())
        w_usr = now.user_bytes - base.user_bytes
        if w_usr <= 0:
            raise UndefinedWAError("no user bytes written in the measurement window")
        return WAReport(
            w_usr=w_usr,
            logical={c: now.logical[c] - base.logical[c] for c in WriteCategory},
            physical={c: now.physical[c] - base.physical[c] for c in WriteCategory},
        )


@dataclass(frozen=True)
class StorageOverheadReport:
    pages: int
    page_size: int
    delta_bytes: int
    delta_resident_bytes: int
    logical_footprint: int
    physical_footprint: int

    @property
    def beta(self) -> float:
        """Mean logical modlog payload per page, relative to the page size."""
        if not self.pages:
            return 0.0
        return self.delta_bytes / (self.pages * self.page_size)

    @property
    def beta_compressed(self) -> float:
        """Same ratio using device-resident modlog bytes."""
        if not self.pages:
            return 0.0
        return self.delta_resident_bytes / (self.pages * self.page_size)

    @property
    def footprint_ratio(self) -> float:
        if not self.logical_footprint:
            return 0.0
        return self.physical_footprint / self.logical_footprint

    def as_row(self) -> Dict[str, float]:
        return {
            "pages": self.pages,
            "page_size": self.page_size,
            "delta_bytes": self.delta_bytes,
            "beta": round(self.beta, 6),
            "beta_compressed": round(self.beta_compressed, 6),
            "logical_footprint": self.logical_footprint,
            "physical_footprint": self.physical_footprint,
        }


def beta_scan(engine) -> StorageOverheadReport:
    """Scan every page region's modlog block of a quiesced engine."""
    from .modlog import DeltaBlock

    store = engine.page_store
    device = engine.device
    pages = engine.page_count
    delta_bytes = 0
    delta_resident = 0
    for page_id in range(pages):
        lba = store.modlog_lba(page_id)
        if lba is None:
            continue
        resident = device.resident_size(lba)
        if not resident:
            continue
        block = DeltaBlock.decode(device.read_block(lba))
        if block is not None and block.page_id == page_id:
            delta_bytes += len(block.payload)
            delta_resident += resident

    report = StorageOverheadReport(
        pages=pages,
        page_size=engine.config.page_size,
        delta_bytes=delta_bytes,
        delta_resident_bytes=delta_resident,
        logical_footprint=store.logical_footprint(pages) + engine.redo_log.region_bytes,
        physical_footprint=device.stats().physical_bytes_resident,
    )
    logger.info("beta scan over %d pages: beta=%.4f", pages, report.beta)
    return report


@dataclass
class RecoveryCounters:
    """What recovery had to do; used to prove crash classes were exercised."""

    torn_slots: int = 0
    lsn_resolved: int = 0
    fresh_pages: int = 0
    modlog_applied: int = 0
    modlog_stale: int = 0
    modlog_corrupt: int = 0
    torn_log_blocks: int = 0
    replayed_records: int = 0
    journal_restores: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, count: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + count)

    def as_dict(self) -> Dict[str, int]:
        with self._lock:
            return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}

    def merge(self, other: "RecoveryCounters") -> None:
        for name, value in other.as_dict().items():
            self.bump(name, value)
