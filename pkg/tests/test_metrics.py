"""Tests for write accounting, WA decomposition and storage overhead."""

import pytest

from bminus.core.errors import UndefinedWAError, UntaggedWriteError
from bminus.core.metrics import (
    RecoveryCounters,
    StorageOverheadReport,
    WriteAccounting,
    WriteCategory,
    WriteTag,
    beta_scan,
)
from conftest import key

LOG = WriteTag(WriteCategory.LOG, "redo")
PG = WriteTag(WriteCategory.PG, "slot")
E = WriteTag(WriteCategory.E, "page-table")


class TestWriteAccounting:
    """Test per-category counters and reports."""

    def test_wa_total_sums_categories(self):
        """Should add physical bytes of every category over user bytes."""
        accounting = WriteAccounting()
        accounting.add_user_bytes(100)
        accounting(LOG, 4096, 50)
        accounting(PG, 8192, 100)
        report = accounting.report()
        assert report.wa_total == pytest.approx(1.5)
        assert report.physical_wa == pytest.approx(1.5)
        assert report.wa(WriteCategory.PG) == pytest.approx(81.92)
        assert report.alpha(WriteCategory.LOG) == pytest.approx(50 / 4096)
        assert report.alpha(WriteCategory.E) == 0.0

    def test_report_window(self):
        """Should report only what happened after the snapshot."""
        accounting = WriteAccounting()
        accounting.add_user_bytes(10)
        accounting(PG, 4096, 400)
        since = accounting.snapshot()
        accounting.add_user_bytes(20)
        accounting(E, 4096, 60)
        report = accounting.report(since)
        assert report.w_usr == 20
        assert report.physical[WriteCategory.PG] == 0
        assert report.physical_wa_of(WriteCategory.E) == pytest.approx(3.0)

    def test_report_window_end(self):
        """Should ignore writes recorded after the closing snapshot."""
        accounting = WriteAccounting()
        since = accounting.snapshot()
        accounting.add_user_bytes(10)
        accounting(LOG, 4096, 100)
        until = accounting.snapshot()
        accounting(PG, 8192, 500)
        report = accounting.report(since, until)
        assert report.physical[WriteCategory.LOG] == 100
        assert report.physical[WriteCategory.PG] == 0
        assert report.physical_wa == pytest.approx(10.0)

    def test_undefined_without_user_bytes(self):
        """Should refuse a report for a window with no user writes."""
        accounting = WriteAccounting()
        accounting(LOG, 4096, 10)
        with pytest.raises(UndefinedWAError):
            accounting.report()

    def test_untagged_write(self):
        """Should raise in strict mode and ignore the write otherwise."""
        with pytest.raises(UntaggedWriteError):
            WriteAccounting(strict=True)(None, 4096, 10)
        lenient = WriteAccounting(strict=False)
        lenient(None, 4096, 10)
        assert sum(lenient.snapshot().physical.values()) == 0

    def test_by_issuer(self):
        """Should split physical bytes by the issuing component."""
        accounting = WriteAccounting()
        accounting(PG, 4096, 10)
        accounting(E, 4096, 5)
        assert accounting.physical_by_issuer() == {"slot": 10, "page-table": 5}

    def test_row_columns(self):
        """Should name row columns after the categories."""
        accounting = WriteAccounting()
        accounting.add_user_bytes(1)
        row = accounting.report().as_row()
        assert {"w_usr", "w_log", "p_pg", "wa_e", "alpha_log", "wa_total"} <= set(row)


class TestStorageOverhead:
    """Test the delta-block overhead ratio."""

    def test_beta(self):
        """Should divide delta payload by total page bytes."""
        report = StorageOverheadReport(pages=2, page_size=8192, delta_bytes=1024,
                                       delta_resident_bytes=300, logical_footprint=1000,
                                       physical_footprint=250)
        assert report.beta == pytest.approx(0.0625)
        assert report.beta_compressed == pytest.approx(300 / 16384)
        assert report.footprint_ratio == pytest.approx(0.25)

    def test_empty(self):
        """Should report zero for an empty tree."""
        report = StorageOverheadReport(0, 8192, 0, 0, 0, 0)
        assert report.beta == report.beta_compressed == report.footprint_ratio == 0.0

    def test_scan_counts_live_delta_blocks(self, engine):
        """Should find the delta blocks a flush pass left behind."""
        with engine.transaction() as txn:
            for n in range(40):
                engine.put(txn, key(n), b"v" * 100)
        engine.flush_all()
        with engine.transaction() as txn:
            engine.put(txn, key(3), b"w" * 100)
        engine.flush_all()
        report = beta_scan(engine)
        assert report.pages == engine.page_count
        assert 0 < report.delta_bytes <= 2048
        assert report.beta == pytest.approx(report.delta_bytes / (report.pages * 8192))


class TestRecoveryCounters:
    """Test recovery counter bookkeeping."""

    def test_bump_and_merge(self):
        """Should add counters field by field."""
        a = RecoveryCounters()
        a.bump("torn_slots")
        a.bump("replayed_records", 5)
        b = RecoveryCounters(torn_slots=2, modlog_applied=1)
        a.merge(b)
        assert a.as_dict()["torn_slots"] == 3
        assert a.replayed_records == 5
        assert a.modlog_applied == 1
        assert "_lock" not in a.as_dict()
