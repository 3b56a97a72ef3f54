"""Tests for result CSVs and text tables."""

import csv

import pytest

from bminus.bench.report import RUN_COLUMNS, emit, render_table, report
from bminus.utils.data_storage import ResultTable, read_kv_file, write_kv_file


ROWS = [
    {"label": "a", "mode": "bminus", "physical_wa": 1.25, "throughput": 100.0},
    {"label": "b", "mode": "baseline", "physical_wa": 3.5, "throughput": 80.0},
]


class TestRenderTable:
    """Test text rendering."""

    def test_columns_present_in_rows(self):
        """Should show only requested columns the rows carry."""
        text = render_table(ROWS, ["label", "physical_wa", "absent"])
        header = text.splitlines()[0]
        assert "label" in header and "physical_wa" in header
        assert "absent" not in header
        assert "1.2500" in text

    def test_no_rows(self):
        """Should render a placeholder for no rows."""
        assert render_table([]) == "(no rows)"


class TestEmit:
    """Test writing result files."""

    def test_one_row(self, tmp_path):
        """Should write a header line and one data line plus a text table."""
        csv_path, text_path = emit(ROWS[:1], str(tmp_path), "run")
        with open(csv_path, newline="") as f:
            lines = f.read().splitlines()
        assert len(lines) == 2
        assert lines[0].split(",") == RUN_COLUMNS
        assert "bminus" in open(text_path).read()

    def test_no_rows(self, tmp_path):
        """Should refuse to emit nothing."""
        with pytest.raises(ValueError):
            emit([], str(tmp_path))

    def test_report_reads_back(self, tmp_path):
        """Should render an emitted CSV with the summary columns."""
        csv_path, _ = emit(ROWS, str(tmp_path), "matrix")
        text = report(csv_path)
        assert "baseline" in text
        assert "wall_time" not in text.splitlines()[0]

    def test_rewrite_keeps_backup(self, tmp_path):
        """Should keep the previous CSV as a backup when replacing it."""
        table = ResultTable(str(tmp_path / "r.csv"), ["label"])
        table.save([{"label": "first"}])
        table.save([{"label": "second"}])
        with open(table.backup_file, newline="") as f:
            assert [r["label"] for r in csv.DictReader(f)] == ["first"]
        assert table.load() == [{"label": "second"}]


class TestKvFiles:
    """Test key=value sidecar files."""

    def test_roundtrip_with_comments(self, tmp_path):
        """Should ignore comments and blank lines."""
        path = str(tmp_path / "x.stats")
        write_kv_file(path, {"a": 1, "b": "two"})
        with open(path, "a") as f:
            f.write("\n# note\n")
        assert read_kv_file(path) == {"a": "1", "b": "two"}

    def test_malformed(self, tmp_path):
        """Should reject a line without an equals sign."""
        path = tmp_path / "bad"
        path.write_text("nonsense\n")
        with pytest.raises(ValueError):
            read_kv_file(str(path))
