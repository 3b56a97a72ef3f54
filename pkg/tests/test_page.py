"""Tests for the slotted page format, segment tracking and deltas."""

import random

import pytest

from bminus.core.errors import GeometryMismatchError, PageOverflowError, SegmentRangeError
from bminus.core.page import (
    CHILD,
    HEADER_SIZE,
    NO_PAGE,
    SLOT_SIZE,
    TRAILER_SIZE,
    PageImage,
    SegmentTracker,
    apply_delta,
    extract_delta,
    image_lsn,
    image_page_id,
    is_intact,
    max_record_bytes,
    records_per_page,
    verify_checksum,
)

PAGE = 8192
SEG = 128


def key(n: int) -> bytes:
    return n.to_bytes(8, "big")


def filled_page(count: int, value_size: int = 24) -> PageImage:
    page = PageImage.empty(3, PAGE, 0, SegmentTracker(PAGE, SEG))
    for n in range(count):
        page.insert_at(n, key(n), bytes([n % 251 + 1]) * value_size)
    return page


class TestLayout:
    """Test the fixed page geometry."""

    def test_header_and_trailer_sizes(self):
        """Should use a 48-byte header, 16-byte trailer and 6-byte slots."""
        assert HEADER_SIZE == 48
        assert TRAILER_SIZE == 16
        assert SLOT_SIZE == 6

    def test_record_limits(self):
        """Should leave room for at least three maximum records."""
        assert 3 * (max_record_bytes(PAGE) + SLOT_SIZE) <= PAGE - HEADER_SIZE - TRAILER_SIZE
        assert records_per_page(PAGE, 128) == (PAGE - 64) // 134


class TestSegmentTracker:
    """Test the k-bit modified-segment vector."""

    def test_segment_count(self):
        """Should round the segment count up."""
        assert SegmentTracker(8192, 128).k == 64
        assert SegmentTracker(8192, 3000).k == 3

    def test_mark_dirty_spans_segments(self):
        """Should set every segment the byte range touches."""
        tracker = SegmentTracker(PAGE, SEG)
        tracker.mark_dirty(120, 10)
        assert list(tracker.set_segments()) == [0, 1]
        assert tracker.delta_size() == 256

    def test_zero_length_is_noop(self):
        """Should ignore empty ranges."""
        tracker = SegmentTracker(PAGE, SEG)
        tracker.mark_dirty(500, 0)
        assert tracker.is_clean()

    def test_range_outside_page(self):
        """Should reject ranges past the page end."""
        with pytest.raises(SegmentRangeError):
            SegmentTracker(PAGE, SEG).mark_dirty(PAGE - 4, 8)

    def test_runs_merge_adjacent_segments(self):
        """Should coalesce neighbouring set segments into one byte range."""
        tracker = SegmentTracker(PAGE, SEG)
        tracker.mark_dirty(0, 1)
        tracker.mark_dirty(128, 1)
        tracker.mark_dirty(1024, 1)
        assert list(tracker.runs()) == [(0, 256), (1024, 1152)]

    def test_short_last_segment(self):
        """Should count the short last segment at its real length."""
        tracker = SegmentTracker(8192, 3000)
        tracker.mark_dirty(8191, 1)
        assert tracker.delta_size() == 8192 - 6000

    def test_mark_all_and_clear(self):
        """Should cover the whole page after mark_all and nothing after clear."""
        tracker = SegmentTracker(PAGE, SEG)
        tracker.mark_all()
        assert tracker.delta_size() == PAGE
        tracker.clear()
        assert tracker.delta_size() == 0

    def test_from_bytes_rejects_extra_bits(self):
        """Should refuse a serialized vector with bits beyond k."""
        assert SegmentTracker.from_bytes(8192, 3000, b"\x05").bits == 5
        with pytest.raises(GeometryMismatchError):
            SegmentTracker.from_bytes(8192, 3000, b"\x08")


class TestPageImage:
    """Test record operations on a slotted page."""

    def test_empty_page(self):
        """Should start with no records and an intact image."""
        page = PageImage.empty(9, PAGE, level=1)
        assert page.page_id == 9
        assert page.level == 1
        assert not page.is_leaf
        assert page.record_count == 0
        assert page.right_sibling == NO_PAGE
        assert is_intact(page.serialize())

    def test_insert_keeps_key_order(self):
        """Should return records in slot order regardless of insert order."""
        page = PageImage.empty(1, PAGE)
        for n in (5, 1, 3):
            i, found = page.search(key(n))
            assert not found
            page.insert_at(i, key(n), b"v%d" % n)
        assert page.keys() == [key(1), key(3), key(5)]
        assert page.search(key(3)) == (1, True)
        assert page.value_at(2) == b"v5"

    def test_update_grows_value(self):
        """Should relocate a value that grows."""
        page = filled_page(10)
        page.update_at(4, b"z" * 300)
        assert page.value_at(4) == b"z" * 300
        assert page.value_at(5) == bytes([6]) * 24

    def test_update_same_size_in_place(self):
        """Should dirty only the segments holding the value."""
        page = filled_page(10)
        page.tracker.clear()
        page.update_at(0, b"q" * 24)
        assert 0 < page.tracker.delta_size() <= 2 * SEG

    def test_delete_and_compaction(self):
        """Should reuse space freed by deletes once the heap is exhausted."""
        page = filled_page(0)
        n = 0
        while page.has_room(8, 200):
            page.insert_at(page.record_count, key(n), b"a" * 200)
            n += 1
        for i in range(page.record_count - 1, -1, -2):
            page.delete_at(i)
        assert page.has_room(8, 200)
        i, _ = page.search(key(10_000))
        page.insert_at(i, key(10_000), b"b" * 200)
        assert page.value_at(page.record_count - 1) == b"b" * 200

    def test_overflow(self):
        """Should raise when a record cannot fit."""
        page = filled_page(0)
        with pytest.raises(PageOverflowError):
            while True:
                page.insert_at(page.record_count, key(page.record_count), b"a" * 1000)

    def test_lsn_updates_header_and_trailer(self):
        """Should keep header and trailer LSNs equal."""
        page = PageImage.empty(1, PAGE)
        page.lsn = 77
        image = page.serialize()
        assert image_lsn(image) == 77
        assert image_page_id(image) == 1
        assert is_intact(image)

    def test_checksum_detects_corruption(self):
        """Should fail verification after any flipped byte."""
        image = bytearray(filled_page(5).serialize())
        image[PAGE // 2] ^= 0xFF
        assert not verify_checksum(bytes(image))
        assert not is_intact(bytes(image))

    def test_truncate_from(self):
        """Should drop the tail records."""
        page = filled_page(10)
        page.truncate_from(4)
        assert page.record_count == 4
        assert page.keys()[-1] == key(3)

    def test_internal_child_routing(self):
        """Should route keys below the first separator to the leftmost child."""
        page = PageImage.empty(1, PAGE, level=1)
        page.leftmost_child = 10
        page.insert_at(0, key(100), CHILD.pack(11))
        page.insert_at(1, key(200), CHILD.pack(12))
        assert page.child_for(key(5)) == 10
        assert page.child_for(key(100)) == 11
        assert page.child_for(key(150)) == 11
        assert page.child_for(key(999)) == 12
        assert page.child_index_for(key(5)) == -1


class TestDelta:
    """Test delta extraction and application."""

    def test_delta_reproduces_page(self):
        """Should rebuild the new image from the old one plus the delta."""
        page = filled_page(20)
        base = page.serialize()
        page.tracker.clear()
        page.update_at(3, b"w" * 24)
        page.lsn = 50
        new = page.serialize()
        delta = extract_delta(new, page.tracker)
        assert delta.size == page.tracker.delta_size()
        assert apply_delta(base, delta) == new

    def test_apply_rejects_wrong_geometry(self):
        """Should refuse a delta for another page size."""
        page = filled_page(2)
        page.tracker.mark_all()
        delta = extract_delta(page.serialize(), page.tracker)
        with pytest.raises(GeometryMismatchError):
            apply_delta(bytes(16384), delta)

    def test_random_mutations_round_trip(self):
        """Should rebuild every randomly mutated image byte-exact from base plus delta."""
        rng = random.Random(11)
        for _ in range(10_000):
            page_size = rng.choice((8192, 16384))
            tracker = SegmentTracker(page_size, rng.choice((64, 128, 256)))
            base = rng.randbytes(page_size)
            mem = bytearray(base)
            for _ in range(rng.randrange(1, 12)):
                offset = rng.randrange(page_size)
                length = rng.randrange(1, min(600, page_size - offset) + 1)
                mem[offset:offset + length] = rng.randbytes(length)
                tracker.mark_dirty(offset, length)
            assert apply_delta(base, extract_delta(mem, tracker)) == bytes(mem)
