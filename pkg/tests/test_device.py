"""Tests for the simulated compressing block device."""

import pytest

from bminus.core.device import (
    BLOCK_SIZE,
    ZERO_BLOCK,
    CompressedBlockDevice,
    DeflateCodec,
    FaultPlan,
    ZeroRunCodec,
    make_codec,
)
from bminus.core.errors import (
    AddressOutOfRangeError,
    DeviceCrashedError,
    DeviceFullError,
    UntaggedWriteError,
)
from bminus.core.metrics import WriteAccounting, WriteCategory, WriteTag

TAG = WriteTag(WriteCategory.PG, "slot")


def block(fill: bytes, length: int = BLOCK_SIZE) -> bytes:
    return (fill * length)[:length].ljust(BLOCK_SIZE, b"\0")


class TestCodecs:
    """Test the per-block codecs."""

    def test_zero_run_empty_block(self):
        """Should store an all-zero block in two bytes."""
        assert ZeroRunCodec().compressed_size(ZERO_BLOCK) == 2

    def test_zero_run_counts_nonzero_runs(self):
        """Should charge each nonzero run its length plus four bytes."""
        data = b"\x01" * 10 + bytes(100) + b"\x02" * 5
        assert ZeroRunCodec().compressed_size(data.ljust(BLOCK_SIZE, b"\0")) == 2 + 14 + 9

    def test_zero_run_is_bounded(self):
        """Should never exceed the block plus its overhead."""
        data = bytes(i % 2 + 1 for i in range(BLOCK_SIZE))
        assert ZeroRunCodec().compressed_size(data) <= BLOCK_SIZE + ZeroRunCodec.overhead

    def test_deflate_shrinks_zero_padding(self):
        """Should store a mostly empty block in far less than 4KB."""
        assert DeflateCodec().compressed_size(block(b"abc", 100)) < 200

    def test_make_codec(self):
        """Should build codecs by name and reject unknown names."""
        assert isinstance(make_codec("deflate"), DeflateCodec)
        assert isinstance(make_codec("zero-run"), ZeroRunCodec)
        with pytest.raises(ValueError):
            make_codec("lz77")


class TestBlockIO:
    """Test reads, writes, trims and their counters."""

    def test_unwritten_block_reads_zero(self, device):
        """Should read never-written blocks as zeros."""
        assert device.read_block(5) == ZERO_BLOCK

    def test_write_then_read(self, device):
        """Should return exactly the written bytes."""
        data = block(b"x", 300)
        device.write_block(7, data, TAG)
        assert device.read_block(7) == data

    def test_counters(self, device):
        """Should count 4KB logical and compressed physical bytes per write."""
        device.write_block(0, block(b"\x01", 10), TAG)
        stats = device.stats()
        assert stats.logical_bytes_written == BLOCK_SIZE
        assert stats.physical_bytes_written == 2 + 4 + 10
        assert stats.physical_bytes_resident == 16
        assert stats.block_writes == 1

    def test_overwrite_replaces_resident_bytes(self, device):
        """Should charge resident bytes of the latest content only."""
        device.write_block(3, block(b"\x01", 100), TAG)
        device.write_block(3, block(b"\x01", 10), TAG)
        assert device.stats().physical_bytes_resident == 16
        assert device.stats().physical_bytes_written == 106 + 16

    def test_trim_frees_and_zeroes(self, device):
        """Should drop resident bytes and read the block back as zeros."""
        device.write_block(2, block(b"\x01", 10), TAG)
        device.trim(2, TAG)
        assert device.read_block(2) == ZERO_BLOCK
        assert device.stats().physical_bytes_resident == 0
        assert device.stats().trims_issued == 1

    def test_multi_block_write(self, device):
        """Should split a multi-block write into consecutive LBAs."""
        data = block(b"a", 100) + block(b"b", 100)
        device.write_blocks(10, data, TAG)
        assert device.read_blocks(10, 2) == data

    def test_out_of_range(self, device):
        """Should reject LBAs beyond the logical capacity."""
        with pytest.raises(AddressOutOfRangeError):
            device.write_block(device.logical_blocks, ZERO_BLOCK, TAG)
        with pytest.raises(AddressOutOfRangeError):
            device.read_block(-1)

    def test_wrong_size_write(self, device):
        """Should reject writes that are not exactly one block."""
        with pytest.raises(ValueError):
            device.write_block(0, b"short", TAG)

    def test_untagged_write_rejected(self):
        """Should refuse untagged writes when tags are required."""
        device = CompressedBlockDevice(8, codec=ZeroRunCodec(), require_tags=True)
        with pytest.raises(UntaggedWriteError):
            device.write_block(0, ZERO_BLOCK)

    def test_physical_capacity(self):
        """Should refuse writes whose resident bytes exceed the physical capacity."""
        device = CompressedBlockDevice(64, physical_capacity=100, codec=ZeroRunCodec())
        device.write_block(0, block(b"\x01", 50), TAG)
        with pytest.raises(DeviceFullError):
            device.write_block(1, block(b"\x01", 50), TAG)
        # Overwriting in place only counts the difference.
        device.write_block(0, block(b"\x01", 80), TAG)

    def test_recorder_receives_every_write(self):
        """Should report each completed write to the attached recorder."""
        accounting = WriteAccounting()
        device = CompressedBlockDevice(8, codec=ZeroRunCodec(), recorder=accounting)
        device.write_block(0, block(b"\x01", 10), TAG)
        snap = accounting.snapshot()
        assert snap.logical[WriteCategory.PG] == BLOCK_SIZE
        assert snap.physical[WriteCategory.PG] == 16


class TestFaultInjection:
    """Test crash plans, torn writes and reverted trims."""

    def test_crash_after_n_writes(self, device):
        """Should complete n writes and fail the next."""
        device.inject_crash(FaultPlan(crash_after_n_block_writes=2))
        device.write_block(0, block(b"a", 10), TAG)
        device.write_block(1, block(b"b", 10), TAG)
        with pytest.raises(DeviceCrashedError):
            device.write_block(2, block(b"c", 10), TAG)
        assert device.crashed
        with pytest.raises(DeviceCrashedError):
            device.read_block(0)
        device.reopen()
        assert device.read_block(1) == block(b"b", 10)
        assert device.read_block(2) == ZERO_BLOCK

    def test_torn_write_to_empty_block(self, device):
        """Should keep the first fraction of a cut write to an empty block."""
        device.inject_crash(FaultPlan(crash_after_n_block_writes=0, partial_write_fraction=0.5))
        data = block(b"\x07")
        with pytest.raises(DeviceCrashedError):
            device.write_block(4, data, TAG)
        device.reopen()
        survived = device.read_block(4)
        assert survived[:BLOCK_SIZE // 2] == data[:BLOCK_SIZE // 2]
        assert survived[BLOCK_SIZE // 2:] == ZERO_BLOCK[BLOCK_SIZE // 2:]

    def test_overwrite_is_atomic_by_default(self, device):
        """Should drop a cut overwrite entirely when overwrites are atomic."""
        old = block(b"\x01")
        device.write_block(4, old, TAG)
        device.inject_crash(FaultPlan(crash_after_n_block_writes=0, partial_write_fraction=0.5))
        with pytest.raises(DeviceCrashedError):
            device.write_block(4, block(b"\x02"), TAG)
        device.reopen()
        assert device.read_block(4) == old

    def test_non_atomic_overwrite_tears(self, device):
        """Should mix new and old bytes when overwrites are not atomic."""
        device.write_block(4, block(b"\x01"), TAG)
        device.inject_crash(FaultPlan(crash_after_n_block_writes=0, partial_write_fraction=0.25,
                                      atomic_overwrites=False))
        with pytest.raises(DeviceCrashedError):
            device.write_block(4, block(b"\x02"), TAG)
        device.reopen()
        survived = device.read_block(4)
        assert survived[:1024] == b"\x02" * 1024
        assert survived[1024:] == b"\x01" * (BLOCK_SIZE - 1024)

    def test_suppressed_trims_are_reverted(self, device):
        """Should restore blocks trimmed after the last completed write."""
        data = block(b"\x05", 64)
        device.write_block(9, data, TAG)
        device.trim(9, TAG)
        device.crash_now(suppress_pending_trims=True)
        device.reopen()
        assert device.read_block(9) == data

    def test_trims_before_a_write_are_durable(self, device):
        """Should keep trims that a later completed write has ordered."""
        device.write_block(9, block(b"\x05", 64), TAG)
        device.trim(9, TAG)
        device.write_block(10, block(b"\x06", 64), TAG)
        device.crash_now(suppress_pending_trims=True)
        device.reopen()
        assert device.read_block(9) == ZERO_BLOCK

    def test_fault_plan_validation(self):
        """Should reject negative counts and fractions outside (0, 1)."""
        with pytest.raises(ValueError):
            FaultPlan(crash_after_n_block_writes=-1)
        with pytest.raises(ValueError):
            FaultPlan(partial_write_fraction=1.0)


class TestTraceAndImage:
    """Test write tracing and file-backed images."""

    def test_trace_records_writes_and_trims(self, device):
        """Should record ops in order with their tags and tearability."""
        device.write_block(0, block(b"\x01", 8), TAG)
        device.start_trace()
        device.write_block(0, block(b"\x02", 8), TAG)
        device.write_block(1, block(b"\x03", 8), TAG)
        device.trim(0, TAG)
        trace = device.stop_trace()
        assert [e.op for e in trace] == ["write", "write", "trim"]
        assert [e.tearable for e in trace] == [False, True, False]
        assert all(e.tag is TAG for e in trace)

    def test_save_and_load_image(self, device, tmp_path):
        """Should reproduce blocks, codec and counters from a saved image."""
        device.write_block(3, block(b"\x01", 100), TAG)
        device.write_block(17, block(b"\x02", 50), TAG)
        path = str(tmp_path / "dev.img")
        device.save_image(path)

        loaded = CompressedBlockDevice.load_image(path)
        assert loaded.logical_blocks == device.logical_blocks
        assert isinstance(loaded.codec, ZeroRunCodec)
        assert loaded.read_block(3) == device.read_block(3)
        assert loaded.read_block(17) == device.read_block(17)
        assert loaded.stats() == device.stats()

    def test_load_rejects_foreign_file(self, tmp_path):
        """Should refuse files that are not device images."""
        path = tmp_path / "junk.img"
        path.write_bytes(bytes(BLOCK_SIZE))
        with pytest.raises(ValueError):
            CompressedBlockDevice.load_image(str(path))
