"""Tests for page regions, slot resolution, superblocks and the page stores."""

import pytest

from bminus.core.device import BLOCK_SIZE, ZERO_BLOCK, CompressedBlockDevice, FaultPlan, ZeroRunCodec
from bminus.core.errors import (
    CapacityError,
    ConfigMismatchError,
    DeviceCrashedError,
    UnrecoverablePageError,
)
from bminus.core.metrics import RecoveryCounters
from bminus.core.page import PageImage
from bminus.core.shadow import (
    DATA_START_LBA,
    SUPERBLOCK_LBAS,
    DeterministicShadowStore,
    JournaledStore,
    MappedShadowStore,
    SlotDirectory,
    Superblock,
    SuperblockStore,
    allocate_region,
    make_page_store,
    region_stride,
    resolve_valid_slot,
)

PAGE = 8192
SEG = 128


def image(page_id: int, lsn: int, fill: int = 1) -> bytes:
    page = PageImage.empty(page_id, PAGE)
    page.insert_at(0, b"k" * 8, bytes([fill]) * 32)
    page.lsn = lsn
    return page.serialize()


def torn(data: bytes) -> bytes:
    return data[:BLOCK_SIZE] + bytes(len(data) - BLOCK_SIZE)


@pytest.fixture
def device():
    return CompressedBlockDevice(2048, codec=ZeroRunCodec())


def superblock(**overrides) -> Superblock:
    values = dict(root=0, next_page_id=1, checkpoint_lsn=5, next_lsn=6, log_head=0,
                  page_size=PAGE, segment_size=SEG, mode="bminus", log_mode="sparse", created=1.0)
    values.update(overrides)
    return Superblock(**values)


class TestRegions:
    """Test the deterministic page-to-LBA mapping."""

    def test_stride(self):
        """Should reserve two page slots and one delta block per page."""
        assert region_stride(8192) == 5
        assert region_stride(16384) == 9

    def test_region_layout(self):
        """Should place slot 0, slot 1 and the delta block back to back."""
        region = allocate_region(3, 8192, base_lba=2)
        assert region.slot0_lba == 2 + 15
        assert region.slot1_lba == 2 + 17
        assert region.modlog_lba == 2 + 19
        assert region.block_count == 5
        assert region.slot_lba(1) == region.slot1_lba

    def test_regions_do_not_overlap(self):
        """Should give consecutive pages disjoint LBA ranges."""
        a = allocate_region(0, 16384)
        b = allocate_region(1, 16384)
        assert a.first_lba + a.block_count == b.first_lba

    def test_beyond_capacity(self):
        """Should refuse pages past the device's page count."""
        with pytest.raises(CapacityError):
            allocate_region(10, 8192, max_pages=10)


class TestSlotDirectory:
    """Test the in-memory valid-slot bits."""

    def test_unknown_until_set(self):
        """Should report unknown pages as None."""
        directory = SlotDirectory(20)
        assert directory.get(17) is None
        directory.set(17, 1)
        assert directory.get(17) == 1
        directory.set(17, 0)
        assert directory.get(17) == 0
        directory.forget_all()
        assert not directory.is_known(17)


class TestResolveValidSlot:
    """Test choosing between two slot images."""

    def test_higher_lsn_wins(self):
        """Should choose the intact slot with the higher LSN."""
        resolution = resolve_valid_slot(image(1, 5), image(1, 9), 1)
        assert resolution.slot == 1
        assert resolution.lsn_resolved

    def test_tie_goes_to_slot_zero(self):
        """Should break LSN ties toward slot 0."""
        assert resolve_valid_slot(image(1, 5), image(1, 5, fill=2), 1).slot == 0

    def test_torn_newer_slot_loses(self):
        """Should fall back to the older intact slot when the newer is torn."""
        resolution = resolve_valid_slot(image(1, 5), torn(image(1, 9)), 1)
        assert resolution.slot == 0
        assert resolution.torn == 1

    def test_zero_slot_loses(self):
        """Should treat an all-zero slot as invalid."""
        assert resolve_valid_slot(bytes(PAGE), image(1, 3), 1).slot == 1

    def test_nothing_intact(self):
        """Should raise when neither slot is intact."""
        with pytest.raises(UnrecoverablePageError):
            resolve_valid_slot(torn(image(1, 5)), bytes(PAGE), 1)


class TestSuperblockStore:
    """Test the double-slot superblock."""

    def test_unformatted(self, device):
        """Should read None from a blank device."""
        assert SuperblockStore(device).read() is None

    def test_write_alternates_slots(self, device):
        """Should alternate slots and trim the previous one."""
        store = SuperblockStore(device)
        store.write(superblock(checkpoint_lsn=5))
        store.write(superblock(checkpoint_lsn=8))
        assert device.read_block(SUPERBLOCK_LBAS[0]) == ZERO_BLOCK
        assert SuperblockStore(device).read().checkpoint_lsn == 8

    def test_newest_generation_wins(self, device):
        """Should prefer the higher generation when both slots survive."""
        store = SuperblockStore(device)
        store.write(superblock(checkpoint_lsn=5))
        store.write(superblock(checkpoint_lsn=8))
        device.crash_now(suppress_pending_trims=True)
        device.reopen()
        reread = SuperblockStore(device)
        assert reread.read().checkpoint_lsn == 8
        reread.write(superblock(checkpoint_lsn=11))
        assert SuperblockStore(device).read().checkpoint_lsn == 11

    def test_geometry_mismatch(self):
        """Should refuse to open with a different page geometry or mode."""
        with pytest.raises(ConfigMismatchError):
            superblock().check_matches(16384, SEG, "bminus")
        with pytest.raises(ConfigMismatchError):
            superblock().check_matches(PAGE, SEG, "baseline")


class TestDeterministicShadowStore:
    """Test flushing and loading through fixed slots."""

    @pytest.fixture
    def store(self, device):
        return DeterministicShadowStore(device, PAGE, SEG, DATA_START_LBA, 2000, RecoveryCounters())

    def test_fresh_page(self, store):
        """Should report a never-written page as fresh."""
        loaded = store.load_page(4)
        assert loaded.fresh
        assert store.counters.fresh_pages == 1

    def test_flush_alternates_and_trims(self, store):
        """Should write the other slot and trim the previous one each time."""
        region = store.region(2)
        store.flush_page(2, image(2, 5))
        first = store.directory.get(2)
        store.flush_page(2, image(2, 6))
        second = store.directory.get(2)
        assert first != second
        assert store.device.read_blocks(region.slot_lba(first), 2) == bytes(PAGE)
        assert store.load_page(2).image == image(2, 6)

    def test_torn_flush_keeps_previous_image(self, store):
        """Should recover the previous image after a torn slot write."""
        store.flush_page(2, image(2, 5))
        store.device.inject_crash(FaultPlan(crash_after_n_block_writes=1, partial_write_fraction=0.5))
        with pytest.raises(DeviceCrashedError):
            store.flush_page(2, image(2, 6))
        store.device.reopen()
        store.directory.forget_all()
        loaded = store.load_page(2)
        assert loaded.image == image(2, 5)
        assert store.counters.torn_slots == 1

    def test_reverted_trim_resolved_by_lsn(self, store):
        """Should pick the newer slot when a trim of the older one was lost."""
        store.flush_page(2, image(2, 5))
        store.flush_page(2, image(2, 6))
        store.device.crash_now(suppress_pending_trims=True)
        store.device.reopen()
        store.directory.forget_all()
        assert store.load_page(2).image == image(2, 6)
        assert store.counters.lsn_resolved == 1

    def test_foreign_image(self, store):
        """Should refuse a slot holding another page's image."""
        region = store.region(3)
        store.device.write_blocks(region.slot0_lba, image(9, 5), object())
        with pytest.raises(UnrecoverablePageError):
            store.load_page(3)

    def test_footprint(self, store):
        """Should charge five blocks per 8KB page."""
        assert store.logical_footprint(10) == 10 * 5 * BLOCK_SIZE
        assert store.max_pages == 2000 // 5


class TestMappedShadowStore:
    """Test the page-table baseline."""

    @pytest.fixture
    def store(self, device):
        store = MappedShadowStore(device, PAGE, SEG, DATA_START_LBA, 2000, RecoveryCounters())
        store.format()
        return store

    def test_flush_and_reload_after_recover(self, store, device):
        """Should find pages through the persisted table after a restart."""
        store.flush_page(0, image(0, 5))
        store.flush_page(1, image(1, 6))
        store.flush_page(0, image(0, 7))
        again = MappedShadowStore(device, PAGE, SEG, DATA_START_LBA, 2000, RecoveryCounters())
        again.recover(2)
        assert again.load_page(0).image == image(0, 7)
        assert again.load_page(1).image == image(1, 6)
        assert again.load_page(2).fresh

    def test_table_writes_are_extra_traffic(self, store, device):
        """Should write one table block per page flush."""
        device.start_trace()
        store.flush_page(0, image(0, 5))
        trace = device.stop_trace()
        issuers = [e.tag.issuer for e in trace if e.op == "write"]
        assert issuers.count("slot") == 2
        assert issuers.count("page-table") == 1


class TestJournaledStore:
    """Test the double-write baseline."""

    @pytest.fixture
    def store(self, device):
        return JournaledStore(device, PAGE, SEG, DATA_START_LBA, 2000, RecoveryCounters(), journal_slots=4)

    def test_flush_writes_journal_then_home(self, store, device):
        """Should write the journal copy before the home copy."""
        device.start_trace()
        store.flush_page(1, image(1, 5))
        issuers = [e.tag.issuer for e in device.stop_trace()]
        assert issuers == ["journal", "journal", "home", "home"]
        assert store.load_page(1).image == image(1, 5)

    def test_torn_home_restored_from_journal(self, store, device):
        """Should copy the journal image over a torn home copy."""
        store.flush_page(1, image(1, 5))
        device.inject_crash(FaultPlan(crash_after_n_block_writes=3, partial_write_fraction=0.5,
                                      atomic_overwrites=False))
        with pytest.raises(DeviceCrashedError):
            store.flush_page(1, image(1, 6))
        device.reopen()
        store.recover(2)
        assert store.load_page(1).image == image(1, 6)
        assert store.counters.journal_restores == 1


class TestMakePageStore:
    """Test store selection by mode."""

    def test_modes(self, device):
        """Should build one store type per mode and reject others."""
        args = (device, PAGE, SEG, DATA_START_LBA, 2000, RecoveryCounters())
        assert isinstance(make_page_store("bminus", *args), DeterministicShadowStore)
        assert isinstance(make_page_store("baseline", *args), MappedShadowStore)
        assert isinstance(make_page_store("journal", *args), JournaledStore)
        with pytest.raises(ValueError):
            make_page_store("lsm", *args)
