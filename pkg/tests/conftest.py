"""Shared fixtures: small zero-run devices and engines without background work."""

import dataclasses

import pytest

from bminus.core.device import CompressedBlockDevice, ZeroRunCodec
from bminus.core.engine import Engine, EngineConfig


SMALL_DEVICE_BLOCKS = 4096


def small_config(**overrides) -> EngineConfig:
    """8KB pages, a 16-page cache and no background threads."""
    base = EngineConfig(
        page_size=8192,
        cache_bytes=16 * 8192,
        background=False,
        flusher_count=0,
        log_fraction=1 / 16,
    )
    return dataclasses.replace(base, **overrides).validate()


def key(n: int) -> bytes:
    return n.to_bytes(8, "big")


@pytest.fixture
def device():
    return CompressedBlockDevice(SMALL_DEVICE_BLOCKS, codec=ZeroRunCodec())


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def engine(device, config):
    eng = Engine.open(config, device)
    yield eng
    eng.abandon()
