"""Exception types raised by the storage engine and its simulated device."""


class BMinusError(Exception):
    """Base class for all engine errors."""


# Device

class AddressOutOfRangeError(BMinusError):
    """LBA outside the device's logical capacity."""


class DeviceCrashedError(BMinusError):
    """Device is in the crashed state; reopen before issuing more I/O."""


class DeviceFullError(BMinusError):
    """Resident physical bytes would exceed the physical capacity."""


class UntaggedWriteError(BMinusError):
    """A write reached the device without a write-category tag."""


# Page format

class PageOverflowError(BMinusError):
    """Records do not fit in the page."""


class SegmentRangeError(BMinusError):
    """Byte range lies outside the page."""


class GeometryMismatchError(BMinusError):
    """Delta or tracker geometry does not match the page."""


class UnrecoverablePageError(BMinusError):
    """No valid on-storage image could be resolved for a page."""

    def __init__(self, page_id: int, reason: str):
        super().__init__(f"page {page_id}: {reason}")
        self.page_id = page_id
        self.reason = reason


# Modification log

class InvalidThresholdError(BMinusError):
    """Threshold T outside (0, 4096 - delta header]."""


# Redo log

class LsnRegressionError(BMinusError):
    """Appended LSN is not greater than the last appended LSN."""


class TruncationError(BMinusError):
    """Truncation past the flushed or checkpointed LSN."""


class LogFullError(BMinusError):
    """Redo ring has no free blocks; a checkpoint must truncate first."""


# Engine

class OversizedRecordError(BMinusError):
    """Key or record too large for the configured page size."""


class TxnStateError(BMinusError):
    """Operation on a transaction that is not active."""


class CommitError(BMinusError):
    """Commit could not be made durable; the transaction is not committed."""


class CapacityError(BMinusError):
    """Page or log space exhausted on the device."""


class EngineFailedError(BMinusError):
    """Engine stopped after a device fault; reopen to recover."""


class ConfigError(BMinusError):
    """Invalid configuration key or value."""


class ConfigMismatchError(ConfigError):
    """Stored geometry differs from the configuration used to open the engine."""


# Metrics

class UndefinedWAError(BMinusError):
    """Write amplification is undefined with zero user bytes."""
