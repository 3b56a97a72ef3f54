"""Page latches and a monitor that reports latches held suspiciously long."""

import logging
import threading
import time
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

logger = logging.getLogger(__name__)


class LatchMonitor:
    """Tracks when each latch was taken so stalls can be reported."""

    def __init__(self, max_hold_time: float = 30.0):
        self.max_hold_time = max_hold_time
        self.active: Dict[str, float] = {}
        self._monitor_lock = threading.Lock()

    def acquired(self, name: str) -> None:
        """Register that a latch has been acquired."""
        with self._monitor_lock:
            self.active[name] = time.monotonic()

    def released(self, name: str) -> None:
        """Register that a latch has been released."""
        with self._monitor_lock:
            self.active.pop(name, None)

    def check_for_stalls(self) -> Optional[str]:
        """Warning message for the first latch held past ``max_hold_time``."""
        with self._monitor_lock:
            now = time.monotonic()
            for name, since in self.active.items():
                if now - since > self.max_hold_time:
                    message = f"Potential deadlock: {name} held for {now - since:.1f}s"
                    logger.warning(message)
                    return message
        return None

    def get_active(self) -> Dict[str, float]:
        """Seconds each currently held latch has been held."""
        with self._monitor_lock:
            now = time.monotonic()
            return {name: now - since for name, since in self.active.items()}


class ReadWriteLatch:
    """Shared/exclusive latch; waiting writers block new readers."""

    def __init__(self, name: str = "latch", monitor: Optional[LatchMonitor] = None):
        self.name = name
        self.monitor = monitor
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_shared(self) -> None:
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1
        if self.monitor:
            self.monitor.acquired(f"{self.name}:S")

    def release_shared(self) -> None:
        with self._cond:
            if self._readers <= 0:
                raise RuntimeError(f"{self.name}: shared release without acquire")
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()
        if self.monitor:
            self.monitor.released(f"{self.name}:S")

    def acquire_exclusive(self) -> None:
        with self._cond:
            self._waiting_writers += 1
            try:
                while self._writer or self._readers:
                    self._cond.wait()
            finally:
                self._waiting_writers -= 1
            self._writer = True
        if self.monitor:
            self.monitor.acquired(f"{self.name}:X")

    def release_exclusive(self) -> None:
        with self._cond:
            if not self._writer:
                raise RuntimeError(f"{self.name}: exclusive release without acquire")
            self._writer = False
            self._cond.notify_all()
        if self.monitor:
            self.monitor.released(f"{self.name}:X")

    def acquire(self, exclusive: bool) -> None:
        if exclusive:
            self.acquire_exclusive()
        else:
            self.acquire_shared()

    def release(self, exclusive: bool) -> None:
        if exclusive:
            self.release_exclusive()
        else:
            self.release_shared()

    @contextmanager
    def shared(self) -> Iterator["ReadWriteLatch"]:
        self.acquire_shared()
        try:
            yield self
        finally:
            self.release_shared()

    @contextmanager
    def exclusive(self) -> Iterator["ReadWriteLatch"]:
        self.acquire_exclusive()
        try:
            yield self
        finally:
            self.release_exclusive()

    @property
    def is_free(self) -> bool:
        with self._cond:
            return not self._writer and not self._readers
