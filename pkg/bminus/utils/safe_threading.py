"""Stoppable worker threads used by the engine's background flushers and log timer."""

import logging
import time
import threading
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class SafeEvent:
    """Polling event; ``wait`` never blocks longer than one poll interval past a ``set``."""

    def __init__(self, poll_interval: float = 0.05):
        self._is_set = False
        self._lock = threading.Lock()
        self.poll_interval = poll_interval

    def set(self):
        """Set the event."""
        with self._lock:
            self._is_set = True

    def clear(self):
        """Clear the event."""
        with self._lock:
            self._is_set = False

    def is_set(self):
        """Check if event is set."""
        with self._lock:
            return self._is_set

    def wait(self, timeout: Optional[float] = None) -> bool:
        """Wait until set or ``timeout`` elapses; returns whether the event is set."""
        start_time = time.monotonic()
        while True:
            with self._lock:
                if self._is_set:
                    return True
            if timeout is not None:
                elapsed = time.monotonic() - start_time
                if elapsed >= timeout:
                    return False
                time.sleep(min(self.poll_interval, timeout - elapsed))
            else:
                time.sleep(self.poll_interval)


class SafeThread(threading.Thread):
    """Daemon thread that runs ``target(self)`` and logs instead of dying silently."""

    def __init__(self, target: Optional[Callable[["SafeThread"], None]] = None,
                 name: Optional[str] = None, daemon: bool = True):
        super().__init__(name=name, daemon=daemon)
        self._stop_event = SafeEvent()
        self._original_target = target
        self.error: Optional[BaseException] = None

    def run(self):
        try:
            if self._original_target:
                self._original_target(self)
        except Exception as e:
            self.error = e
            logger.exception("Thread %s error: %s", self.name, e)
        finally:
            logger.debug("Thread %s completed", self.name)

    def stop(self):
        """Signal thread to stop."""
        self._stop_event.set()

    def should_stop(self) -> bool:
        """Check if thread should stop."""
        return self._stop_event.is_set()

    def safe_sleep(self, duration: float) -> bool:
        """Sleep with stop check. Returns True if should continue, False if should stop."""
        return not self._stop_event.wait(duration)


class PeriodicWorker(SafeThread):
    """Calls ``action`` every ``interval`` seconds until stopped."""

    def __init__(self, action: Callable[[], object], interval: float, name: str):
        super().__init__(target=self._loop, name=name)
        self.action = action
        self.interval = interval
        self.passes = 0

    def _loop(self, _thread: SafeThread) -> None:
        while self.safe_sleep(self.interval):
            self.action()
            self.passes += 1


def safe_join_thread(thread: Optional[threading.Thread], timeout: float = 5.0) -> bool:
    """Safely join a thread with timeout."""
    if not thread or not thread.is_alive():
        return True
    try:
        thread.join(timeout=timeout)
        return not thread.is_alive()
    except Exception as e:
        logger.error("Error joining thread %s: %s", getattr(thread, "name", "unknown"), e)
        return False
