"""Run logging and crash reports for the benchmark driver."""

import glob
import json
import logging
import os
import platform
import sys
import threading
import time
import traceback
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Any, Callable, Dict, Optional

import psutil

LOGGER_NAME = "bminus"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"


class CrashLogger:
    """Rotating run log plus JSON crash reports for unhandled exceptions."""

    def __init__(self, log_dir: str, emergency_save_callback: Optional[Callable] = None,
                 console_level: int = logging.WARNING):
        """
        Initialize crash logger.

        Args:
            log_dir: Directory to store run logs and crash reports
            emergency_save_callback: Called before a crash report is written
                (the CLI uses it to save the device image)
            console_level: Threshold of the stderr handler
        """
        self.log_dir = log_dir
        self.emergency_save_callback = emergency_save_callback
        self._original_excepthook = sys.excepthook
        self._lock = threading.Lock()

        os.makedirs(log_dir, exist_ok=True)
        self.setup_file_logging(console_level)
        sys.excepthook = self.handle_exception
        self._cleanup_old_logs()

    def _cleanup_old_logs(self, days_to_keep: int = 30) -> None:
        """Remove crash reports and rotated logs older than ``days_to_keep``."""
        cutoff_time = time.time() - days_to_keep * 24 * 60 * 60
        patterns = ["crash_report_*.json", "crash_report_*.txt", f"{LOGGER_NAME}.log.*"]
        files_removed = 0
        for pattern in patterns:
            for file_path in glob.glob(os.path.join(self.log_dir, pattern)):
                try:
                    if os.path.getmtime(file_path) < cutoff_time:
                        os.remove(file_path)
                        files_removed += 1
                except OSError:
                    pass
        if files_removed:
            self.logger.info("Cleaned up %d old log files", files_removed)

    def setup_file_logging(self, console_level: int = logging.WARNING) -> None:
        """Attach the rotating file handler and the console handler to the ``bminus`` logger."""
        log_file = os.path.join(self.log_dir, f"{LOGGER_NAME}.log")
        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(logging.DEBUG)
        self.logger.handlers.clear()

        file_handler = RotatingFileHandler(log_file, maxBytes=10 * 1024 * 1024, backupCount=5,
                                           encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        console_handler = logging.StreamHandler()
        console_handler.setLevel(console_level)

        formatter = logging.Formatter(LOG_FORMAT)
        file_handler.setFormatter(formatter)
        console_handler.setFormatter(formatter)
        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

    def close(self) -> None:
        """Detach handlers and restore the previous exception hook."""
        for handler in list(self.logger.handlers):
            handler.close()
            self.logger.removeHandler(handler)
        if sys.excepthook == self.handle_exception:
            sys.excepthook = self._original_excepthook

    def handle_exception(self, exc_type, exc_value, exc_traceback):
        """Handle unhandled exceptions."""
        if issubclass(exc_type, KeyboardInterrupt):
            self._original_excepthook(exc_type, exc_value, exc_traceback)
            return

        with self._lock:
            try:
                if self.emergency_save_callback:
                    try:
                        self.emergency_save_callback()
                        self.logger.info("Emergency save completed")
                    except Exception as save_error:
                        self.logger.error("Emergency save failed: %s", save_error)

                crash_info = self.create_crash_report(exc_type, exc_value, exc_traceback)
                crash_file = self.save_crash_report(crash_info)
                self.logger.critical("UNHANDLED EXCEPTION: %s: %s", exc_type.__name__, exc_value)
                self.logger.critical("Crash report saved to: %s", crash_file)
            except Exception as logger_error:
                print(f"CRITICAL: Crash logger failed: {logger_error}", file=sys.stderr)
                traceback.print_exception(exc_type, exc_value, exc_traceback, file=sys.stderr)

        self._original_excepthook(exc_type, exc_value, exc_traceback)

    def create_crash_report(self, exc_type, exc_value, exc_traceback) -> Dict[str, Any]:
        """Create detailed crash report."""
        crash_info: Dict[str, Any] = {
            "timestamp": datetime.now().isoformat(),
            "exception": {
                "type": exc_type.__name__,
                "message": str(exc_value),
                "traceback": traceback.format_exception(exc_type, exc_value, exc_traceback),
            },
            "system": {
                "platform": platform.platform(),
                "python_version": sys.version,
                "processor": platform.processor(),
            },
            "application": {
                "argv": sys.argv,
                "working_directory": os.getcwd(),
            },
            "memory": {},
            "threads": {
                "active_count": threading.active_count(),
                "thread_names": [t.name for t in threading.enumerate()],
            },
        }
        try:
            process = psutil.Process()
            crash_info["memory"] = {
                "memory_info": process.memory_info()._asdict(),
                "memory_percent": process.memory_percent(),
            }
        except psutil.Error as e:
            crash_info["memory"] = {"error": str(e)}
        return crash_info

    def save_crash_report(self, crash_info: Dict[str, Any]) -> str:
        """Save crash report to file."""
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        crash_file = os.path.join(self.log_dir, f"crash_report_{timestamp}.json")
        try:
            with open(crash_file, "w", encoding="utf-8") as f:
                json.dump(crash_info, f, indent=2, ensure_ascii=False, default=str)
        except (OSError, TypeError, ValueError):
            crash_file = os.path.join(self.log_dir, f"crash_report_{timestamp}.txt")
            with open(crash_file, "w", encoding="utf-8") as f:
                f.write(f"Crash Report - {crash_info['timestamp']}\n")
                f.write("=" * 50 + "\n")
                f.write(f"Exception: {crash_info['exception']['type']}: {crash_info['exception']['message']}\n")
                f.write("\nTraceback:\n")
                f.write("".join(crash_info["exception"]["traceback"]))
        return crash_file


def _log_failure(operation_name: str, error: Exception, logger: Optional[logging.Logger]) -> None:
    (logger or logging.getLogger(LOGGER_NAME)).error("Error in %s: %s", operation_name, error,
                                                     exc_info=True)


def safe_call(func: Callable, *args, operation_name: str = "function call",
              logger: Optional[logging.Logger] = None, default_return=None, **kwargs):
    """
    Call ``func`` and log any exception instead of raising it.

    Args:
        func: Function to call
        operation_name: Name of the operation for logging
        logger: Logger to report to; the ``bminus`` root logger when omitted
        default_return: Value to return if function fails
        *args, **kwargs: Arguments to pass to the function
    """
    try:
        return func(*args, **kwargs)
    except Exception as e:
        _log_failure(operation_name, e, logger)
        return default_return
