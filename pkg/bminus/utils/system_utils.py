"""Formatting and process helpers for reports."""

from datetime import datetime
from typing import Dict

import psutil


def get_timestamp() -> str:
    """Get the current time as an ISO string without microseconds."""
    return datetime.now().replace(microsecond=0).isoformat()


def format_bytes(count: float) -> str:
    """Human-readable binary size, e.g. ``12.5 MiB``."""
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(count) < 1024 or unit == "GiB":
            return f"{count:.0f} {unit}" if unit == "B" else f"{count:.1f} {unit}"
        count /= 1024
    return f"{count:.1f} GiB"


def parse_size(text: str) -> int:
    """Parse ``4096``, ``8K``, ``32MB`` or ``2GiB`` into bytes."""
    value = text.strip().upper().replace("IB", "").rstrip("B")
    multipliers = {"K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}
    if value and value[-1] in multipliers:
        return int(float(value[:-1]) * multipliers[value[-1]])
    return int(value)


def process_memory() -> Dict[str, int]:
    """Resident and virtual memory of this process."""
    info = psutil.Process().memory_info()
    return {"rss": info.rss, "vms": info.vms}
