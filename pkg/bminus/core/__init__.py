"""Storage engine: simulated device, page format, page stores, logs, B-tree."""
