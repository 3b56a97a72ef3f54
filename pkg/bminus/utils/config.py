"""Configuration management: flat key=value files with command-line overrides."""

import itertools
import logging
import os
import threading
from dataclasses import fields
from typing import Any, Dict, Iterable, List, Optional, Tuple

from ..core.errors import ConfigError
from .data_storage import read_kv_file
from .system_utils import parse_size

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "results"
MATRIX_PREFIX = "matrix."

# Keys accepting size suffixes such as 8K or 32MB.
SIZE_KEYS = frozenset({"page_size", "segment_size", "threshold", "cache_bytes",
                       "dataset_bytes", "record_size"})

EXTRA_KEYS: Dict[str, Any] = {
    "device.codec": "deflate",
    "device.thin_factor": 1.0,
    "device.logical_blocks": 0,
    "output.dir": DEFAULT_OUTPUT_DIR,
    "crash.seeds": 20,
    "crash.txns": 200,
    "crash.stride": 1,
    "crash.threads": 1,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            short = key.rsplit(".", 1)[-1]
            return parse_size(value) if short in SIZE_KEYS else int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {value!r}: {e}") from e
    return value.strip()


def _schema() -> Dict[str, Any]:
    from ..bench.workload import WorkloadSpec
    from ..core.engine import EngineConfig

    schema: Dict[str, Any] = {}
    for cls in (EngineConfig, WorkloadSpec):
        for f in fields(cls):
            schema[f.name] = f.default
    schema.update(EXTRA_KEYS)
    return schema


class ConfigManager:
    """Benchmark configuration.

    Starts from the built-in defaults, then applies the file (if any), then
    ``--set`` overrides. ``matrix.<key> = a,b,c`` lines declare experiment
    axes; ``expand()`` yields one configuration per combination.
    """

    def __init__(self, config_file: Optional[str] = None):
        self.config_file = config_file
        self._schema = _schema()
        self._config: Dict[str, Any] = dict(self._schema)
        self._matrix: Dict[str, List[Any]] = {}
        self._lock = threading.RLock()
        if config_file:
            self.load()

    def load(self) -> None:
        """Load configuration from file."""
        with self._lock:
            if not os.path.exists(self.config_file):
                raise ConfigError(f"config file {self.config_file} not found")
            try:
                values = read_kv_file(self.config_file)
            except ValueError as e:
                raise ConfigError(str(e)) from e
            for key, value in values.items():
                self.set(key, value)
            logger.info("loaded %d settings from %s", len(values), self.config_file)

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value."""
        with self._lock:
            return self._config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set one value, coercing text to the key's type."""
        with self._lock:
            if key.startswith(MATRIX_PREFIX):
                axis = key[len(MATRIX_PREFIX):]
                self._check_key(axis)
                items = value.split(",") if isinstance(value, str) else list(value)
                parsed = [_coerce(axis, item.strip() if isinstance(item, str) else item,
                                  self._schema[axis]) for item in items if str(item).strip()]
                if not parsed:
                    raise ConfigError(f"{key}: empty axis")
                self._matrix[axis] = parsed
                return
            self._check_key(key)
            self._config[key] = _coerce(key, value, self._schema[key])

    def update(self, data: Dict[str, Any]) -> None:
        """Update multiple configuration values."""
        with self._lock:
            for key, value in data.items():
                self.set(key, value)

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Apply ``key=value`` strings from the command line."""
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            self.set(key.strip(), value.strip())

    def _check_key(self, key: str) -> None:
        if key not in self._schema:
            raise ConfigError(f"unknown configuration key {key!r}")

    @property
    def data(self) -> Dict[str, Any]:
        """Get all configuration data."""
        with self._lock:
            return self._config.copy()

    @property
    def output_dir(self) -> str:
        return self.get("output.dir", DEFAULT_OUTPUT_DIR)

    @property
    def codec(self) -> str:
        return self.get("device.codec")

    @property
    def thin_factor(self) -> float:
        return self.get("device.thin_factor")

    @property
    def logical_blocks(self) -> int:
        return self.get("device.logical_blocks")

    def engine_config(self):
        from ..core.engine import EngineConfig

        with self._lock:
            values = {name: self._config[name] for name in EngineConfig.field_names()}
        config = EngineConfig(**values).with_threshold_cap()
        if config.threshold != values["threshold"]:
            logger.warning("threshold %d capped to %d (one delta block)",
                           values["threshold"], config.threshold)
        return config.validate()

    def workload_spec(self):
        from ..bench.workload import WorkloadSpec

        with self._lock:
            values = {name: self._config[name] for name in WorkloadSpec.field_names()}
        return WorkloadSpec(**values).validate()

    def matrix_axes(self) -> Dict[str, List[Any]]:
        with self._lock:
            return {axis: list(values) for axis, values in self._matrix.items()}

    def expand(self) -> List[Tuple[Dict[str, Any], "ConfigManager"]]:
        """One (axis values, configuration) pair per point of the matrix."""
        axes = self.matrix_axes()
        if not axes:
            return [({}, self)]
        names = list(axes)
        points = []
        for combo in itertools.product(*(axes[name] for name in names)):
            point = dict(zip(names, combo))
            child = ConfigManager()
            with self._lock:
                child._config = dict(self._config)
            child._config.update(point)
            points.append((point, child))
        return points
