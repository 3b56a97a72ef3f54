"""Benchmark workloads: dataset generation, populate and the measured run."""

import logging
import math
import random
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

from tqdm import tqdm

from ..core.device import BLOCK_SIZE, CompressedBlockDevice, make_codec
from ..core.engine import Engine, EngineConfig
from ..core.errors import ConfigError, UndefinedWAError
from ..core.metrics import StorageOverheadReport, WAReport, WriteCategory, beta_scan
from ..core.page import SLOT_SIZE
from ..core.shadow import DATA_START_LBA, region_stride
from ..utils.system_utils import get_timestamp

logger = logging.getLogger(__name__)

KEY_SIZE = 8
OP_MIXES = ("write-only", "point-read", "scan")
KEY_DISTRIBUTIONS = ("uniform", "zipfian")
POPULATE_ORDERS = ("random", "sequential")
# Random inserts leave leaves about 70% full; size for the worst case.
MIN_LEAF_FILL = 0.45


@dataclass
class WorkloadSpec:
    record_size: int = 128
    dataset_bytes: int = 32 * 1024 * 1024
    client_threads: int = 1
    op_count: int = 100_000
    duration: float = 0.0
    seed: int = 42
    op_mix: str = "write-only"
    scan_length: int = 100
    key_distribution: str = "uniform"
    zipf_theta: float = 0.99
    populate_order: str = "random"
    populate_batch: int = 64
    ops_per_txn: int = 1

    def validate(self) -> "WorkloadSpec":
        if self.record_size < KEY_SIZE + 1:
            raise ConfigError(f"record_size must be at least {KEY_SIZE + 1} bytes")
        if self.record_count < 1:
            raise ConfigError("dataset_bytes holds no records")
        if self.client_threads < 1:
            raise ConfigError("client_threads must be >= 1")
        if self.op_count < 0 or self.duration < 0:
            raise ConfigError("op_count and duration must be >= 0")
        if not self.op_count and not self.duration:
            raise ConfigError("set op_count or duration")
        if self.op_mix not in OP_MIXES:
            raise ConfigError(f"op_mix must be one of {OP_MIXES}, got {self.op_mix!r}")
        if self.key_distribution not in KEY_DISTRIBUTIONS:
            raise ConfigError(f"key_distribution must be one of {KEY_DISTRIBUTIONS}")
        if self.populate_order not in POPULATE_ORDERS:
            raise ConfigError(f"populate_order must be one of {POPULATE_ORDERS}")
        if not 0 < self.zipf_theta < 1:
            raise ConfigError("zipf_theta must be in (0, 1)")
        if self.scan_length < 1 or self.populate_batch < 1 or self.ops_per_txn < 1:
            raise ConfigError("scan_length, populate_batch and ops_per_txn must be >= 1")
        return self

    @property
    def record_count(self) -> int:
        return self.dataset_bytes // self.record_size

    @property
    def value_size(self) -> int:
        return self.record_size - KEY_SIZE

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


class ZipfianChooser:
    """Skewed index chooser over ``[0, n)`` with skew ``theta`` (YCSB's generator)."""

    def __init__(self, n: int, theta: float, rng: random.Random):
        self.n = n
        self.theta = theta
        self.rng = rng
        self.zetan = _zeta(n, theta)
        zeta2 = _zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - zeta2 / self.zetan) if n > 2 else 1.0

    def next(self) -> int:
        u = self.rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return min(1, self.n - 1)
        return min(self.n - 1, int(self.n * (self.eta * u - self.eta + 1) ** self.alpha))


_ZETA_CACHE: Dict[tuple, float] = {}


def _zeta(n: int, theta: float) -> float:
    cached = _ZETA_CACHE.get((n, theta))
    if cached is None:
        cached = math.fsum(1.0 / (i ** theta) for i in range(1, n + 1))
        _ZETA_CACHE[(n, theta)] = cached
    return cached


class Dataset:
    """The keys of one workload, generated deterministically from its seed.

    Keys are unique random 64-bit big-endian integers. Their generation
    order is random, so index 0 of a skewed chooser is a random key.
    """

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        rng = random.Random(f"{spec.seed}/keys")
        seen = set()
        keys: List[bytes] = []
        while len(keys) < spec.record_count:
            key = rng.getrandbits(64)
            if key in seen:
                continue
            seen.add(key)
            keys.append(key.to_bytes(KEY_SIZE, "big"))
        self.keys = keys

    def __len__(self) -> int:
        return len(self.keys)

    def load_order(self) -> List[bytes]:
        if self.spec.populate_order == "sequential":
            return sorted(self.keys)
        return list(self.keys)

    def value(self, rng: random.Random) -> bytes:
        """Half random bytes, half zeros."""
        size = self.spec.value_size
        random_part = (size + 1) // 2
        return rng.randbytes(random_part) + bytes(size - random_part)

    def chooser(self, rng: random.Random):
        """Callable returning the next key to operate on."""
        keys = self.keys
        if self.spec.key_distribution == "zipfian":
            zipf = ZipfianChooser(len(keys), self.spec.zipf_theta, rng)
            return lambda: keys[zipf.next()]
        n = len(keys)
        return lambda: keys[rng.randrange(n)]


@dataclass
class ExperimentResult:
    spec: WorkloadSpec
    config: EngineConfig
    ops: int
    wall_time: float
    wa: Optional[WAReport] = None
    overhead: Optional[StorageOverheadReport] = None
    device_physical_delta: int = 0
    label: str = ""
    timestamp: str = field(default_factory=get_timestamp)

    @property
    def throughput(self) -> float:
        return self.ops / self.wall_time if self.wall_time > 0 else 0.0

    @property
    def conserved(self) -> bool:
        """Physical bytes attributed to categories equal the device delta."""
        if self.wa is None:
            return True
        return sum(self.wa.physical.values()) == self.device_physical_delta

    def as_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"timestamp": self.timestamp, "label": self.label}
        row.update(asdict(self.config))
        row.update(asdict(self.spec))
        row.update({
            "ops": self.ops,
            "wall_time": round(self.wall_time, 3),
            "throughput": round(self.throughput, 1),
            "device_physical_delta": self.device_physical_delta,
            "conserved": self.conserved,
        })
        if self.wa is not None:
            row.update(self.wa.as_row())
            row["physical_wa"] = round(self.wa.physical_wa, 6)
            row["physical_wa_log"] = round(self.wa.physical_wa_of(WriteCategory.LOG), 6)
            row["physical_wa_pg"] = round(self.wa.physical_wa_of(WriteCategory.PG), 6)
            row["physical_wa_e"] = round(self.wa.physical_wa_of(WriteCategory.E), 6)
        if self.overhead is not None:
            row.update(self.overhead.as_row())
            row["footprint_ratio"] = round(self.overhead.footprint_ratio, 6)
        return row


def device_blocks_for(config: EngineConfig, spec: WorkloadSpec, thin_factor: float = 1.0) -> int:
    """Logical blocks a device needs to hold ``spec``'s dataset under ``config``."""
    usable = config.page_size * MIN_LEAF_FILL
    leaves = math.ceil(spec.record_count * (spec.record_size + SLOT_SIZE) / usable)
    pages = int(leaves * 1.1) + 64
    bpp = config.page_size // BLOCK_SIZE
    data_blocks = pages * region_stride(config.page_size) + config.journal_slots * bpp + pages // 512 + 64
    total = math.ceil((data_blocks + DATA_START_LBA) / (1 - config.log_fraction)) + 16
    return max(total, int(total * thin_factor))


def make_device(config: EngineConfig, spec: WorkloadSpec, codec: str = "deflate",
                thin_factor: float = 1.0, logical_blocks: int = 0) -> CompressedBlockDevice:
    blocks = logical_blocks or device_blocks_for(config, spec, thin_factor)
    logger.info("device of %d blocks (%s codec)", blocks, codec)
    return CompressedBlockDevice(blocks, codec=make_codec(codec))


def _progress(total: int, desc: str) -> tqdm:
    return tqdm(total=total, desc=desc, unit="ops", disable=not sys.stderr.isatty(), leave=False)


def populate(spec: WorkloadSpec, engine: Engine, dataset: Optional[Dataset] = None) -> Dataset:
    """Insert every record of the dataset, ``populate_batch`` records per transaction."""
    spec.validate()
    dataset = dataset or Dataset(spec)
    rng = random.Random(f"{spec.seed}/populate")
    order = dataset.load_order()
    started = time.monotonic()
    with _progress(len(order), "populate") as bar:
        for start in range(0, len(order), spec.populate_batch):
            batch = order[start:start + spec.populate_batch]
            with engine.transaction() as txn:
                for key in batch:
                    engine.put(txn, key, dataset.value(rng))
            bar.update(len(batch))
    logger.info("populated %d records of %d bytes in %.1fs", len(order), spec.record_size,
                time.monotonic() - started)
    return dataset


class _Client:
    """One client session issuing its share of the run's operations."""

    def __init__(self, index: int, spec: WorkloadSpec, engine: Engine, dataset: Dataset,
                 quota: int, deadline: Optional[float], bar: tqdm, bar_lock: threading.Lock):
        self.index = index
        self.spec = spec
        self.engine = engine
        self.dataset = dataset
        self.quota = quota
        self.deadline = deadline
        self.bar = bar
        self.bar_lock = bar_lock
        self.rng = random.Random(f"{spec.seed}/client/{index}")
        self.done = 0
        self.error: Optional[BaseException] = None

    def _finished(self) -> bool:
        if self.deadline is not None:
            return time.monotonic() >= self.deadline
        return self.done >= self.quota

    def _one_op(self, next_key) -> int:
        spec = self.spec
        if spec.op_mix == "write-only":
            count = spec.ops_per_txn if self.deadline is not None else min(spec.ops_per_txn,
                                                                            self.quota - self.done)
            with self.engine.transaction() as txn:
                for _ in range(count):
                    self.engine.put(txn, next_key(), self.dataset.value(self.rng))
            return count
        if spec.op_mix == "point-read":
            self.engine.get(next_key())
        else:
            self.engine.scan(next_key(), spec.scan_length)
        return 1

    def __call__(self) -> None:
        next_key = self.dataset.chooser(self.rng)
        try:
            while not self._finished():
                done = self._one_op(next_key)
                self.done += done
                with self.bar_lock:
                    self.bar.update(done)
        except Exception as e:
            self.error = e
            logger.error("client %d failed after %d ops: %s", self.index, self.done, e)


def run(spec: WorkloadSpec, engine: Engine, dataset: Optional[Dataset] = None,
        label: str = "", scan_overhead: bool = True) -> ExperimentResult:
    """Run the measured phase on a populated engine and report the window's deltas."""
    spec.validate()
    dataset = dataset or Dataset(spec)
    threads = spec.client_threads
    quotas = [spec.op_count // threads + (1 if i < spec.op_count % threads else 0) for i in range(threads)]
    deadline = time.monotonic() + spec.duration if spec.duration else None

    before, device_before = engine.measurement_snapshot()
    bar_lock = threading.Lock()
    with _progress(spec.op_count if deadline is None else 0, "run") as bar:
        clients = [_Client(i, spec, engine, dataset, quotas[i], deadline, bar, bar_lock)
                   for i in range(threads)]
        workers = [threading.Thread(target=client, name=f"bminus-client-{i}")
                   for i, client in enumerate(clients)]
        started = time.monotonic()
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()
        wall = time.monotonic() - started
    after, device_after = engine.measurement_snapshot()

    failed = [c.error for c in clients if c.error is not None]
    if failed:
        raise failed[0]

    try:
        wa = engine.accounting.report(since=before, until=after)
    except UndefinedWAError:
        wa = None
    overhead = None
    if scan_overhead:
        with engine.quiesced():
            overhead = beta_scan(engine)
    result = ExperimentResult(
        spec=spec,
        config=engine.config,
        ops=sum(c.done for c in clients),
        wall_time=wall,
        wa=wa,
        overhead=overhead,
        device_physical_delta=device_after.physical_bytes_written - device_before.physical_bytes_written,
        label=label,
    )
    logger.info("run %s: %d ops in %.1fs (%.0f ops/s), physical WA %s", label or spec.op_mix,
                result.ops, wall, result.throughput,
                f"{wa.physical_wa:.3f}" if wa is not None else "n/a")
    return result
