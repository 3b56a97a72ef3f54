"""Command-line entry point for the benchmark and crash-test driver."""

import argparse
import faulthandler
import logging
import os
import signal
import sys
from dataclasses import asdict
from typing import List, Optional

from .bench import crash_harness, report as reports
from .bench.workload import Dataset, make_device, populate, run
from .core.device import CompressedBlockDevice
from .core.engine import Engine
from .core.errors import BMinusError, ConfigError
from .core.metrics import beta_scan
from .utils.config import ConfigManager
from .utils.crash_logger import LOGGER_NAME, CrashLogger
from .utils.system_utils import format_bytes, get_timestamp, process_memory

APP_VERSION = "0.3.0"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ORACLE = 2
EXIT_CONFIG = 64

logger = logging.getLogger(LOGGER_NAME)

# Device of the command in progress, saved by the emergency hook.
_active_device: Optional[CompressedBlockDevice] = None
_image_path: Optional[str] = None


def emergency_save() -> None:
    """Save the in-progress device next to the requested image."""
    if _active_device is not None and _image_path:
        _active_device.save_image(_image_path + ".emergency")


def signal_handler(signum, frame):
    """Handle shutdown signals."""
    logger.warning("Received signal %d, stopping", signum)
    sys.exit(EXIT_FAILURE)


def setup_fault_handling(log_dir: str):
    """Dump all thread stacks to ``faulthandler.log`` on a hard crash."""
    try:
        os.makedirs(log_dir, exist_ok=True)
        fault_log = open(os.path.join(log_dir, "faulthandler.log"), "w")
        faulthandler.enable(file=fault_log, all_threads=True)
        return fault_log
    except OSError as e:
        logger.warning("Could not set up fault handling: %s", e)
        return None


# -- commands -----------------------------------------------------------------

def _open_populated(config: ConfigManager, image: Optional[str]):
    """Engine over the saved image, or over a fresh device populated now."""
    global _active_device
    engine_config = config.engine_config()
    spec = config.workload_spec()
    if image and os.path.exists(image):
        device = CompressedBlockDevice.load_image(image)
        _active_device = device
        engine = Engine.open(engine_config, device)
        return engine, Dataset(spec)
    device = make_device(engine_config, spec, config.codec, config.thin_factor, config.logical_blocks)
    _active_device = device
    engine = Engine.open(engine_config, device)
    return engine, populate(spec, engine)


def cmd_populate(args, config: ConfigManager) -> int:
    global _active_device
    engine_config = config.engine_config()
    spec = config.workload_spec()
    device = make_device(engine_config, spec, config.codec, config.thin_factor, config.logical_blocks)
    _active_device = device
    with Engine.open(engine_config, device) as engine:
        populate(spec, engine)
        stats = engine.stats()
    if args.image:
        device.save_image(args.image)
    dev = device.stats()
    print(f"populated {spec.record_count} records into {stats['pages']} pages "
          f"(height {stats['height']}); {format_bytes(dev.physical_bytes_resident)} resident")
    return EXIT_OK


def cmd_run(args, config: ConfigManager) -> int:
    engine, dataset = _open_populated(config, args.image)
    with engine:
        result = run(config.workload_spec(), engine, dataset, label=args.label)
    paths = reports.emit([result.as_row()], config.output_dir, args.name or "run")
    print(reports.render_table([result.as_row()], reports.SUMMARY_COLUMNS))
    print(f"results: {', '.join(paths)}")
    return EXIT_OK


def cmd_matrix(args, config: ConfigManager) -> int:
    global _active_device
    points = config.expand()
    rows = []
    for i, (point, child) in enumerate(points, 1):
        label = " ".join(f"{k}={v}" for k, v in point.items()) or "default"
        logger.info("matrix point %d/%d: %s", i, len(points), label)
        engine_config = child.engine_config()
        spec = child.workload_spec()
        device = make_device(engine_config, spec, child.codec, child.thin_factor, child.logical_blocks)
        _active_device = device
        with Engine.open(engine_config, device) as engine:
            dataset = populate(spec, engine)
            rows.append(run(spec, engine, dataset, label=label).as_row())
        print(f"[{i}/{len(points)}] {label}: physical WA {rows[-1].get('physical_wa', 'n/a')}")
    paths = reports.emit(rows, config.output_dir, args.name or "matrix")
    print(reports.render_table(rows, reports.SUMMARY_COLUMNS))
    print(f"results: {', '.join(paths)}")
    return EXIT_OK


def cmd_crash_suite(args, config: ConfigManager) -> int:
    engine_config = config.engine_config()
    seeds = args.seeds if args.seeds is not None else config.get("crash.seeds")
    txns = config.get("crash.txns")
    atomic = not args.torn_overwrites
    if not atomic:
        logger.warning("crash suite tears overwrites of live blocks; the engine assumes 4KB atomic writes")
    if args.exhaustive:
        summary = crash_harness.SuiteSummary()
        harness = crash_harness.CrashHarness(engine_config, atomic_overwrites=atomic)
        for seed in range(args.first_seed, args.first_seed + seeds):
            summary.absorb(crash_harness.explore(seed, txns, config.get("crash.stride"), harness=harness))
    else:
        summary = crash_harness.crash_suite(seeds, txns, config.get("crash.threads"),
                                            engine_config, args.first_seed, atomic_overwrites=atomic)
    reports.emit([summary.as_row()], config.output_dir, args.name or "crash_suite",
                 columns=list(summary.as_row()), summary_columns=list(summary.as_row()))
    print(f"{summary.scenarios} scenarios, {len(summary.failures)} failures; "
          f"recovery: {summary.counters.as_dict()}")
    if not summary.passed:
        for verdict in summary.failures:
            print(verdict.describe(), file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_beta_scan(args, config: ConfigManager) -> int:
    engine, dataset = _open_populated(config, args.image)
    with engine:
        if not args.no_run:
            run(config.workload_spec(), engine, dataset, scan_overhead=False)
        with engine.quiesced():
            overhead = beta_scan(engine)
    row = {"timestamp": get_timestamp(), **asdict(engine.config), **overhead.as_row(),
           "footprint_ratio": round(overhead.footprint_ratio, 6)}
    paths = reports.emit([row], config.output_dir, args.name or "beta",
                         columns=reports.BETA_COLUMNS, summary_columns=reports.BETA_COLUMNS)
    print(reports.render_table([row], reports.BETA_COLUMNS))
    print(f"results: {', '.join(paths)}")
    return EXIT_OK


def cmd_report(args, config: ConfigManager) -> int:
    columns = args.columns.split(",") if args.columns else None
    print(reports.report(args.csv, columns))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    common.add_argument("--output", help="result directory (overrides output.dir)")
    common.add_argument("--image", help="device image to save after populate or load before run")
    common.add_argument("--name", help="base name of the result files")
    common.add_argument("-v", "--verbose", action="store_true", help="log INFO to the console")

    parser = argparse.ArgumentParser(prog="bminus", description="B-minus tree write-amplification bench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("populate", parents=[common], help="load the dataset into a fresh device")
    p.set_defaults(func=cmd_populate)

    p = sub.add_parser("run", parents=[common], help="populate (or load) and run the measured workload")
    p.add_argument("--label", default="", help="label column of the result row")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", parents=[common], help="run every point of the matrix.* axes")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("crash-suite", parents=[common], help="crash, recover and check the oracle")
    p.add_argument("--seeds", type=int, help="number of seeds (overrides crash.seeds)")
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--exhaustive", action="store_true",
                   help="evaluate every crash point of each seed instead of sampling")
    p.add_argument("--torn-overwrites", action="store_true",
                   help="also tear cut writes that overwrite live blocks (default: such writes are dropped)")
    p.set_defaults(func=cmd_crash_suite)

    p = sub.add_parser("beta-scan", parents=[common], help="measure resident delta-block overhead")
    p.add_argument("--no-run", action="store_true", help="scan right after populate/load")
    p.set_defaults(func=cmd_beta_scan)

    p = sub.add_parser("report", help="render an emitted CSV as a table")
    p.add_argument("csv")
    p.add_argument("--columns", help="comma-separated columns to show")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    global _image_path
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return args.func(args, None)

    try:
        config = ConfigManager(args.config)
        config.apply_overrides(args.set)
        if args.output:
            config.set("output.dir", args.output)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    log_dir = os.path.join(config.output_dir, "logs")
    crash_logger = CrashLogger(log_dir, emergency_save,
                               console_level=logging.INFO if args.verbose else logging.WARNING)
    fault_log = setup_fault_handling(log_dir)
    signal.signal(signal.SIGINT, signal_handler)
    if hasattr(signal, "SIGTERM"):
        signal.signal(signal.SIGTERM, signal_handler)
    _image_path = args.image

    logger.info("bminus %s: %s (%s rss)", APP_VERSION, args.command,
                format_bytes(process_memory()["rss"]))
    try:
        return args.func(args, config)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except BMinusError as e:
        logger.error("%s failed: %s", args.command, e, exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if fault_log is not None:
            faulthandler.disable()
            fault_log.close()
        crash_logger.close()


if __name__ == "__main__":
    sys.exit(main())
