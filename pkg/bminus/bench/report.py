"""CSV and text-table output of experiment results."""

import logging
import os
from typing import List, Mapping, Optional, Sequence

from tabulate import tabulate

from ..core.engine import EngineConfig
from ..utils.data_storage import ResultTable, atomic_writer
from .workload import WorkloadSpec

logger = logging.getLogger(__name__)

RUN_COLUMNS = (
    ["timestamp", "label"]
    + EngineConfig.field_names()
    + WorkloadSpec.field_names()
    + ["ops", "wall_time", "throughput", "w_usr"]
    + [f"{prefix}_{c}" for c in ("log", "pg", "e") for prefix in ("w", "p", "wa", "alpha")]
    + ["wa_total", "physical_wa", "physical_wa_log", "physical_wa_pg", "physical_wa_e",
       "device_physical_delta", "conserved"]
    + ["pages", "delta_bytes", "beta", "beta_compressed",
       "logical_footprint", "physical_footprint", "footprint_ratio"]
)

# Columns shown in the text table; the CSV carries everything.
SUMMARY_COLUMNS = ("label", "mode", "log_mode", "log_policy", "page_size", "threshold",
                   "record_size", "client_threads", "op_mix", "throughput",
                   "physical_wa", "physical_wa_log", "physical_wa_pg", "physical_wa_e", "beta")

BETA_COLUMNS = ("timestamp", "mode", "page_size", "segment_size", "threshold", "pages",
                "delta_bytes", "beta", "beta_compressed", "logical_footprint",
                "physical_footprint", "footprint_ratio")


def render_table(rows: Sequence[Mapping[str, object]], columns: Optional[Sequence[str]] = None) -> str:
    """Aligned text table of ``rows`` restricted to ``columns`` present in them."""
    if not rows:
        return "(no rows)"
    columns = [c for c in (columns or list(rows[0])) if any(c in r for r in rows)]
    return tabulate([[r.get(c, "") for c in columns] for r in rows], headers=columns,
                    tablefmt="simple", floatfmt=".4f")


def emit(rows: Sequence[Mapping[str, object]], output_dir: str, name: str = "results",
         columns: Sequence[str] = RUN_COLUMNS,
         summary_columns: Sequence[str] = SUMMARY_COLUMNS) -> List[str]:
    """Write ``<name>.csv`` and ``<name>.txt``; returns both paths."""
    if not rows:
        raise ValueError("no results to emit")
    csv_path = ResultTable(os.path.join(output_dir, f"{name}.csv"), columns).save(rows)
    text_path = os.path.join(output_dir, f"{name}.txt")
    with atomic_writer(text_path) as f:
        f.write(render_table(rows, summary_columns))
        f.write("\n")
    logger.info("wrote %d rows to %s", len(rows), csv_path)
    return [csv_path, text_path]


def report(csv_path: str, columns: Optional[Sequence[str]] = None) -> str:
    """Render a previously emitted CSV as a text table."""
    rows = ResultTable(csv_path, []).load()
    if columns is None and rows and "throughput" in rows[0]:
        columns = SUMMARY_COLUMNS
    return render_table(rows, columns)
