"""CSV rows for run records and their aggregation into summary tables.

Every result file shares the fixed column set `RESULT_COLUMNS`; only the
`timestamp` column differs between repeated runs of the same config.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import ConfigError

logger = logging.getLogger(__name__)

RESULT_COLUMNS: List[str] = [
    "run_id",
    "method",
    "phase",
    "sparsity",
    "m",
    "replica_id",
    "val_acc",
    "test_acc",
    "ood_acc",
    "speedup",
    "l2_mean",
    "l2_max",
    "seed",
    "timestamp",
]

REPORT_COLUMNS: List[str] = [
    "method",
    "phase",
    "kind",
    "sparsity",
    "seeds",
    "val_acc_mean",
    "val_acc_std",
    "test_acc_mean",
    "test_acc_std",
    "ood_acc_mean",
    "ood_acc_std",
    "speedup_mean",
]

SUMMARY_KINDS = ("soup", "best", "mean")


def _fmt(value: Optional[float]) -> str:
    if value is None:
        return ""
    return f"{value:.10g}"


def make_run_id(method: str, config_hash: str, seed: int) -> str:
    return f"{method}-{config_hash[:12]}-{seed}"


def rows_for_record(record, run_id: str, timestamp: Optional[str] = None) -> List[Dict[str, str]]:
    """One row per candidate plus `soup`, `best` and `mean` rows for every phase.

    `record` is an orchestrator `RunRecord`.
    """
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    rows: List[Dict[str, str]] = []
    for phase in record.phases:
        shared = {
            "run_id": run_id,
            "method": record.method,
            "phase": str(phase.phase),
            "sparsity": _fmt(phase.sparsity),
            "m": str(phase.m),
            "speedup": _fmt(phase.speedup),
            "l2_mean": _fmt(phase.l2_mean),
            "l2_max": _fmt(phase.l2_max),
            "seed": str(record.seed),
            "timestamp": stamp,
        }
        for index, (val_acc, test_acc) in enumerate(
            zip(phase.candidate_val_accs, phase.candidate_test_accs)
        ):
            rows.append(
                {
                    **shared,
                    "replica_id": str(index),
                    "val_acc": _fmt(val_acc),
                    "test_acc": _fmt(test_acc),
                    "ood_acc": "",
                }
            )

        best_index = int(np.argmax(phase.candidate_test_accs))
        summary = {
            "soup": (phase.soup_val_acc, phase.soup_test_acc, phase.ood_acc),
            "best": (
                phase.candidate_val_accs[best_index],
                phase.candidate_test_accs[best_index],
                None,
            ),
            "mean": (
                float(np.mean(phase.candidate_val_accs)),
                phase.mean_candidate_test,
                None,
            ),
        }
        for kind in SUMMARY_KINDS:
            val_acc, test_acc, ood_acc = summary[kind]
            rows.append(
                {
                    **shared,
                    "replica_id": kind,
                    "val_acc": _fmt(val_acc),
                    "test_acc": _fmt(test_acc),
                    "ood_acc": _fmt(ood_acc),
                }
            )
    return rows


def write_rows(
    path: Path, rows: Iterable[Dict[str, str]], columns: Sequence[str] = RESULT_COLUMNS
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_rows(paths: Iterable[Path]) -> List[Dict[str, str]]:
    """Read result CSVs; every file must carry exactly `RESULT_COLUMNS`."""
    rows: List[Dict[str, str]] = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"result file not found: {path}")
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames != RESULT_COLUMNS:
                raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
            rows.extend(reader)
    return rows


def _mean_std(values: List[float]) -> tuple:
    if not values:
        return None, None
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if array.size > 1 else 0.0
    return float(array.mean()), std


def _floats(rows: List[Dict[str, str]], column: str) -> List[float]:
    return [float(row[column]) for row in rows if row[column] != ""]


def aggregate(rows: Iterable[Dict[str, str]]) -> List[Dict[str, str]]:
    """Summary rows per (method, phase, soup/best/mean): mean and sample std over seeds."""
    groups: Dict[tuple, List[Dict[str, str]]] = defaultdict(list)
    for row in rows:
        if row["replica_id"] in SUMMARY_KINDS:
            groups[(row["method"], int(row["phase"]), row["replica_id"])].append(row)
    logger.debug("aggregating %d summary groups", len(groups))

    summary: List[Dict[str, str]] = []
    ordered = sorted(groups, key=lambda key: (key[0], key[1], SUMMARY_KINDS.index(key[2])))
    for method, phase, kind in ordered:
        members = groups[(method, phase, kind)]
        val_mean, val_std = _mean_std(_floats(members, "val_acc"))
        test_mean, test_std = _mean_std(_floats(members, "test_acc"))
        ood_mean, ood_std = _mean_std(_floats(members, "ood_acc"))
        speedup_mean, _ = _mean_std(_floats(members, "speedup"))
        sparsity_mean, _ = _mean_std(_floats(members, "sparsity"))
        summary.append(
            {
                "method": method,
                "phase": str(phase),
                "kind": kind,
                "sparsity": _fmt(sparsity_mean),
                "seeds": str(len({row["seed"] for row in members})),
                "val_acc_mean": _fmt(val_mean),
                "val_acc_std": _fmt(val_std),
                "test_acc_mean": _fmt(test_mean),
                "test_acc_std": _fmt(test_std),
                "ood_acc_mean": _fmt(ood_mean),
                "ood_acc_std": _fmt(ood_std),
                "speedup_mean": _fmt(speedup_mean),
            }
        )
    return summary


def format_report(summary: List[Dict[str, str]]) -> str:
    """Plain-text table: one line per phase and row kind with mean ± std test accuracy."""
    lines = [f"{'method':<14}{'phase':>6}  {'kind':<5}{'sparsity':>10}  test acc"]
    for row in summary:
        test_mean = float(row["test_acc_mean"]) if row["test_acc_mean"] else math.nan
        test_std = float(row["test_acc_std"]) if row["test_acc_std"] else math.nan
        sparsity = float(row["sparsity"]) if row["sparsity"] else math.nan
        lines.append(
            f"{row['method']:<14}{row['phase']:>6}  {row['kind']:<5}{sparsity:>10.4f}"
            f"  {100 * test_mean:.2f} ± {100 * test_std:.2f}"
        )
    return "\n".join(lines)
