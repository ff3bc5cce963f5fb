"""Aggregate persisted run records into tables and plot-ready data."""

from __future__ import annotations

import csv as _csv
import json
from pathlib import Path

import numpy as np

__all__ = ["collect_records", "aggregate", "report"]

FORMATS = ("markdown-table", "csv", "plotdata")

_RECORD_FIELDS = [
    "config_hash", "seed", "method", "sweep_axis", "sweep_value",
    "id_accuracy", "ood_accuracy", "id_loss", "ood_loss", "final_penalty",
    "epsilon1", "epsilon2", "wall_seconds", "tool_version",
]


def collect_records(root) -> list[dict]:
    """All record.json files under a results directory, in sorted path order."""
    root = Path(root)
    records = []
    for path in sorted(root.rglob("record.json")):
        with open(path) as f:
            records.append(json.load(f))
    return records


def _group_key(record: dict):
    return (record.get("method", "?"), record.get("sweep_value"))


def aggregate(records: list[dict]) -> list[dict]:
    """Mean and sample std of accuracies per (method, sweep value) group."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict = {}
    for rec in records:
        groups.setdefault(_group_key(rec), []).append(rec)
    rows = []
    for (method, sweep_value), recs in sorted(
            groups.items(), key=lambda kv: (kv[0][0], str(kv[0][1]))):
        def stats(field):
            vals = [r[field] for r in recs if r.get(field) is not None]
            if not vals:
                return None, None
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            return mean, std
        id_mean, id_std = stats("id_accuracy")
        ood_mean, ood_std = stats("ood_accuracy")
        rows.append({
            "method": method,
            "sweep_value": sweep_value,
            "runs": len(recs),
            "id_mean": id_mean, "id_std": id_std,
            "ood_mean": ood_mean, "ood_std": ood_std,
        })
    return rows


def _fmt_cell(mean, std):
    if mean is None:
        return "--"
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def _markdown(records: list[dict]) -> str:
    rows = aggregate(records)
    lines = [
        "| method | sweep | runs | ID acc % (std) | OOD acc % (std) |",
        "|---|---|---|---|---|",
    ]
    for row in rows:
        sweep = "--" if row["sweep_value"] is None else str(row["sweep_value"])
        lines.append(
            f"| {row['method']} | {sweep} | {row['runs']} "
            f"| {_fmt_cell(row['id_mean'], row['id_std'])} "
            f"| {_fmt_cell(row['ood_mean'], row['ood_std'])} |"
        )
    return "\n".join(lines) + "\n"


def _records_csv(records: list[dict]) -> str:
    out = []
    out.append(",".join(_RECORD_FIELDS))
    for rec in records:
        cells = []
        for field in _RECORD_FIELDS:
            value = rec.get(field)
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def read_records_csv(path) -> list[dict]:
    """Inverse of the csv format: reloads records with exact float values."""
    records = []
    with open(path, newline="") as f:
        for row in _csv.DictReader(f):
            rec = {}
            for key, raw in row.items():
                if raw == "" or raw is None:
                    rec[key] = None
                elif key in ("seed",):
                    rec[key] = int(raw)
                elif key in ("config_hash", "method", "tool_version", "sweep_axis"):
                    rec[key] = raw
                else:
                    try:
                        rec[key] = float(raw)
                        if key == "sweep_value" and rec[key] == int(rec[key]) \
                                and "." not in raw and "e" not in raw.lower():
                            rec[key] = int(raw)
                    except ValueError:
                        rec[key] = raw
            records.append(rec)
    return records


def _plotdata(records: list[dict]) -> str:
    """Tidy (x, y, series, seed) rows for any plotting tool."""
    lines = ["x,y,series,seed"]
    for rec in records:
        x = rec.get("sweep_value")
        x = rec.get("method", "?") if x is None else x
        lines.append(
            f"{x},{repr(rec['ood_accuracy'])},{rec.get('method', '?')},{rec['seed']}"
        )
    return "\n".join(lines) + "\n"


def report(records: list[dict], fmt: str, out_path=None) -> str:
    """Render records in a given format; optionally write to a file."""
    if not records:
        raise ValueError("no records to report")
    if fmt == "markdown-table":
        text = _markdown(records)
    elif fmt == "csv":
        text = _records_csv(records)
    elif fmt == "plotdata":
        text = _plotdata(records)
    else:
        raise ValueError(f"unknown format {fmt!r}; one of {FORMATS}")
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    return text
