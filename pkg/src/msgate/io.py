"""Persistence of run records: one CSV per table plus a JSON summary."""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def table_csv(table) -> str:
    """CSV text of a table: header row, then rows with round-trip float formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        # JSON has no infinities; encode them as strings
        return value if math.isfinite(value) else str(value)
    return value


def record_json(record, table_files: dict) -> str:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "command": record.command,
        "version": record.version,
        "seed": record.seed,
        "started_at": record.started_at,
        "finished_at": record.finished_at,
        "config": record.config,
        "tables": table_files,
        "summary": record.summary,
    }
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_record(record, out_dir) -> dict:
    """Write ``<command>_<table>.csv`` files and ``<command>_summary.json``; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, table in record.tables.items():
        path = out / f"{record.command}_{name}.csv"
        path.write_text(table_csv(table), encoding="utf-8")
        files[name] = path.name
    summary_path = out / f"{record.command}_summary.json"
    summary_path.write_text(record_json(record, files), encoding="utf-8")
    return {"tables": [out / f for f in files.values()], "summary": summary_path}
