"""CSV and JSON readers and writers with byte-stable float formatting."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    """Shortest round-trip representation; stable across runs."""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def write_rows(path, rows, fieldnames=None) -> Path:
    """Write a list of mappings as CSV with ``\\n`` line endings."""
    path = Path(path)
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([fmt(r.get(k, "")) for k in fieldnames])
    return path


def write_matrix(path, header, data) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in np.asarray(data):
            w.writerow([fmt(v) for v in row])
    return path


def write_chain_csv(path, chain) -> Path:
    """One row per retained draw, one column per parameter."""
    return write_matrix(path, ["iteration", *chain.names],
                        np.column_stack([np.arange(chain.draws.shape[0]), chain.draws]))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return fmt(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def read_rows(path) -> list[dict]:
    """Header-first comma-separated file as a list of dicts."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: missing header row")
        return [dict(r) for r in reader]


def read_values(path, column: str | None = None) -> np.ndarray:
    """A single numeric column (``column``, else ``y``, else the only column)."""
    rows = read_rows(path)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    keys = list(rows[0].keys())
    if column is None:
        column = "y" if "y" in keys else (keys[0] if len(keys) == 1 else None)
    if column is None or column not in keys:
        raise ValueError(f"{path}: cannot pick a value column from {keys}")
    return np.array([float(r[column]) for r in rows])
