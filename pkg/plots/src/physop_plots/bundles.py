"""Schema-validated loading of exported artifacts.

All inputs are read-only: triptych bundles (JSON manifest + one
little-endian float64 blob of three stacked fields), evaluation-report
CSVs, and training loss traces.  The absolute-error panel of a triptych
is recomputed from the other two panels and checked against the stored
one, never trusted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRACE_COLUMNS = ("iteration", "L_ic", "L_bc", "L_eqn", "L_data", "L_total")
ABS_ERROR_TOLERANCE = 1e-9


class SchemaError(ValueError):
    pass


@dataclass
class TriptychBundle:
    reference: np.ndarray
    prediction: np.ndarray
    abs_error: np.ndarray
    sensors: list
    title: str
    rel_l2: float


def load_triptych(path) -> TriptychBundle:
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    if not manifest_path.exists():
        raise SchemaError(f"no triptych manifest at {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"manifest is not valid JSON: {err}") from err
    for key in ("file", "shape", "panels", "rel_l2", "sensors", "title"):
        if key not in doc:
            raise SchemaError(f"triptych manifest is missing '{key}'")
    shape = tuple(doc["shape"])
    if len(shape) != 3 or shape[0] != 3:
        raise SchemaError(f"triptych shape must be (3, nx, nt), got {shape}")
    blob_path = manifest_path.parent / doc["file"]
    if not blob_path.exists():
        raise SchemaError(f"missing data blob {blob_path.name}")
    blob = np.frombuffer(blob_path.read_bytes(), dtype="<f8")
    if blob.size != int(np.prod(shape)):
        raise SchemaError(
            f"blob holds {blob.size} values, manifest declares {int(np.prod(shape))}")
    arrays = blob.reshape(shape)
    recomputed = np.abs(arrays[0] - arrays[1])
    if np.max(np.abs(recomputed - arrays[2])) > ABS_ERROR_TOLERANCE:
        raise SchemaError("stored abs-error panel disagrees with |reference - prediction|")
    sensors = [(float(a), float(b)) for a, b in doc["sensors"]]
    return TriptychBundle(arrays[0], arrays[1], recomputed, sensors,
                          str(doc["title"]), float(doc["rel_l2"]))


def load_error_column(path, column: str | None = None):
    """Error values plus the column name from a report CSV."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no report CSV at {path}")
    with open(path) as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "sample_id" not in reader.fieldnames:
            raise SchemaError("report CSV must have a sample_id column")
        numeric = [c for c in reader.fieldnames if c != "sample_id"]
        if not numeric:
            raise SchemaError("report CSV has no error columns")
        if column is None:
            column = numeric[0]
        if column not in numeric:
            raise SchemaError(f"report CSV has no column '{column}'")
        try:
            values = [float(row[column]) for row in reader]
        except (TypeError, ValueError) as err:
            raise SchemaError(f"non-numeric value in column '{column}'") from err
    if not values:
        raise SchemaError("report CSV has no rows")
    return np.asarray(values), column


def load_trace(path) -> np.ndarray:
    """Loss-trace rows with exactly the five loss columns."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no trace CSV at {path}")
    with open(path) as fh:
        header = tuple(fh.readline().strip().split(","))
        if header != TRACE_COLUMNS:
            raise SchemaError(
                f"trace columns {list(header)} != expected {list(TRACE_COLUMNS)}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(TRACE_COLUMNS):
                raise SchemaError("trace row width mismatch")
            rows.append([float(v) for v in parts])
    if not rows:
        raise SchemaError("trace CSV has no rows")
    return np.asarray(rows)
