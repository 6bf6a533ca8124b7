"""Error metrics, evaluation reports, and artifact export.

The headline metric is the relative L2 error ||pred - ref|| / ||ref||
over all grid points; reports carry per-sample errors plus mean and
population standard deviation, and can be re-verified from their rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nets import HiddenPhysicsNet, OperatorModel
from .pde_oracles import N_T, N_X, FieldGrid, true_hidden_term


class UndefinedMetricError(ValueError):
    pass


def relative_l2(pred, ref) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if pred.shape != ref.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {ref.size}")
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        raise UndefinedMetricError("reference norm is zero")
    return float(np.linalg.norm(pred - ref) / denom)


def summarize(errors) -> tuple:
    """Mean and population standard deviation of an error list."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("cannot summarize an empty error list")
    return float(np.mean(errors)), float(np.std(errors))


@dataclass
class EvalReport:
    """Per-sample errors with recomputable summary statistics."""

    kind: str  # "dhpo" | "sysid"
    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_row(self, sample_id, **values) -> None:
        row = {"sample_id": sample_id}
        for col in self.columns:
            row[col] = float(values[col])
        self.rows.append(row)

    def errors(self, column: str) -> np.ndarray:
        return np.array([row[column] for row in self.rows])

    def summary(self) -> dict:
        out = {}
        for col in self.columns:
            mu, sigma = summarize(self.errors(col))
            out[col] = {"mean": mu, "std": sigma}
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["sample_id", *self.columns])
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v
                                 for k, v in row.items()})

    def to_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"kind": self.kind, "columns": list(self.columns),
               "summary": self.summary(), "n_samples": len(self.rows),
               "metadata": self.metadata,
               "std_convention": "population"}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def from_csv(cls, path, kind="unknown", metadata=None) -> "EvalReport":
        with open(path) as fh:
            reader = csv.DictReader(fh)
            columns = tuple(c for c in reader.fieldnames if c != "sample_id")
            report = cls(kind, columns, metadata=metadata or {})
            for row in reader:
                report.add_row(row["sample_id"],
                               **{c: float(row[c]) for c in columns})
        return report


def _grid_points() -> np.ndarray:
    x = np.linspace(0.0, 1.0, N_X)
    t = np.linspace(0.0, 1.0, N_T)
    xx, tt = np.meshgrid(x, t, indexing="ij")
    return np.column_stack([xx.ravel(), tt.ravel()])


def predict_fields(model: OperatorModel, f_rows: np.ndarray,
                   hidden: HiddenPhysicsNet | None = None):
    """Full-grid predictions for many input functions at once.

    Returns u of shape (n_samples, 101, 101), and the hidden-physics
    field N evaluated on the model's own (u, u_x, u_xx) when a hidden
    net is supplied.
    """
    f_rows = np.asarray(f_rows, dtype=np.float64)
    n_samples = f_rows.shape[0]
    pts = _grid_points()
    f_in = ad.input_leaf("f_rows", (None, model.m_sensors))
    x = ad.input_leaf("x", (None, 1))
    t = ad.input_leaf("t", (None, 1))
    trunk = model.trunk_graph(ad.hstack([x, t]))
    branch_t = ad.transpose(model.branch_graph(f_in))
    u = ad.add(ad.dot(trunk, branch_t), model.bias_leaf())
    targets = [u]
    if hidden is not None:
        trunk_x = ad.tangent(trunk, x)
        u_x = ad.dot(trunk_x, branch_t)
        u_xx = ad.dot(ad.tangent(trunk_x, x), branch_t)
        channels = [ad.flatten_cols(c) for c in (u, u_x, u_xx)]
        n_expr = hidden.graph(channels)
        targets.append(ad.unflatten_cols(n_expr, n_samples))
    bindings = {"f_rows": f_rows, "x": pts[:, :1], "t": pts[:, 1:],
                **model.store.to_bindings()}
    if hidden is not None:
        bindings.update(hidden.store.to_bindings())
    outs = ad.evaluate_many(targets, bindings)
    shaped = [o.T.reshape(n_samples, N_X, N_T) for o in outs]
    return shaped if hidden is not None else shaped[0]


def evaluate_dhpo(model: OperatorModel, hidden: HiddenPhysicsNet,
                  test_set, metadata: dict | None = None) -> EvalReport:
    """Relative L2 of u and of the learned hidden term per test sample."""
    report = EvalReport("dhpo", ("rel_l2_u", "rel_l2_n"), metadata=metadata or {})
    f_rows = np.stack([sample.values for sample, _ in test_set])
    u_pred, n_pred = predict_fields(model, f_rows, hidden)
    for i, (sample, grid) in enumerate(test_set):
        n_true = true_hidden_term(grid, grid.params, grid.system).values
        report.add_row(i,
                       rel_l2_u=relative_l2(u_pred[i], grid.values),
                       rel_l2_n=relative_l2(n_pred[i], n_true))
    return report


def evaluate_sysid(model: OperatorModel, predict_xi, test_set,
                   metadata: dict | None = None) -> EvalReport:
    """Parameter absolute error and field relative L2 per test sample.

    ``predict_xi`` maps a sensor-value vector to the scalar parameter
    estimate; ``test_set`` yields (sensor_values, xi_true, FieldGrid).
    """
    report = EvalReport("sysid", ("abs_err_xi", "rel_l2_u", "xi_true", "xi_pred"),
                        metadata=metadata or {})
    f_rows = np.stack([sensors for sensors, _, _ in test_set])
    u_pred = predict_fields(model, f_rows)
    for i, (sensors, xi_true, grid) in enumerate(test_set):
        xi_pred = float(predict_xi(sensors))
        report.add_row(i,
                       abs_err_xi=abs(xi_pred - xi_true),
                       rel_l2_u=relative_l2(u_pred[i], grid.values),
                       xi_true=xi_true, xi_pred=xi_pred)
    return report


# ---------------------------------------------------------------------------
# Triptych export: reference / prediction / absolute-error arrays written as
# one little-endian float64 blob plus a JSON manifest, for the plot tool.


def export_triptych(path, reference: np.ndarray, prediction: np.ndarray,
                    sensors=None, title: str = "", metadata: dict | None = None) -> None:
    reference = np.asarray(reference, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if reference.shape != (N_X, N_T) or prediction.shape != (N_X, N_T):
        raise ValueError("triptych fields must be 101 x 101")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    error = np.abs(reference - prediction)
    blob = np.concatenate([reference.ravel(), prediction.ravel(), error.ravel()])
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(blob.astype("<f8").tobytes())
    doc = {
        "format_version": 1,
        "file": bin_path.name,
        "shape": [3, N_X, N_T],
        "panels": ["reference", "prediction", "abs_error"],
        "rel_l2": relative_l2(prediction, reference),
        "title": title,
        "sensors": [[float(a), float(b)] for a, b in (sensors or [])],
        "metadata": metadata or {},
    }
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_triptych(path):
    """Returns (manifest, arrays (3, 101, 101)) without validating contents."""
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer((path.parent / doc["file"]).read_bytes(), dtype="<f8")
    arrays = blob.reshape(tuple(doc["shape"]))
    return doc, arrays
