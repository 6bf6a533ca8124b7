"""MLP and DeepONet graph builders, parameter initialization, checkpoints.

A DeepONet prediction is u(x,t) = sum_k branch_k(f) * trunk_k(x,t) + b0,
with the branch encoding an input function sampled at fixed sensors and
the trunk encoding query coordinates.  All networks are expression
graphs from :mod:`physop.autodiff`, so spatial/temporal derivatives of
the prediction are themselves differentiable expressions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus the hidden activation (output layer is linear)."""

    widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def to_json(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation}

    @classmethod
    def from_json(cls, obj: dict) -> "MlpSpec":
        return cls(tuple(obj["widths"]), obj["activation"])


def mlp_param_arrays(spec: MlpSpec, prefix: str, seed: int) -> dict:
    """Glorot-uniform weights and zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (nin, nout) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = np.sqrt(6.0 / (nin + nout))
        arrays[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(nin, nout))
        arrays[f"{prefix}.b{i}"] = np.zeros((1, nout))
    return arrays


def init_parameters(spec: MlpSpec, seed: int) -> np.ndarray:
    """Flat parameter vector for one MLP (layer order: W0, b0, W1, ...)."""
    arrays = mlp_param_arrays(spec, "mlp", seed)
    return np.concatenate([arrays[k].ravel() for k in arrays])


def mlp_graph(spec: MlpSpec, x: ad.Expr, prefix: str) -> ad.Expr:
    """Forward graph of an MLP applied row-wise to ``x`` (rows, n_in)."""
    if x.shape[1] != spec.n_in:
        raise ad.ShapeError(
            f"MLP '{prefix}' expects {spec.n_in} input columns, got {x.shape[1]}")
    act = ACTIVATIONS[spec.activation]
    h = x
    last = len(spec.widths) - 2
    for i, (nin, nout) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        w = ad.param_leaf(f"{prefix}.W{i}", (nin, nout))
        b = ad.param_leaf(f"{prefix}.b{i}", (1, nout))
        h = ad.add(ad.dot(h, w), b)
        if i < last:
            h = act(h)
    return h


@dataclass
class OperatorModel:
    """Branch + trunk networks sharing a parameter store, plus output bias b0."""

    branch: MlpSpec
    trunk: MlpSpec
    store: ad.ParamStore
    branch_prefix: str = "branch"
    trunk_prefix: str = "trunk"
    bias_name: str = "b0"

    def __post_init__(self):
        if self.branch.n_out != self.trunk.n_out:
            raise ValueError(
                f"branch/trunk output widths differ: {self.branch.n_out} vs {self.trunk.n_out}")
        if self.trunk.n_in != 2:
            raise ValueError("trunk input must be (x, t)")
        # The trunk is differentiated w.r.t. its inputs, so a kinked
        # activation is not allowed there; ReLU may only sit in the branch.
        if self.trunk.activation != "tanh":
            raise ValueError("trunk activation must be tanh (it is differentiated in x, t)")

    @property
    def p(self) -> int:
        return self.trunk.n_out

    @property
    def m_sensors(self) -> int:
        return self.branch.n_in

    @classmethod
    def create(cls, branch: MlpSpec, trunk: MlpSpec, seed: int) -> "OperatorModel":
        arrays = mlp_param_arrays(branch, "branch", seed)
        arrays.update(mlp_param_arrays(trunk, "trunk", seed + 1))
        arrays["b0"] = np.zeros((1, 1))
        return cls(branch, trunk, ad.ParamStore(arrays))

    def branch_graph(self, f_rows: ad.Expr) -> ad.Expr:
        return mlp_graph(self.branch, f_rows, self.branch_prefix)

    def trunk_graph(self, xt: ad.Expr) -> ad.Expr:
        return mlp_graph(self.trunk, xt, self.trunk_prefix)

    def bias_leaf(self) -> ad.Expr:
        return self.store.leaf(self.bias_name)

    def u_graph(self, branch_out: ad.Expr, trunk_out: ad.Expr) -> ad.Expr:
        """(n, k) predictions for k branch rows at n trunk rows."""
        return ad.add(ad.dot(trunk_out, ad.transpose(branch_out)), self.bias_leaf())

    def predict(self, f_values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """u at (n, 2) query points for one input function (m sensor values)."""
        return self.predict_batch(np.asarray(f_values).reshape(1, -1), points)[:, 0]

    def predict_batch(self, f_rows: np.ndarray, points: np.ndarray) -> np.ndarray:
        f_rows = np.asarray(f_rows, dtype=np.float64)
        if f_rows.shape[1] != self.m_sensors:
            raise ad.ShapeError(
                f"expected {self.m_sensors} sensor values, got {f_rows.shape[1]}")
        f_in = ad.input_leaf("f_rows", (None, self.m_sensors))
        xt = ad.input_leaf("xt", (None, 2))
        u = self.u_graph(self.branch_graph(f_in), self.trunk_graph(xt))
        bindings = {"f_rows": f_rows, "xt": np.asarray(points, dtype=np.float64),
                    **self.store.to_bindings()}
        return ad.evaluate_many([u], bindings)[0]


@dataclass
class PointOperator:
    """u(x, t) for one fixed input function, with live x/t leaves.

    ``u`` and every derivative are expressions over leaves ``x`` and
    ``t`` (single columns, so they evaluate at many points at once) plus
    the model parameters.
    """

    model: OperatorModel
    u: ad.Expr
    x: ad.Expr
    t: ad.Expr
    _cache: dict = field(default_factory=dict)

    def derivative(self, var: str = "x", order: int = 1) -> ad.Expr:
        if var not in ("x", "t"):
            raise ValueError(f"var must be 'x' or 't', got {var!r}")
        if order not in (1, 2):
            raise ValueError(f"derivative order must be 1 or 2, got {order}")
        key = (var, order)
        if key not in self._cache:
            leaf = self.x if var == "x" else self.t
            expr = self.u
            for _ in range(order):
                expr = ad.tangent(expr, leaf)
            self._cache[key] = expr
        return self._cache[key]

    def bindings(self, xs, ts) -> dict:
        return {"x": np.asarray(xs, dtype=np.float64).reshape(-1, 1),
                "t": np.asarray(ts, dtype=np.float64).reshape(-1, 1),
                **self.model.store.to_bindings()}

    def value(self, xs, ts) -> np.ndarray:
        out = ad.evaluate_many([self.u], self.bindings(xs, ts))[0]
        return out[:, 0]

    def derivative_value(self, var, order, xs, ts) -> np.ndarray:
        out = ad.evaluate_many([self.derivative(var, order)], self.bindings(xs, ts))[0]
        return out[:, 0]


def forward_operator(model: OperatorModel, f_values) -> PointOperator:
    """Graph for u(x, t) with the input function embedded as a constant."""
    f_values = np.asarray(f_values, dtype=np.float64).ravel()
    if f_values.size != model.m_sensors:
        raise ad.ShapeError(
            f"expected {model.m_sensors} sensor values, got {f_values.size}")
    x = ad.input_leaf("x", (None, 1))
    t = ad.input_leaf("t", (None, 1))
    branch_out = model.branch_graph(ad.constant(f_values.reshape(1, -1)))
    trunk_out = model.trunk_graph(ad.hstack([x, t]))
    return PointOperator(model, model.u_graph(branch_out, trunk_out), x, t)


def spatial_derivatives(model: OperatorModel, f_values, order: int) -> PointOperator:
    """PointOperator with the requested x-derivative pre-built (order 1 or 2)."""
    op = forward_operator(model, f_values)
    op.derivative("x", order)
    return op


@dataclass
class HiddenPhysicsNet:
    """MLP approximating the unknown right-hand side from (u, u_x, u_xx).

    Each derivative channel is multiplied by a fixed scale before the
    first layer: successive spatial derivatives of an O(1) field with
    O(0.1) features grow by about a decade per order, which would
    saturate a tanh layer at initialization.  The scales are constants
    in the graph (absorbed into what the first layer can learn), so the
    represented function class is unchanged.
    """

    spec: MlpSpec
    store: ad.ParamStore
    prefix: str = "aux"
    channel_scales: tuple = (1.0, 0.1, 0.01)

    def __post_init__(self):
        if self.spec.n_out != 1:
            raise ValueError("hidden-physics network output must be scalar")
        if len(self.channel_scales) != self.spec.n_in:
            raise ValueError("one channel scale per input channel")

    @classmethod
    def create(cls, spec: MlpSpec, seed: int) -> "HiddenPhysicsNet":
        return cls(spec, ad.ParamStore(mlp_param_arrays(spec, "aux", seed)))

    def graph(self, channels) -> ad.Expr:
        """Apply the net to derivative channels (each (n, 1)) row-wise."""
        channels = list(channels)
        if len(channels) != self.spec.n_in:
            raise ad.ShapeError(
                f"hidden net expects {self.spec.n_in} channels, got {len(channels)}")
        scaled = [ad.mul(ad.constant(s), c)
                  for s, c in zip(self.channel_scales, channels)]
        return mlp_graph(self.spec, ad.hstack(scaled), self.prefix)

    def value(self, u, u_x, u_xx) -> np.ndarray:
        cols = [np.asarray(c, dtype=np.float64).reshape(-1, 1) for c in (u, u_x, u_xx)]
        ins = [ad.input_leaf(n, (None, 1)) for n in ("c_u", "c_ux", "c_uxx")]
        out = self.graph(ins)
        bindings = {"c_u": cols[0], "c_ux": cols[1], "c_uxx": cols[2],
                    **self.store.to_bindings()}
        return ad.evaluate_many([out], bindings)[0][:, 0]


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + one little-endian float64 blob per top-level
# parameter group (branch / trunk / aux / ...).

CHECKPOINT_FORMAT = 1


def _group_of(name: str) -> str:
    return name.split(".")[0]


def save_checkpoint(path, store: ad.ParamStore, manifest: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups: dict = {}
    for name in store.names():
        groups.setdefault(_group_of(name), []).append(name)
    group_meta = {}
    for group, names in groups.items():
        blob = np.concatenate([store.get(n).ravel() for n in names])
        fname = f"{group}.bin"
        (path / fname).write_bytes(blob.astype("<f8").tobytes())
        group_meta[group] = {
            "file": fname,
            "length": int(blob.size),
            "entries": [{"name": n, "shape": list(store.index[n][1])} for n in names],
        }
    adam_blob = np.concatenate([store.m, store.v])
    (path / "adam.bin").write_bytes(adam_blob.astype("<f8").tobytes())
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "groups": group_meta,
        "param_order": store.names(),
        "adam": {"file": "adam.bin", "length": int(adam_blob.size), "t": store.t},
        **manifest,
    }
    (path / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Returns (manifest, {param name: array}, adam state dict)."""
    path = Path(path)
    doc = json.loads((path / "manifest.json").read_text())
    params = {}
    for group, meta in doc["groups"].items():
        blob = np.frombuffer((path / meta["file"]).read_bytes(), dtype="<f8")
        if blob.size != meta["length"]:
            raise ValueError(f"blob '{meta['file']}' has {blob.size} values, "
                             f"manifest says {meta['length']}")
        off = 0
        for entry in meta["entries"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape))
            params[entry["name"]] = blob[off : off + size].reshape(shape).copy()
            off += size
    adam_blob = np.frombuffer((path / doc["adam"]["file"]).read_bytes(), dtype="<f8")
    half = adam_blob.size // 2
    adam = {"m": adam_blob[:half].copy(), "v": adam_blob[half:].copy(),
            "t": int(doc["adam"]["t"])}
    params = {name: params[name] for name in doc["param_order"]}
    return doc, params, adam


def restore_store(params: dict, adam: dict | None = None) -> ad.ParamStore:
    store = ad.ParamStore(params)
    if adam is not None:
        store.load_state({"theta": store.theta, "m": adam["m"], "v": adam["v"],
                          "t": adam["t"]})
    return store
