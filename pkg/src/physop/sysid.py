"""Two-stage identification of a PDE coefficient from sparse sensors.

Stage 1 trains a DeepONet to reconstruct the solution field from its
own values at 300 fixed sensor locations (branch input = the sensor
vector, loss defined at the sensors only).  Stage 2 warm-starts from
that operator and jointly trains it with a parameter network mapping
the sensor vector to the unknown coefficient, under a PDE residual
penalty at fresh collocation points plus the sensor data loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from . import function_spaces as fs
from .dhpo import TrainingDiverged, batch_indices, derived_seed
from .nets import MlpSpec, OperatorModel, mlp_graph, mlp_param_arrays
from .pde_oracles import (
    FieldGrid,
    SystemParams,
    solve_burgers,
    solve_reaction_diffusion,
)

SYSID_TRACE_COLUMNS = ("iteration", "L_pde", "L_data", "L_total")


@dataclass
class SensorLayout:
    """n fixed (x, t) grid nodes shared by every train and test sample."""

    indices: np.ndarray  # (n, 2) integer (i, j) grid indices
    seed: int

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def points(self) -> np.ndarray:
        return self.indices * np.array([0.01, 0.01])

    def values(self, grid: FieldGrid) -> np.ndarray:
        return grid.values[self.indices[:, 0], self.indices[:, 1]].copy()

    def to_json(self) -> dict:
        return {"seed": self.seed, "indices": self.indices.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SensorLayout":
        return cls(np.asarray(obj["indices"], dtype=int), int(obj["seed"]))


def sample_sensor_layout(seed: int, n: int = 300) -> SensorLayout:
    rng = np.random.default_rng(seed)
    flat = rng.choice(101 * 101, size=n, replace=False)
    return SensorLayout(np.column_stack([flat // 101, flat % 101]), seed)


@dataclass
class SysidConfig:
    system: str
    branch: MlpSpec
    trunk: MlpSpec
    pnet: MlpSpec
    n_sensors: int = 300
    param_range: tuple = (0.01, 0.05)
    n_param_values: int = 500
    n_functions_per_param: int = 20
    n_train: int = 8500
    n_test: int = 1500
    n_coll: int = 2500
    lambda_coll: float = 1.0
    lr0: float = 1e-3
    decay_rate: float = 0.9
    decay_every: int = 1000
    stage1_iterations: int = 20_000
    stage2_iterations: int = 80_000
    batch_size: int = 2500
    family: str = "grf"
    grf_length_scale: float = 0.2
    k_fixed: float = 0.01  # reaction coefficient held fixed when identifying D
    seed: int = 0

    def __post_init__(self):
        if self.system not in ("rd", "burgers"):
            raise ValueError(f"unknown system '{self.system}'")
        if self.n_param_values * self.n_functions_per_param != self.n_train + self.n_test:
            raise ValueError("train/test split must cover the parameter-function grid")
        if self.lambda_coll <= 0:
            raise ValueError("collocation penalty must be positive")
        if self.batch_size > self.n_train:
            raise ValueError("batch size cannot exceed the training-set size")
        if self.branch.n_in != self.n_sensors or self.pnet.n_in != self.n_sensors:
            raise ValueError("branch and parameter nets must take the sensor vector")

    def lr_at(self, step: int) -> float:
        return self.lr0 * self.decay_rate ** (step / self.decay_every)


def rd_sysid_config(**overrides) -> SysidConfig:
    cfg = SysidConfig(
        system="rd",
        branch=MlpSpec((300, 64, 64, 64, 100), "tanh"),
        trunk=MlpSpec((2, 64, 64, 64, 100), "tanh"),
        pnet=MlpSpec((300, 64, 64, 64, 1), "tanh"),
        lambda_coll=10.0,
        batch_size=3500,
    )
    return replace(cfg, **overrides) if overrides else cfg


def burgers_sysid_config(**overrides) -> SysidConfig:
    cfg = SysidConfig(
        system="burgers",
        branch=MlpSpec((300, 64, 64, 64, 100), "tanh"),
        trunk=MlpSpec((2, 64, 64, 64, 100), "tanh"),
        pnet=MlpSpec((300, 64, 64, 64, 1), "tanh"),
        lambda_coll=1.0,
        batch_size=2500,
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class SysidSample:
    fn: fs.FunctionSample
    grid: FieldGrid
    xi: float
    sensors: np.ndarray


@dataclass
class SysidDataset:
    system: str
    layout: SensorLayout
    train: list
    test: list


def build_sysid_dataset(config: SysidConfig) -> SysidDataset:
    """Parameter sweep times input-function sweep, split at random.

    Parameter values are evenly spread over the configured range; each
    is paired with fresh GRF input functions.
    """
    layout = sample_sensor_layout(derived_seed(config.seed, 20), config.n_sensors)
    xis = np.linspace(*config.param_range, config.n_param_values)
    spec = fs.GrfSpec(config.grf_length_scale)
    samples = []
    for a, xi in enumerate(xis):
        for b in range(config.n_functions_per_param):
            fn = fs.sample_family(config.family, derived_seed(config.seed, 21, a, b), spec)
            if config.system == "rd":
                grid = solve_reaction_diffusion(fn, SystemParams(d=xi, k=config.k_fixed))
            else:
                grid = solve_burgers(fn, SystemParams(nu=xi))
            samples.append(SysidSample(fn, grid, float(xi), layout.values(grid)))
    order = np.random.default_rng(derived_seed(config.seed, 22)).permutation(len(samples))
    train = [samples[i] for i in order[: config.n_train]]
    test = [samples[i] for i in order[config.n_train :]]
    return SysidDataset(config.system, layout, train, test)


# ---------------------------------------------------------------------------
# Parameter network


@dataclass
class ParameterNet:
    """Maps the 300-value sensor vector to a positive scalar coefficient."""

    spec: MlpSpec
    store: ad.ParamStore
    prefix: str = "pnet"

    @classmethod
    def create(cls, spec: MlpSpec, seed: int,
               init_output: float | None = None) -> "ParameterNet":
        arrays = mlp_param_arrays(spec, "pnet", seed)
        if init_output is not None:
            # start the softplus output at the expected coefficient scale
            # instead of softplus(0) ~ 0.69, which sits far outside the
            # physical range and destabilizes the joint physics loss
            last = len(spec.widths) - 2
            arrays[f"pnet.b{last}"][:] = np.log(np.expm1(init_output))
        return cls(spec, ad.ParamStore(arrays))

    def graph(self, sensor_rows: ad.Expr) -> ad.Expr:
        # softplus keeps the physical coefficient strictly positive
        return ad.softplus(mlp_graph(self.spec, sensor_rows, self.prefix))


def predict_parameter(net: ParameterNet, sensors) -> float:
    sensors = np.asarray(sensors, dtype=np.float64).ravel()
    if sensors.size != net.spec.n_in:
        raise ad.ShapeError(
            f"expected {net.spec.n_in} sensor values, got {sensors.size}")
    leaf = ad.input_leaf("sensors", (1, net.spec.n_in))
    out = net.graph(leaf)
    return ad.evaluate(out, {"sensors": sensors.reshape(1, -1),
                             **net.store.to_bindings()})


# ---------------------------------------------------------------------------
# Stage 1: data-driven reconstruction from sensors


class Stage1Trainer:
    """Fits the operator to reproduce its input sensors at their locations."""

    def __init__(self, config: SysidConfig, dataset: SysidDataset):
        if dataset.system != config.system:
            raise ValueError("dataset/config system mismatch")
        self.config = config
        self.dataset = dataset
        arrays = mlp_param_arrays(config.branch, "branch", derived_seed(config.seed, 30))
        arrays.update(mlp_param_arrays(config.trunk, "trunk", derived_seed(config.seed, 31)))
        arrays["b0"] = np.zeros((1, 1))
        self.store = ad.ParamStore(arrays)
        self.model = OperatorModel(config.branch, config.trunk, self.store)
        self.loss, self._leaves = _sensor_loss_graph(self.model, dataset.layout)
        self.param_leaves = self.store.leaves()
        self.grad_exprs = ad.grad(self.loss, self.param_leaves)
        self._sensor_rows = np.stack([s.sensors for s in dataset.train])
        self.trace: list = []
        self.step_count = 0

    def _bindings(self, rows: np.ndarray) -> dict:
        return {"f_sens": rows, "u_sens": rows.T,
                "inv_data": 1.0 / rows.size,
                **self.store.to_bindings()}

    def step(self) -> float:
        idx = batch_indices(self.config.seed, len(self.dataset.train),
                            self.config.batch_size, self.step_count)
        outs = ad.evaluate_many([self.loss, *self.grad_exprs],
                                self._bindings(self._sensor_rows[idx]))
        loss = float(outs[0][0, 0])
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite stage-1 loss at step {self.step_count}",
                                   snapshot={"step": self.step_count, "L_data": loss})
        grads = self.store.flatten(
            {leaf.name: arr for leaf, arr in zip(self.param_leaves, outs[1:])})
        ad.adam_step(self.store, grads, self.config.lr_at(self.step_count))
        self.trace.append((self.step_count, loss))
        self.step_count += 1
        return loss

    def full_train_loss(self) -> float:
        return float(ad.evaluate(self.loss, self._bindings(self._sensor_rows)))

    def train(self, iterations: int | None = None, callback=None) -> dict:
        total = self.config.stage1_iterations if iterations is None else iterations
        while self.step_count < total:
            loss = self.step()
            if callback is not None:
                callback(self, loss)
        return {"model": self.model, "trace": self.trace,
                "final_full_loss": self.full_train_loss()}


def _sensor_loss_graph(model: OperatorModel, layout: SensorLayout):
    """Mean squared reconstruction error at the sensor locations only."""
    f_sens = ad.input_leaf("f_sens", (None, model.m_sensors))
    u_sens = ad.input_leaf("u_sens", (layout.n, None))
    inv = ad.input_leaf("inv_data", (1, 1))
    branch_t = ad.transpose(model.branch_graph(f_sens))
    trunk_s = model.trunk_graph(ad.constant(layout.points))
    pred = ad.add(ad.dot(trunk_s, branch_t), model.bias_leaf())
    loss = ad.mul(ad.sum_(ad.square(pred - u_sens)), inv)
    return loss, {"f_sens": f_sens, "u_sens": u_sens}


# ---------------------------------------------------------------------------
# Stage 2: joint refinement with the parameter network


class Stage2Trainer:
    """Warm-started joint training over physics and sensor-data losses."""

    def __init__(self, config: SysidConfig, dataset: SysidDataset,
                 stage1_params: dict):
        if dataset.system != config.system:
            raise ValueError("dataset/config system mismatch")
        for prefix in ("branch", "trunk"):
            if not any(name.startswith(prefix) for name in stage1_params):
                raise ValueError(f"stage-1 checkpoint is missing the {prefix} network")
        self.config = config
        self.dataset = dataset
        arrays = dict(stage1_params)
        mid = 0.5 * (config.param_range[0] + config.param_range[1])
        pnet_init = ParameterNet.create(config.pnet, derived_seed(config.seed, 32),
                                        init_output=mid)
        arrays.update({n: pnet_init.store.get(n).copy() for n in pnet_init.store.names()})
        self.store = ad.ParamStore(arrays)
        self.model = OperatorModel(config.branch, config.trunk, self.store)
        self.pnet = ParameterNet(config.pnet, self.store)
        self._build_graph()
        self.param_leaves = self.store.leaves()
        self.grad_exprs = ad.grad(self.l_total, self.param_leaves)
        self.targets = [self.l_pde, self.l_data, self.l_total, *self.grad_exprs]
        self._sensor_rows = np.stack([s.sensors for s in dataset.train])
        self._splines = ([CubicSpline(s.fn.abscissae, s.fn.values)
                          for s in dataset.train] if config.system == "rd" else None)
        self.trace: list = []
        self.step_count = 0

    def _build_graph(self) -> None:
        cfg = self.config
        model = self.model
        f_sens = ad.input_leaf("f_sens", (None, model.m_sensors))
        u_sens = ad.input_leaf("u_sens", (self.dataset.layout.n, None))
        inv_data = ad.input_leaf("inv_data", (1, 1))
        inv_pde = ad.input_leaf("inv_pde", (1, 1))
        branch_t = ad.transpose(model.branch_graph(f_sens))
        bias = model.bias_leaf()

        trunk_s = model.trunk_graph(ad.constant(self.dataset.layout.points))
        pred_s = ad.add(ad.dot(trunk_s, branch_t), bias)
        self.l_data = ad.mul(ad.sum_(ad.square(pred_s - u_sens)), inv_data)

        xc = ad.input_leaf("xc", (None, 1))
        tc = ad.input_leaf("tc", (None, 1))
        trunk_c = model.trunk_graph(ad.hstack([xc, tc]))
        trunk_cx = ad.tangent(trunk_c, xc)
        u = ad.add(ad.dot(trunk_c, branch_t), bias)
        u_x = ad.dot(trunk_cx, branch_t)
        u_xx = ad.dot(ad.tangent(trunk_cx, xc), branch_t)
        u_t = ad.dot(ad.tangent(trunk_c, tc), branch_t)
        xi_row = ad.transpose(self.pnet.graph(f_sens))  # (1, batch)
        if cfg.system == "rd":
            f_coll = ad.input_leaf("f_coll", (None, None))
            residual = u_t - ad.mul(u_xx, xi_row) \
                - ad.mul(ad.constant(cfg.k_fixed), ad.square(u)) - f_coll
        else:
            residual = u_t - ad.mul(u_xx, xi_row) + ad.mul(u, u_x)
        self.l_pde = ad.mul(ad.sum_(ad.square(residual)), inv_pde)
        self.l_total = ad.add(ad.mul(ad.constant(cfg.lambda_coll), self.l_pde),
                              self.l_data)

    def _bindings(self, idx: np.ndarray, step: int) -> dict:
        cfg = self.config
        rows = self._sensor_rows[idx]
        points = fs.lhs_points(derived_seed(cfg.seed, 33, step), cfg.n_coll, 1, 1)
        out = {
            "f_sens": rows, "u_sens": rows.T,
            "inv_data": 1.0 / rows.size,
            "inv_pde": 1.0 / (cfg.n_coll * len(idx)),
            "xc": points.coll[:, :1], "tc": points.coll[:, 1:],
            **self.store.to_bindings(),
        }
        if cfg.system == "rd":
            out["f_coll"] = np.column_stack(
                [self._splines[i](points.coll[:, 0]) for i in idx])
        return out

    def initial_data_loss(self) -> float:
        """Sensor loss over the full training set before any stage-2 update."""
        idx = np.arange(len(self.dataset.train))
        return float(ad.evaluate(self.l_data, self._bindings(idx, 0)))

    def step(self) -> dict:
        idx = batch_indices(self.config.seed, len(self.dataset.train),
                            self.config.batch_size, self.step_count)
        outs = ad.evaluate_many(self.targets, self._bindings(idx, self.step_count))
        losses = {"L_pde": float(outs[0][0, 0]), "L_data": float(outs[1][0, 0]),
                  "L_total": float(outs[2][0, 0])}
        if not np.isfinite(losses["L_total"]):
            raise TrainingDiverged(
                f"non-finite stage-2 loss at step {self.step_count}",
                snapshot={"step": self.step_count, **losses})
        grads = self.store.flatten(
            {leaf.name: arr for leaf, arr in zip(self.param_leaves, outs[3:])})
        ad.adam_step(self.store, grads, self.config.lr_at(self.step_count))
        self.trace.append((self.step_count, losses["L_pde"], losses["L_data"],
                           losses["L_total"]))
        self.step_count += 1
        return losses

    def train(self, iterations: int | None = None, callback=None) -> dict:
        total = self.config.stage2_iterations if iterations is None else iterations
        while self.step_count < total:
            losses = self.step()
            if callback is not None:
                callback(self, losses)
        return {"model": self.model, "pnet": self.pnet, "trace": self.trace}

    def predict_xi(self, sensors) -> float:
        return predict_parameter(self.pnet, sensors)

    def state_dict(self) -> dict:
        return {"store": self.store.state_dict(), "step": self.step_count,
                "trace": list(self.trace)}

    def load_state(self, state: dict) -> None:
        self.store.load_state(state["store"])
        self.step_count = int(state["step"])
        self.trace = [tuple(row) for row in state["trace"]]


def write_sysid_trace(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SYSID_TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
    path.write_text("\n".join(lines) + "\n")
