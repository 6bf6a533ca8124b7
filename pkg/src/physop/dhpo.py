"""Joint training of a DeepONet and a hidden-physics network.

The operator maps an input function (source term or initial condition)
to the solution field while a small MLP learns the unknown right-hand
side N(u, u_x, u_xx).  Both are optimized together under a four-part
loss: initial condition, boundary condition, PDE residual at fresh
Latin-hypercube collocation points, and sparse labeled data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import autodiff as ad
from . import function_spaces as fs
from .nets import HiddenPhysicsNet, MlpSpec, OperatorModel, mlp_param_arrays
from .pde_oracles import FieldGrid, SystemParams, solve_burgers, solve_reaction_diffusion

TRACE_COLUMNS = ("iteration", "L_ic", "L_bc", "L_eqn", "L_data", "L_total")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


@dataclass
class DhpoConfig:
    system: str                    # "rd" | "burgers"
    branch: MlpSpec
    trunk: MlpSpec
    hidden: MlpSpec
    n_train: int = 100
    n_test: int = 50
    n_d: int = 200
    n_coll: int = 2000
    n_ic: int = 200
    n_bc: int = 250
    batch_size: int = 10
    learning_rate: float = 1e-4
    iterations: int = 10_000
    loss_tolerance: float = 1e-3
    family: str = "sine"
    grf_length_scale: float = 0.2
    params: SystemParams = field(default_factory=lambda: SystemParams(d=0.01, k=0.01))
    seed: int = 0

    def __post_init__(self):
        if self.system not in ("rd", "burgers"):
            raise ValueError(f"unknown system '{self.system}'")
        counts = (self.n_train, self.n_test, self.n_d, self.n_coll,
                  self.n_ic, self.n_bc, self.batch_size, self.iterations)
        if any(c < 1 for c in counts):
            raise ValueError("all counts must be positive")
        if self.batch_size > self.n_train:
            raise ValueError("batch size cannot exceed the training-set size")
        if self.loss_tolerance <= 0:
            raise ValueError("loss tolerance must be positive")

    @property
    def has_source(self) -> bool:
        # The input function is a source term for reaction-diffusion and
        # an initial condition for Burgers.
        return self.system == "rd"


def rd_config(**overrides) -> DhpoConfig:
    """Reaction-diffusion defaults (architectures and counts per the benchmark)."""
    cfg = DhpoConfig(
        system="rd",
        branch=MlpSpec((101, 128, 128, 128, 50), "relu"),
        trunk=MlpSpec((2, 128, 128, 128, 50), "tanh"),
        hidden=MlpSpec((3, 128, 128, 128, 1), "tanh"),
        n_coll=2000, n_ic=200, n_bc=250,
        batch_size=10, learning_rate=1e-4, iterations=10_000,
        family="sine",
        params=SystemParams(d=0.01, k=0.01),
    )
    return replace(cfg, **overrides) if overrides else cfg


def burgers_config(**overrides) -> DhpoConfig:
    """Burgers defaults: deeper operator nets, batch size 1, GRF initial conditions."""
    cfg = DhpoConfig(
        system="burgers",
        branch=MlpSpec((101, 128, 128, 128, 128, 50), "relu"),
        trunk=MlpSpec((2, 128, 128, 128, 128, 50), "tanh"),
        hidden=MlpSpec((3, 256, 256, 256, 1), "tanh"),
        batch_size=1, learning_rate=1e-4, iterations=10_000,
        family="grf",
        params=SystemParams(nu=0.01),
    )
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class LabeledData:
    """Fixed (x, t, u) triples subsampled from one solution grid."""

    points: np.ndarray  # (n_d, 2) on grid nodes
    values: np.ndarray  # (n_d,)
    seed: int


def subsample_labels(grid: FieldGrid, n_d: int, seed: int) -> LabeledData:
    """Uniform draw without replacement from interior grid nodes.

    Boundary columns/rows are excluded; those constraints are already
    covered by the IC/BC loss terms.
    """
    rng = np.random.default_rng(seed)
    ni, nj = grid.values.shape[0] - 2, grid.values.shape[1] - 1
    if n_d > ni * nj:
        raise ValueError(f"n_d={n_d} exceeds the {ni * nj} interior nodes")
    flat = rng.choice(ni * nj, size=n_d, replace=False)
    i = flat // nj + 1
    j = flat % nj + 1
    points = np.column_stack([i * grid.dx, j * grid.dt])
    return LabeledData(points, grid.values[i, j].copy(), seed)


@dataclass
class DhpoSample:
    fn: fs.FunctionSample
    grid: FieldGrid
    labels: LabeledData | None = None


@dataclass
class DhpoDataset:
    system: str
    train: list
    test: list  # (FunctionSample, FieldGrid) pairs


def derived_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _solve(config: DhpoConfig, sample: fs.FunctionSample) -> FieldGrid:
    if config.system == "rd":
        return solve_reaction_diffusion(sample, config.params)
    return solve_burgers(sample, config.params)


def build_dataset(config: DhpoConfig) -> DhpoDataset:
    """Generate train/test samples by solving the configured system."""
    spec = fs.GrfSpec(config.grf_length_scale)
    train, test = [], []
    for i in range(config.n_train + config.n_test):
        fn = fs.sample_family(config.family, derived_seed(config.seed, 1, i), spec)
        grid = _solve(config, fn)
        if i < config.n_train:
            labels = subsample_labels(grid, config.n_d, derived_seed(config.seed, 2, i))
            train.append(DhpoSample(fn, grid, labels))
        else:
            test.append((fn, grid))
    return DhpoDataset(config.system, train, test)


# ---------------------------------------------------------------------------
# Loss graph


@dataclass
class DhpoLossGraph:
    """The four loss terms and their sum, over leaves rebound every step.

    The batch dimension is carried as matrix columns: ``U`` at the
    collocation points has shape (n_coll, batch).  Per-sample labeled
    points are stacked row-wise in sample order.
    """

    config: DhpoConfig
    model: OperatorModel
    hidden: HiddenPhysicsNet
    l_ic: ad.Expr
    l_bc: ad.Expr
    l_eqn: ad.Expr
    l_data: ad.Expr
    l_total: ad.Expr

    @classmethod
    def build(cls, config: DhpoConfig, model: OperatorModel,
              hidden: HiddenPhysicsNet) -> "DhpoLossGraph":
        b = config.batch_size
        f_batch = ad.input_leaf("f_batch", (b, model.m_sensors))
        branch_t = ad.transpose(model.branch_graph(f_batch))  # (p, b)
        bias = model.bias_leaf()

        # PDE residual at shared collocation points
        xc = ad.input_leaf("xc", (None, 1))
        tc = ad.input_leaf("tc", (None, 1))
        trunk_c = model.trunk_graph(ad.hstack([xc, tc]))
        trunk_cx = ad.tangent(trunk_c, xc)
        u = ad.add(ad.dot(trunk_c, branch_t), bias)
        u_x = ad.dot(trunk_cx, branch_t)
        u_xx = ad.dot(ad.tangent(trunk_cx, xc), branch_t)
        u_t = ad.dot(ad.tangent(trunk_c, tc), branch_t)
        channels = [ad.flatten_cols(c) for c in (u, u_x, u_xx)]
        n_mat = ad.unflatten_cols(hidden.graph(channels), b)
        residual = u_t - n_mat
        if config.has_source:
            residual = residual - ad.input_leaf("f_coll", (None, b))
        l_eqn = ad.sum_(ad.square(residual)) * (1.0 / (config.n_coll * b))

        # initial condition
        x_ic = ad.input_leaf("x_ic", (None, 1))
        trunk_ic = model.trunk_graph(ad.hstack([x_ic, ad.zeros_like(x_ic)]))
        u_ic = ad.add(ad.dot(trunk_ic, branch_t), bias)
        if config.system == "rd":
            mismatch_ic = u_ic  # u(x, 0) = 0
        else:
            mismatch_ic = u_ic - ad.input_leaf("u_ic", (None, b))
        l_ic = ad.sum_(ad.square(mismatch_ic)) * (1.0 / (config.n_ic * b))

        # boundary condition
        t_bc = ad.input_leaf("t_bc", (None, 1))
        if config.system == "rd":
            u_b0 = ad.add(ad.dot(model.trunk_graph(
                ad.hstack([ad.zeros_like(t_bc), t_bc])), branch_t), bias)
            u_b1 = ad.add(ad.dot(model.trunk_graph(
                ad.hstack([ad.ones_like(t_bc), t_bc])), branch_t), bias)
            l_bc = (ad.sum_(ad.square(u_b0)) + ad.sum_(ad.square(u_b1))) \
                * (1.0 / (config.n_bc * b))
        else:
            # periodic: match value and slope across x = 0 and x = 1
            xb0 = ad.input_leaf("xb0", (None, 1))
            xb1 = ad.input_leaf("xb1", (None, 1))
            trunk_b0 = model.trunk_graph(ad.hstack([xb0, t_bc]))
            trunk_b1 = model.trunk_graph(ad.hstack([xb1, t_bc]))
            du = ad.dot(trunk_b0, branch_t) - ad.dot(trunk_b1, branch_t)
            dux = ad.dot(ad.tangent(trunk_b0, xb0), branch_t) \
                - ad.dot(ad.tangent(trunk_b1, xb1), branch_t)
            l_bc = (ad.sum_(ad.square(du)) + ad.sum_(ad.square(dux))) \
                * (1.0 / (config.n_bc * b))

        # sparse labeled data, sample blocks stacked row-wise
        xd = ad.input_leaf("xd", (None, 1))
        td = ad.input_leaf("td", (None, 1))
        ud = ad.input_leaf("ud", (None, 1))
        trunk_d = model.trunk_graph(ad.hstack([xd, td]))
        select = np.kron(np.eye(b), np.ones((config.n_d, 1)))
        b_rows = ad.dot(ad.constant(select), ad.transpose(branch_t))
        u_d = ad.add(ad.sum_(ad.mul(trunk_d, b_rows), axis=1), bias)
        l_data = ad.sum_(ad.square(u_d - ud)) * (1.0 / (config.n_d * b))

        l_total = ad.add(ad.add(l_ic, l_bc), ad.add(l_eqn, l_data))
        return cls(config, model, hidden, l_ic, l_bc, l_eqn, l_data, l_total)

    def bindings(self, points: fs.PointSet, f_batch: np.ndarray,
                 data_points: np.ndarray, data_values: np.ndarray,
                 f_coll: np.ndarray | None = None,
                 u_ic: np.ndarray | None = None) -> dict:
        out = {
            "xc": points.coll[:, :1], "tc": points.coll[:, 1:],
            "x_ic": points.ic_x.reshape(-1, 1),
            "t_bc": points.bc_t.reshape(-1, 1),
            "f_batch": f_batch,
            "xd": data_points[:, :1], "td": data_points[:, 1:],
            "ud": data_values.reshape(-1, 1),
            **self.model.store.to_bindings(),
        }
        if self.config.has_source:
            out["f_coll"] = f_coll
        if self.config.system == "burgers":
            out["u_ic"] = u_ic
            n_bc = points.bc_t.size
            out["xb0"] = np.zeros((n_bc, 1))
            out["xb1"] = np.ones((n_bc, 1))
        return out


# ---------------------------------------------------------------------------
# Trainer


def batch_indices(seed: int, n_train: int, batch_size: int, step: int) -> np.ndarray:
    """Batch for one gradient step, cycling shuffled epochs statelessly."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, pos = divmod(start, n_train)
        order = np.random.default_rng([seed, 3, epoch]).permutation(n_train)
        take = min(batch_size - len(out), n_train - pos)
        out.extend(order[pos : pos + take])
        start += take
    return np.asarray(out)


class DhpoTrainer:
    """Runs the joint optimization; one instance is one training job."""

    def __init__(self, config: DhpoConfig, dataset: DhpoDataset):
        if dataset.system != config.system:
            raise ValueError(
                f"dataset is for '{dataset.system}', config wants '{config.system}'")
        if len(dataset.train) < config.n_train:
            raise ValueError("dataset has fewer training samples than configured")
        self.config = config
        self.dataset = dataset
        arrays = mlp_param_arrays(config.branch, "branch", derived_seed(config.seed, 10))
        arrays.update(mlp_param_arrays(config.trunk, "trunk", derived_seed(config.seed, 11)))
        arrays["b0"] = np.zeros((1, 1))
        arrays.update(mlp_param_arrays(config.hidden, "aux", derived_seed(config.seed, 12)))
        self.store = ad.ParamStore(arrays)
        self.model = OperatorModel(config.branch, config.trunk, self.store)
        self.hidden = HiddenPhysicsNet(config.hidden, self.store)
        self.graph = DhpoLossGraph.build(config, self.model, self.hidden)
        self.param_leaves = self.store.leaves()
        self.grad_exprs = ad.grad(self.graph.l_total, self.param_leaves)
        self.targets = [self.graph.l_ic, self.graph.l_bc, self.graph.l_eqn,
                        self.graph.l_data, self.graph.l_total, *self.grad_exprs]
        self._splines = [CubicSpline(s.fn.abscissae, s.fn.values)
                         for s in dataset.train]
        self.trace: list = []
        self.step_count = 0

    def _step_bindings(self, step: int) -> dict:
        cfg = self.config
        points = fs.lhs_points(derived_seed(cfg.seed, 4, step),
                               cfg.n_coll, cfg.n_ic, cfg.n_bc)
        idx = batch_indices(cfg.seed, cfg.n_train, cfg.batch_size, step)
        samples = [self.dataset.train[i] for i in idx]
        f_batch = np.stack([s.fn.values for s in samples])
        data_points = np.concatenate([s.labels.points for s in samples])
        data_values = np.concatenate([s.labels.values for s in samples])
        f_coll = u_ic = None
        if cfg.has_source:
            f_coll = np.column_stack([self._splines[i](points.coll[:, 0]) for i in idx])
        if cfg.system == "burgers":
            u_ic = np.column_stack([self._splines[i](points.ic_x) for i in idx])
        return self.graph.bindings(points, f_batch, data_points, data_values,
                                   f_coll=f_coll, u_ic=u_ic)

    def step(self) -> dict:
        bindings = self._step_bindings(self.step_count)
        outs = ad.evaluate_many(self.targets, bindings)
        losses = {
            "L_ic": float(outs[0][0, 0]), "L_bc": float(outs[1][0, 0]),
            "L_eqn": float(outs[2][0, 0]), "L_data": float(outs[3][0, 0]),
            "L_total": float(outs[4][0, 0]),
        }
        if not np.isfinite(losses["L_total"]):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count}",
                snapshot={"step": self.step_count, **losses})
        grads = self.store.flatten(
            {leaf.name: arr for leaf, arr in zip(self.param_leaves, outs[5:])})
        ad.adam_step(self.store, grads, self.config.learning_rate)
        self.trace.append((self.step_count, losses["L_ic"], losses["L_bc"],
                           losses["L_eqn"], losses["L_data"], losses["L_total"]))
        self.step_count += 1
        return losses

    def train(self, callback=None) -> dict:
        while self.step_count < self.config.iterations:
            losses = self.step()
            if callback is not None:
                callback(self, losses)
            if losses["L_total"] < self.config.loss_tolerance:
                break
        return {"model": self.model, "hidden": self.hidden, "trace": self.trace,
                "steps": self.step_count}

    def state_dict(self) -> dict:
        return {"store": self.store.state_dict(), "step": self.step_count,
                "trace": list(self.trace)}

    def load_state(self, state: dict) -> None:
        self.store.load_state(state["store"])
        self.step_count = int(state["step"])
        self.trace = [tuple(row) for row in state["trace"]]


def write_trace(path, trace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(TRACE_COLUMNS)]
    for row in trace:
        lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
    path.write_text("\n".join(lines) + "\n")


def read_trace(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {header}")
        for line in fh:
            rows.append([float(v) for v in line.strip().split(",")])
    return np.asarray(rows)
