"""Experiment configs, dataset persistence, and provenance hashing.

Datasets are a JSON manifest plus little-endian float64 blobs
(``fields.bin`` holds the solution grids, ``inputs.bin`` the sampled
input functions).  Every artifact embeds the config hash and seed so
provenance can be checked end to end.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import dhpo as dhpo_mod
from . import function_spaces as fs
from . import sysid as sysid_mod
from .nets import MlpSpec
from .pde_oracles import (
    DT_OUTPUT,
    DX,
    N_T,
    N_X,
    FieldGrid,
    SystemParams,
    solve_burgers,
    solve_reaction_diffusion,
)

DATASET_FORMAT = 1
CONFIG_SCHEMA = 1
FIELD_BYTES = N_X * N_T * 8


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config files


def _params_to_json(p: SystemParams) -> dict:
    return {k: v for k, v in dataclasses.asdict(p).items() if v is not None}


def _dhpo_to_json(cfg: dhpo_mod.DhpoConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for net in ("branch", "trunk", "hidden"):
        out[net] = getattr(cfg, net).to_json()
    out["params"] = _params_to_json(cfg.params)
    return out


def _dhpo_from_json(obj: dict) -> dhpo_mod.DhpoConfig:
    kwargs = dict(obj)
    for net in ("branch", "trunk", "hidden"):
        kwargs[net] = MlpSpec.from_json(obj[net])
    kwargs["params"] = SystemParams(**obj["params"])
    return dhpo_mod.DhpoConfig(**kwargs)


def _sysid_to_json(cfg: sysid_mod.SysidConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for net in ("branch", "trunk", "pnet"):
        out[net] = getattr(cfg, net).to_json()
    out["param_range"] = list(cfg.param_range)
    return out


def _sysid_from_json(obj: dict) -> sysid_mod.SysidConfig:
    kwargs = dict(obj)
    for net in ("branch", "trunk", "pnet"):
        kwargs[net] = MlpSpec.from_json(obj[net])
    kwargs["param_range"] = tuple(obj["param_range"])
    return sysid_mod.SysidConfig(**kwargs)


@dataclasses.dataclass
class ExperimentConfig:
    task: str  # "dhpo" | "sysid" | "sweep"
    dhpo: dhpo_mod.DhpoConfig | None = None
    sysid: sysid_mod.SysidConfig | None = None
    sweep: dict | None = None  # {"n_train_values", "n_d_values", "iterations"}

    def __post_init__(self):
        if self.task not in ("dhpo", "sysid", "sweep"):
            raise ValidationError(f"unknown task '{self.task}'")
        if self.task in ("dhpo", "sweep") and self.dhpo is None:
            raise ValidationError(f"task '{self.task}' needs a dhpo section")
        if self.task == "sysid" and self.sysid is None:
            raise ValidationError("task 'sysid' needs a sysid section")

    @property
    def system(self) -> str:
        return (self.dhpo or self.sysid).system

    @property
    def seed(self) -> int:
        return (self.dhpo or self.sysid).seed

    def to_json(self) -> dict:
        out = {"schema_version": CONFIG_SCHEMA, "task": self.task}
        if self.dhpo is not None:
            out["dhpo"] = _dhpo_to_json(self.dhpo)
        if self.sysid is not None:
            out["sysid"] = _sysid_to_json(self.sysid)
        if self.sweep is not None:
            out["sweep"] = self.sweep
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        if obj.get("schema_version") != CONFIG_SCHEMA:
            raise ValidationError(
                f"unsupported config schema {obj.get('schema_version')}")
        try:
            return cls(
                task=obj["task"],
                dhpo=_dhpo_from_json(obj["dhpo"]) if "dhpo" in obj else None,
                sysid=_sysid_from_json(obj["sysid"]) if "sysid" in obj else None,
                sweep=obj.get("sweep"),
            )
        except (KeyError, TypeError, ValueError) as err:
            if isinstance(err, ValidationError):
                raise
            raise ValidationError(f"bad config: {err}") from err

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dataset writing


def _solve_one(args):
    task, system, family, length_scale, fn_seed, params_dict = args
    fn = fs.sample_family(family, fn_seed, fs.GrfSpec(length_scale))
    params = SystemParams(**params_dict)
    if system == "rd":
        grid = solve_reaction_diffusion(fn, params)
    else:
        grid = solve_burgers(fn, params)
    return fn.values, grid.values


def _sample_plan(config: ExperimentConfig):
    """Per-sample (seed, params, split, xi) rows, in on-disk order."""
    rows = []
    if config.task in ("dhpo", "sweep"):
        cfg = config.dhpo
        for i in range(cfg.n_train + cfg.n_test):
            rows.append({
                "index": i,
                "split": "train" if i < cfg.n_train else "test",
                "fn_seed": dhpo_mod.derived_seed(cfg.seed, 1, i),
                "label_seed": dhpo_mod.derived_seed(cfg.seed, 2, i),
                "params": _params_to_json(cfg.params),
            })
        return rows
    cfg = config.sysid
    xis = np.linspace(*cfg.param_range, cfg.n_param_values)
    flat = []
    for a, xi in enumerate(xis):
        for b in range(cfg.n_functions_per_param):
            if cfg.system == "rd":
                params = {"d": float(xi), "k": cfg.k_fixed}
            else:
                params = {"nu": float(xi)}
            flat.append({"fn_seed": dhpo_mod.derived_seed(cfg.seed, 21, a, b),
                         "xi": float(xi), "params": params})
    order = np.random.default_rng(
        dhpo_mod.derived_seed(cfg.seed, 22)).permutation(len(flat))
    split = {int(i): ("train" if rank < cfg.n_train else "test")
             for rank, i in enumerate(order)}
    for i, row in enumerate(flat):
        rows.append({"index": i, "split": split[i], **row})
    return rows


def write_dataset(config: ExperimentConfig, out_dir, force: bool = False,
                  jobs: int = 1) -> Path:
    """Generate and persist all solution fields for an experiment."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} exists; use --force")
    out.mkdir(parents=True, exist_ok=True)
    plan = _sample_plan(config)
    cfg = config.dhpo if config.task in ("dhpo", "sweep") else config.sysid
    work = [(config.task, cfg.system, cfg.family, cfg.grf_length_scale,
             row["fn_seed"], row["params"]) for row in plan]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, work, chunksize=8))
    else:
        results = [_solve_one(w) for w in work]

    with open(out / "inputs.bin", "wb") as f_in, open(out / "fields.bin", "wb") as f_f:
        for fn_values, grid_values in results:
            f_in.write(fn_values.astype("<f8").tobytes())
            f_f.write(grid_values.astype("<f8").tobytes())

    manifest = {
        "format_version": DATASET_FORMAT,
        "task": config.task if config.task != "sweep" else "dhpo",
        "system": cfg.system,
        "config_hash": config.config_hash(),
        "seed": cfg.seed,
        "grid": {"nx": N_X, "nt": N_T, "dx": DX, "dt": DT_OUTPUT},
        "counts": {"n_train": cfg.n_train, "n_test": cfg.n_test,
                   "n_samples": len(plan)},
        "sampler": {"family": cfg.family,
                    "grf_length_scale": cfg.grf_length_scale},
        "files": {
            "inputs": {"file": "inputs.bin", "bytes": len(plan) * fs.N_SENSORS * 8},
            "fields": {"file": "fields.bin", "bytes": len(plan) * FIELD_BYTES},
        },
        "samples": plan,
    }
    if config.task == "sysid":
        layout = sysid_mod.sample_sensor_layout(
            dhpo_mod.derived_seed(cfg.seed, 20), cfg.n_sensors)
        (out / "sensors.json").write_text(json.dumps(layout.to_json()))
        manifest["sensors_file"] = "sensors.json"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def _read_blob(path: Path, expected_bytes: int) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) != expected_bytes:
        raise ValidationError(
            f"{path.name}: expected {expected_bytes} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f8")


def read_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"no manifest.json under {dataset_dir}")
    doc = json.loads(path.read_text())
    if doc.get("format_version") != DATASET_FORMAT:
        raise ValidationError(f"unsupported dataset format {doc.get('format_version')}")
    return doc


def load_dhpo_dataset(dataset_dir, config: dhpo_mod.DhpoConfig) -> dhpo_mod.DhpoDataset:
    doc = read_manifest(dataset_dir)
    if doc["task"] != "dhpo" or doc["system"] != config.system:
        raise ValidationError(
            f"dataset is {doc['task']}/{doc['system']}, config wants dhpo/{config.system}")
    n = doc["counts"]["n_samples"]
    n_train_avail = doc["counts"]["n_train"]
    if config.n_train > n_train_avail or config.n_test > doc["counts"]["n_test"]:
        raise ValidationError("dataset has fewer samples than the config needs")
    root = Path(dataset_dir)
    inputs = _read_blob(root / doc["files"]["inputs"]["file"],
                        doc["files"]["inputs"]["bytes"]).reshape(n, fs.N_SENSORS)
    fields = _read_blob(root / doc["files"]["fields"]["file"],
                        doc["files"]["fields"]["bytes"]).reshape(n, N_X, N_T)
    train, test = [], []
    for row in doc["samples"]:
        i = row["index"]
        fn = fs.FunctionSample(fs.SENSOR_GRID.copy(), inputs[i].copy(),
                               doc["sampler"]["family"], row["fn_seed"])
        grid = FieldGrid(fields[i].copy(), SystemParams(**row["params"]),
                         doc["system"], fn)
        if row["split"] == "train" and len(train) < config.n_train:
            labels = dhpo_mod.subsample_labels(grid, config.n_d, row["label_seed"])
            train.append(dhpo_mod.DhpoSample(fn, grid, labels))
        elif row["split"] == "test" and len(test) < config.n_test:
            test.append((fn, grid))
    return dhpo_mod.DhpoDataset(doc["system"], train, test)


def load_sysid_dataset(dataset_dir, config: sysid_mod.SysidConfig) -> sysid_mod.SysidDataset:
    doc = read_manifest(dataset_dir)
    if doc["task"] != "sysid" or doc["system"] != config.system:
        raise ValidationError(
            f"dataset is {doc['task']}/{doc['system']}, config wants sysid/{config.system}")
    root = Path(dataset_dir)
    layout = sysid_mod.SensorLayout.from_json(
        json.loads((root / doc["sensors_file"]).read_text()))
    if layout.n != config.n_sensors:
        raise ValidationError(
            f"dataset has {layout.n} sensors, config wants {config.n_sensors}")
    n = doc["counts"]["n_samples"]
    inputs = _read_blob(root / doc["files"]["inputs"]["file"],
                        doc["files"]["inputs"]["bytes"]).reshape(n, fs.N_SENSORS)
    fields = _read_blob(root / doc["files"]["fields"]["file"],
                        doc["files"]["fields"]["bytes"]).reshape(n, N_X, N_T)
    train, test = [], []
    for row in doc["samples"]:
        i = row["index"]
        fn = fs.FunctionSample(fs.SENSOR_GRID.copy(), inputs[i].copy(),
                               doc["sampler"]["family"], row["fn_seed"])
        grid = FieldGrid(fields[i].copy(), SystemParams(**row["params"]),
                         doc["system"], fn)
        sample = sysid_mod.SysidSample(fn, grid, row["xi"], layout.values(grid))
        if row["split"] == "train" and len(train) < config.n_train:
            train.append(sample)
        elif row["split"] == "test" and len(test) < config.n_test:
            test.append(sample)
    return sysid_mod.SysidDataset(doc["system"], layout, train, test)
