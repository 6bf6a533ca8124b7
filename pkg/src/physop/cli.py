"""Command-line experiment orchestration.

Subcommands: generate (datasets), train (dhpo or sysid), evaluate
(reports + triptych exports), sweep (training-size grid), and
export-plots-data.  Exit codes: 0 success, 2 validation error,
3 numerical divergence.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import autodiff as ad
from . import dhpo as dhpo_mod
from . import metrics
from . import nets
from . import store
from . import sysid as sysid_mod
from .dhpo import TrainingDiverged
from .function_spaces import NumericalError
from .pde_oracles import SolverDivergenceError

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3

CHECKPOINT_EVERY = 1000


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path, seed=None) -> store.ExperimentConfig:
    config = store.ExperimentConfig.load(path)
    if seed is not None:
        if config.dhpo is not None:
            config.dhpo = dataclasses.replace(config.dhpo, seed=seed)
        if config.sysid is not None:
            config.sysid = dataclasses.replace(config.sysid, seed=seed)
    return config


@click.group()
def main():
    """Hidden-physics discovery and parameter identification experiments."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--force", is_flag=True, help="overwrite an existing dataset directory")
@click.option("--jobs", type=int, default=1, help="parallel workers for PDE solves")
def generate(config_path, out_dir, seed, force, jobs):
    """Solve the configured system and write a dataset directory."""
    try:
        config = _load_config(config_path, seed)
        out = store.write_dataset(config, out_dir, force=force, jobs=jobs)
    except store.ValidationError as err:
        _fail(EXIT_VALIDATION, str(err))
    except (SolverDivergenceError, NumericalError) as err:
        _fail(EXIT_DIVERGENCE, str(err))
    click.echo(f"dataset written to {out}")


def _checkpoint_callback(out: Path, config_hash: str, task: str):
    def save(trainer, step: int, final: bool = False) -> None:
        name = "final" if final else f"step-{step}"
        path = out / "checkpoints" / name
        nets.save_checkpoint(path, trainer.store, {
            "task": task, "step": step, "config_hash": config_hash,
            "trace_rows": len(trainer.trace),
        })
        if task == "sysid-stage2":
            sysid_mod.write_sysid_trace(path / "trace.csv", trainer.trace)
        elif task == "dhpo":
            dhpo_mod.write_trace(path / "trace.csv", trainer.trace)
    return save


def _train_dhpo(config, dataset_dir, out, resume, dry_run):
    cfg = config.dhpo
    dataset = store.load_dhpo_dataset(dataset_dir, cfg)
    trainer = dhpo_mod.DhpoTrainer(cfg, dataset)
    if resume:
        doc, params, adam = nets.load_checkpoint(resume)
        trainer.load_state({
            "store": {"theta": np.concatenate([params[n].ravel() for n in params]),
                      "m": adam["m"], "v": adam["v"], "t": adam["t"]},
            "step": doc["step"],
            "trace": dhpo_mod.read_trace(Path(resume) / "trace.csv").tolist(),
        })
    if dry_run:
        for _ in range(min(10, cfg.iterations)):
            losses = trainer.step()
        click.echo(f"dry run ok; last L_total = {losses['L_total']:.6f}")
        return
    save = _checkpoint_callback(out, config.config_hash(), "dhpo")

    def cb(tr, losses):
        if tr.step_count % CHECKPOINT_EVERY == 0:
            save(tr, tr.step_count)
    result = trainer.train(callback=cb)
    save(trainer, trainer.step_count, final=True)
    dhpo_mod.write_trace(out / "trace.csv", trainer.trace)
    click.echo(f"trained {result['steps']} steps; final L_total = "
               f"{trainer.trace[-1][-1]:.6f}")


def _train_sysid(config, dataset_dir, out, resume, dry_run):
    cfg = config.sysid
    dataset = store.load_sysid_dataset(dataset_dir, cfg)
    config_hash = config.config_hash()
    stage1_ck = out / "checkpoints" / "stage1"
    if resume is None and not dry_run and stage1_ck.exists():
        raise store.ValidationError(f"{stage1_ck} exists; use a fresh --out")
    s1 = sysid_mod.Stage1Trainer(cfg, dataset)
    iters1 = min(10, cfg.stage1_iterations) if dry_run else None
    r1 = s1.train(iterations=iters1)
    if dry_run:
        params = {n: s1.store.get(n).copy() for n in s1.store.names()}
        s2 = sysid_mod.Stage2Trainer(cfg, dataset, params)
        s2.train(iterations=10)
        click.echo("dry run ok")
        return
    nets.save_checkpoint(stage1_ck, s1.store, {
        "task": "sysid-stage1", "step": s1.step_count,
        "config_hash": config_hash, "final_full_loss": r1["final_full_loss"],
    })
    params = {n: s1.store.get(n).copy() for n in s1.store.names()}
    s2 = sysid_mod.Stage2Trainer(cfg, dataset, params)
    save = _checkpoint_callback(out, config_hash, "sysid-stage2")

    def cb(tr, losses):
        if tr.step_count % CHECKPOINT_EVERY == 0:
            save(tr, tr.step_count)
    s2.train(callback=cb)
    save(s2, s2.step_count, final=True)
    sysid_mod.write_sysid_trace(out / "trace.csv", s2.trace)
    click.echo(f"stage 1 loss {r1['final_full_loss']:.6f}; "
               f"stage 2 final L_total = {s2.trace[-1][-1]:.6f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="checkpoint directory to continue from (dhpo only)")
@click.option("--dry-run", is_flag=True, help="run 10 steps and exit")
def train(config_path, dataset_dir, out_dir, seed, resume, dry_run):
    """Train the configured task on a generated dataset."""
    out = Path(out_dir)
    try:
        config = _load_config(config_path, seed)
        out.mkdir(parents=True, exist_ok=True)
        if config.task == "dhpo":
            _train_dhpo(config, dataset_dir, out, resume, dry_run)
        elif config.task == "sysid":
            _train_sysid(config, dataset_dir, out, resume, dry_run)
        else:
            raise store.ValidationError(f"cannot train task '{config.task}'")
    except (store.ValidationError, ad.ShapeError, ValueError) as err:
        _fail(EXIT_VALIDATION, str(err))
    except (TrainingDiverged, SolverDivergenceError, NumericalError) as err:
        snapshot = getattr(err, "snapshot", {})
        if snapshot:
            out.mkdir(parents=True, exist_ok=True)
            (out / "divergence.json").write_text(json.dumps(snapshot, indent=2))
        _fail(EXIT_DIVERGENCE, str(err))


def _restore_dhpo(cfg, checkpoint):
    doc, params, adam = nets.load_checkpoint(checkpoint)
    joint = nets.restore_store(params, adam)
    model = nets.OperatorModel(cfg.branch, cfg.trunk, joint)
    hidden = nets.HiddenPhysicsNet(cfg.hidden, joint)
    return doc, model, hidden


def _restore_sysid(cfg, checkpoint):
    doc, params, adam = nets.load_checkpoint(checkpoint)
    joint = nets.restore_store(params, adam)
    model = nets.OperatorModel(cfg.branch, cfg.trunk, joint)
    pnet = sysid_mod.ParameterNet(cfg.pnet, joint)
    return doc, model, pnet


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--triptychs", type=int, default=0,
              help="export the first N test samples as triptych bundles")
def evaluate(config_path, checkpoint, dataset_dir, out_dir, triptychs):
    """Write an evaluation report (CSV + JSON summary) for a checkpoint."""
    out = Path(out_dir)
    try:
        config = _load_config(config_path)
        meta = {"config_hash": config.config_hash(), "seed": config.seed,
                "checkpoint": str(checkpoint)}
        if config.task == "dhpo":
            cfg = config.dhpo
            dataset = store.load_dhpo_dataset(dataset_dir, cfg)
            doc, model, hidden = _restore_dhpo(cfg, checkpoint)
            report = metrics.evaluate_dhpo(model, hidden, dataset.test, metadata=meta)
            if triptychs:
                f_rows = np.stack([s.values for s, _ in dataset.test[:triptychs]])
                u_pred = metrics.predict_fields(model, f_rows)
                for i in range(min(triptychs, len(dataset.test))):
                    metrics.export_triptych(
                        out / "reports" / f"triptych-{i}",
                        dataset.test[i][1].values, u_pred[i],
                        title=f"test sample {i}")
        elif config.task == "sysid":
            cfg = config.sysid
            dataset = store.load_sysid_dataset(dataset_dir, cfg)
            doc, model, pnet = _restore_sysid(cfg, checkpoint)
            test = [(s.sensors, s.xi, s.grid) for s in dataset.test]
            report = metrics.evaluate_sysid(
                model, lambda sv: sysid_mod.predict_parameter(pnet, sv),
                test, metadata=meta)
            if triptychs:
                f_rows = np.stack([s.sensors for s in dataset.test[:triptychs]])
                u_pred = metrics.predict_fields(model, f_rows)
                sensor_pts = dataset.layout.points
                for i in range(min(triptychs, len(dataset.test))):
                    metrics.export_triptych(
                        out / "reports" / f"triptych-{i}",
                        dataset.test[i].grid.values, u_pred[i],
                        sensors=sensor_pts.tolist(), title=f"test sample {i}")
        else:
            raise store.ValidationError(f"cannot evaluate task '{config.task}'")
        report.to_csv(out / "reports" / "report.csv")
        report.to_json(out / "reports" / "summary.json")
    except (store.ValidationError, ad.ShapeError, ValueError) as err:
        _fail(EXIT_VALIDATION, str(err))
    summary = report.summary()
    for col, stats in summary.items():
        click.echo(f"{col}: {stats['mean']:.5f} +/- {stats['std']:.5f}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def sweep(config_path, dataset_dir, out_dir, ):
    """Train and evaluate over a (n_train, n_d) grid; emit one CSV row per cell."""
    out = Path(out_dir)
    try:
        config = _load_config(config_path)
        if config.task != "sweep":
            raise store.ValidationError("sweep needs a config with task 'sweep'")
        grid_spec = config.sweep or {}
        n_train_values = grid_spec.get("n_train_values", [config.dhpo.n_train])
        n_d_values = grid_spec.get("n_d_values", [config.dhpo.n_d])
        iterations = grid_spec.get("iterations", config.dhpo.iterations)
        out.mkdir(parents=True, exist_ok=True)
    except (store.ValidationError, ValueError) as err:
        _fail(EXIT_VALIDATION, str(err))

    rows = []
    for n_train in n_train_values:
        for n_d in n_d_values:
            cell = {"n_train": n_train, "n_d": n_d}
            try:
                cfg = dataclasses.replace(config.dhpo, n_train=n_train, n_d=n_d,
                                          iterations=iterations)
                dataset = store.load_dhpo_dataset(dataset_dir, cfg)
                trainer = dhpo_mod.DhpoTrainer(cfg, dataset)
                trainer.train()
                report = metrics.evaluate_dhpo(trainer.model, trainer.hidden,
                                               dataset.test)
                stats = report.summary()["rel_l2_u"]
                cell.update(status="ok", mean_rel_l2=stats["mean"],
                            std_rel_l2=stats["std"])
            except Exception as err:  # record and continue with the next cell
                cell.update(status=f"failed: {err}", mean_rel_l2="", std_rel_l2="")
            rows.append(cell)
            click.echo(f"cell n_train={n_train} n_d={n_d}: {cell['status']}")
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["n_train", "n_d", "status", "mean_rel_l2", "std_rel_l2"])
        writer.writeheader()
        writer.writerows(rows)
    click.echo(f"sweep table written to {out / 'sweep.csv'}")


@main.command("export-plots-data")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--samples", type=int, default=2)
@click.pass_context
def export_plots_data(ctx, config_path, checkpoint, dataset_dir, out_dir, samples):
    """Bundle triptychs, report, and loss trace for the plotting tool."""
    ctx.invoke(evaluate, config_path=config_path, checkpoint=checkpoint,
               dataset_dir=dataset_dir, out_dir=out_dir, triptychs=samples)
    trace = Path(checkpoint) / "trace.csv"
    if trace.exists():
        (Path(out_dir) / "trace.csv").write_bytes(trace.read_bytes())
    click.echo(f"plot data under {out_dir}")


if __name__ == "__main__":
    main()
