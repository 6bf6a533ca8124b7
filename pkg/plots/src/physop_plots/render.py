"""Matplotlib rendering of loaded artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bundles import TRACE_COLUMNS, TriptychBundle

EXTENT = (0.0, 1.0, 0.0, 1.0)  # (t, x) plot domain
MAX_TRACE_POINTS = 2000


def render_triptych(bundle: TriptychBundle, out_path) -> Path:
    """Reference / prediction / absolute-error heatmaps side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(13.5, 4.0), constrained_layout=True)
    vmin = float(min(bundle.reference.min(), bundle.prediction.min()))
    vmax = float(max(bundle.reference.max(), bundle.prediction.max()))
    if vmin == vmax:  # degenerate range (e.g. all-zero fields)
        vmin, vmax = vmin - 1.0, vmax + 1.0
    panels = [
        ("reference", bundle.reference, dict(vmin=vmin, vmax=vmax, cmap="jet")),
        ("prediction", bundle.prediction, dict(vmin=vmin, vmax=vmax, cmap="jet")),
        (f"absolute error (rel L2 = {bundle.rel_l2:.4f})", bundle.abs_error,
         dict(cmap="viridis")),
    ]
    for ax, (title, values, opts) in zip(axes, panels):
        im = ax.imshow(values, origin="lower", aspect="auto", extent=EXTENT, **opts)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("t")
        ax.set_ylabel("x")
        if bundle.sensors:
            xs = [p[0] for p in bundle.sensors]
            ts = [p[1] for p in bundle.sensors]
            ax.plot(ts, xs, "kx", markersize=3, linewidth=0.5)
        fig.colorbar(im, ax=ax, fraction=0.046)
    if bundle.title:
        fig.suptitle(bundle.title, fontsize=11)
    return _save(fig, out_path)


def render_histogram(errors: np.ndarray, column: str, out_path, bins: int = 40) -> Path:
    """Distribution of per-sample errors with a mean +/- std annotation."""
    mu = float(np.mean(errors))
    sigma = float(np.std(errors))  # population, matching report summaries
    fig, ax = plt.subplots(figsize=(6.4, 4.2), constrained_layout=True)
    ax.hist(errors, bins=min(bins, max(1, len(np.unique(errors)))),
            color="#4c72b0", edgecolor="white")
    ax.axvline(mu, color="k", linestyle="--", linewidth=1)
    ax.set_xlabel(column)
    ax.set_ylabel("count")
    ax.set_title(f"{column}: {mu:.5f} $\\pm$ {sigma:.5f} (n={errors.size})")
    return _save(fig, out_path)


def render_loss_curve(trace: np.ndarray, out_path) -> Path:
    """All loss components over training on a log scale."""
    rows = trace
    if rows.shape[0] > MAX_TRACE_POINTS:
        stride = int(np.ceil(rows.shape[0] / MAX_TRACE_POINTS))
        rows = rows[::stride]
    fig, ax = plt.subplots(figsize=(7.0, 4.5), constrained_layout=True)
    for k, name in enumerate(TRACE_COLUMNS[1:], start=1):
        ax.semilogy(rows[:, 0], np.maximum(rows[:, k], 1e-300), label=name, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
