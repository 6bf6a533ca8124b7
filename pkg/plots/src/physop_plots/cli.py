"""Command-line figure rendering: triptych, histogram, and loss curves.

Exit codes: 0 on success, 2 on schema violations or unreadable inputs.
"""

from __future__ import annotations

import sys

import click

from . import bundles, render

EXIT_SCHEMA = 2


def _run(loader, renderer):
    try:
        args = loader()
    except bundles.SchemaError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(EXIT_SCHEMA)
    out = renderer(*args)
    click.echo(f"wrote {out}")


@click.group()
def main():
    """Render exported experiment artifacts as PNG figures."""


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(),
              help="triptych bundle (.json manifest or basename)")
@click.option("--out", "out_path", required=True, type=click.Path())
def triptych(in_path, out_path):
    """Reference/prediction/error heatmaps with sensor overlays."""
    _run(lambda: (bundles.load_triptych(in_path),),
         lambda b: render.render_triptych(b, out_path))


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(),
              help="evaluation report CSV")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--column", default=None, help="error column (default: first)")
def hist(in_path, out_path, column):
    """Histogram of per-sample errors with mean +/- std annotation."""
    _run(lambda: bundles.load_error_column(in_path, column),
         lambda e, c: render.render_histogram(e, c, out_path))


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(),
              help="training loss trace CSV")
@click.option("--out", "out_path", required=True, type=click.Path())
def loss(in_path, out_path):
    """Loss components over training, log scale."""
    _run(lambda: (bundles.load_trace(in_path),),
         lambda t: render.render_loss_curve(t, out_path))


if __name__ == "__main__":
    main()
