"""`plot` command line: heatmap and decomposition renderers."""

from __future__ import annotations

import sys

import click

from .decomp import render_decomposition
from .heatmap import render_heatmap
from .io import SchemaError


@click.group()
def main():
    """Render figures from distillation-lab CSV/JSON artifacts."""


@main.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("-o", "--out", type=click.Path(), required=True)
@click.option("--vmax", type=float, default=None,
              help="global color scale (default: per-panel max)")
def heatmap(csv_path, out, vmax):
    """Render a token-level |kappa| map from a heatmap CSV."""
    try:
        render_heatmap(csv_path, out, vmax=vmax)
    except SchemaError as exc:
        click.echo(f"schema error: {exc}", err=True)
        sys.exit(3)
    click.echo(f"wrote {out}")


@main.command()
@click.argument("report_path", type=click.Path(exists=True))
@click.option("-o", "--out", type=click.Path(), required=True)
def decomp(report_path, out):
    """Render regional-decomposition bars from an analysis report."""
    try:
        render_decomposition(report_path, out)
    except SchemaError as exc:
        click.echo(f"schema error: {exc}", err=True)
        sys.exit(3)
    click.echo(f"wrote {out}")


if __name__ == "__main__":
    main()
