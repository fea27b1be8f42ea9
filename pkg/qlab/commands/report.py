"""
Commands emitting the CSV reports.

- report: build reports from the stored result records
- pipeline: run every stage, then report
"""

import logging
from pathlib import Path

import click

from qlab.commands.options import experiment, run_options
from qlab.harness.reports import REPORT_NAMES

log = logging.getLogger(__name__)


@click.command(name="report")
@run_options
@click.argument("names", nargs=-1, type=click.Choice(REPORT_NAMES))
def report(
    config_path: Path,
    seed: int | None,
    out: Path | None,
    force: bool,
    names: tuple[str, ...],
):
    """
    Write the CSV reports of a run.

    Without NAMES, every report whose result records exist is written.
    Reports are always regenerated, --force is accepted for symmetry.
    """
    with experiment(config_path, seed, out, force) as exp:
        for path in exp.report(names or None):
            click.echo(f"✓ Created: {path}")


@click.command(name="pipeline")
@run_options
def pipeline(config_path: Path, seed: int | None, out: Path | None, force: bool):
    """Run every stage of the configuration, reusing finished ones."""
    with experiment(config_path, seed, out, force) as exp:
        for path in exp.run_all():
            click.echo(f"✓ Created: {path}")
