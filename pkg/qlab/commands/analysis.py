"""
Commands measuring the quantized models.

- eval: test NLL, weight size and per-layer output MSE
- landscape: radial and segment loss profiles, basin radius
"""

import logging
from pathlib import Path

import click

from qlab.commands.options import experiment, run_options
from qlab.harness.reports import EVALUATION_RECORD, LANDSCAPE_RECORD

log = logging.getLogger(__name__)


@click.command(name="eval")
@run_options
def evaluate(config_path: Path, seed: int | None, out: Path | None, force: bool):
    """Evaluate the base model and every quantized checkpoint."""
    with experiment(config_path, seed, out, force) as exp:
        record = exp.evaluate()
        for entry in record["models"]:
            click.echo(
                f"{entry['format']:>5} {entry['method']:<15}"
                f" test NLL {entry['test_nll']:.4f}"
                f" ({entry['weight_bytes']} bytes)"
            )
        click.echo(f"✓ Created: {exp.results / EVALUATION_RECORD}")


@click.command(name="landscape")
@run_options
def landscape(config_path: Path, seed: int | None, out: Path | None, force: bool):
    """Probe the loss landscape around the pretrained weights."""
    with experiment(config_path, seed, out, force) as exp:
        record = exp.landscape()
        for row in record["basin"]:
            if row["radius"] is None:
                continue
            where = "inside" if row["inside"] else "outside"
            click.echo(
                f"{row['format']:>5} {row['method']:<5}"
                f" distance {row['distance']:.4f} {where} R={row['radius']:.4f}"
            )
        click.echo(f"✓ Created: {exp.results / LANDSCAPE_RECORD}")
