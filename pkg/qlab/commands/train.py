"""
Commands preparing the base model.

- prep-data: pack the corpus into train / validation / test blocks
- train-base: pretrain the full-precision model
"""

import logging
from pathlib import Path

import click

from qlab.commands.options import experiment, run_options

log = logging.getLogger(__name__)


@click.command(name="prep-data")
@run_options
def prep_data(config_path: Path, seed: int | None, out: Path | None, force: bool):
    """Ingest the corpus and record its split summary."""
    with experiment(config_path, seed, out, force) as exp:
        summary = exp.prep_data()
    blocks = summary["blocks"]
    click.echo(
        f"✓ Ingested {summary['bytes']} bytes:"
        f" train={blocks['train']} val={blocks['val']} test={blocks['test']}"
    )


@click.command(name="train-base")
@run_options
def train_base(config_path: Path, seed: int | None, out: Path | None, force: bool):
    """Pretrain the full-precision base model and checkpoint it."""
    with experiment(config_path, seed, out, force) as exp:
        result = exp.train_base()
        click.echo(
            f"✓ Created: {exp.checkpoints / 'base.yaml'}"
            f" (val NLL {result.best_val_nll:.4f} at step {result.best_step})"
        )
