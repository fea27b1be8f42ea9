"""
Commands producing quantized checkpoints.

- quantize: post-training quantization (RTN, GPTQ) or QAFT
- qaft: quantization-aware fine-tuning over the learning-rate grid
"""

import logging
from pathlib import Path

import click

from qlab.base import METHODS
from qlab.commands.options import (
    experiment,
    format_option,
    run_options,
    selected_formats,
)
from qlab.harness.pipeline import checkpoint_name

log = logging.getLogger(__name__)


@click.command(name="quantize")
@run_options
@click.option(
    "--method",
    type=click.Choice(METHODS),
    required=True,
    help="Quantization method",
)
@format_option
def quantize(
    config_path: Path,
    seed: int | None,
    out: Path | None,
    force: bool,
    method: str,
    fmt: str | None,
):
    """Quantize the base model with one method."""
    with experiment(config_path, seed, out, force) as exp:
        for name in selected_formats(exp, fmt):
            if method == "qaft":
                exp.qaft(name)
            else:
                exp.quantize(method, name)
            click.echo(
                f"✓ Created: {exp.checkpoints / checkpoint_name(name, method)}.yaml"
            )


@click.command(name="qaft")
@run_options
@format_option
def qaft(
    config_path: Path,
    seed: int | None,
    out: Path | None,
    force: bool,
    fmt: str | None,
):
    """Fine-tune the base model through its fake quantizers."""
    with experiment(config_path, seed, out, force) as exp:
        for name in selected_formats(exp, fmt):
            exp.qaft(name)
            click.echo(
                f"✓ Created: {exp.checkpoints / checkpoint_name(name, 'qaft')}.yaml"
            )
