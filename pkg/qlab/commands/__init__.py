"""
CLI commands for the quantization misalignment experiments.

Organized by stage:
- prep-data, train-base: corpus blocks and the full-precision model
- quantize, qaft: RTN, GPTQ and QAFT checkpoints
- eval, landscape: test NLL, layer MSE and loss-landscape probes
- report, pipeline: CSV reports, every stage in one go
"""

import logging
from importlib.metadata import PackageNotFoundError, version

import click

from qlab._build_info import BUILD_COMMIT
from qlab.commands.analysis import evaluate, landscape
from qlab.commands.quantize import qaft, quantize
from qlab.commands.report import pipeline, report
from qlab.commands.train import prep_data, train_base

log = logging.getLogger(__name__)


def _cli_version_string() -> str:
    """Return CLI version string including build commit if available."""
    try:
        pkg_version = version("quant-misalignment-lab")
    except PackageNotFoundError:
        pkg_version = "0+unknown"

    if BUILD_COMMIT and BUILD_COMMIT != "unknown":
        return f"{pkg_version}+{BUILD_COMMIT}"

    return pkg_version


LOG_LEVELS = ["CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"]


def common_options(func):
    func = click.option(
        "--log-level",
        "-l",
        type=click.Choice(LOG_LEVELS, case_sensitive=False),
        default="INFO",
        help="Set the logging level.",
    )(func)
    return func


@click.group(epilog=f"Version: {_cli_version_string()}")
@click.version_option(version=_cli_version_string())
@common_options
def cli(log_level):
    """Quantize a toy transformer with RTN, GPTQ and QAFT and compare them."""
    logging.basicConfig(level=getattr(logging, log_level.upper()))


cli.add_command(prep_data)
cli.add_command(train_base)
cli.add_command(quantize)
cli.add_command(qaft)
cli.add_command(evaluate)
cli.add_command(landscape)
cli.add_command(report)
cli.add_command(pipeline)

__all__ = ["cli"]
