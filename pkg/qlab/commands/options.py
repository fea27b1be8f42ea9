"""Options and error handling shared by the experiment subcommands."""

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import click

from qlab.base import ArtifactExistsError, ConfigurationError, QlabError
from qlab.harness import DEFAULT_FORMATS, load_config
from qlab.harness.pipeline import Experiment

log = logging.getLogger(__name__)


def run_options(func):
    """Add --config, --seed, --out and --force/-f to a subcommand."""
    func = click.option(
        "--force",
        "-f",
        is_flag=True,
        default=False,
        help="Overwrite existing artifacts. Without this flag, the command fails if an output already exists.",
    )(func)
    func = click.option(
        "--out",
        type=click.Path(file_okay=False, path_type=Path),
        default=None,
        help="Output directory, overriding `out` in the configuration.",
    )(func)
    func = click.option(
        "--seed",
        type=int,
        default=None,
        help="Run seed, overriding `seed` in the configuration.",
    )(func)
    func = click.option(
        "--config",
        "config_path",
        type=click.Path(
            exists=True, dir_okay=False, resolve_path=True, path_type=Path
        ),
        required=True,
        help="Path to the YAML run configuration",
    )(func)
    return func


format_option = click.option(
    "--format",
    "fmt",
    type=click.Choice(DEFAULT_FORMATS),
    default=None,
    help="Quantization format. Defaults to every format of the configuration.",
)


@contextmanager
def experiment(
    config_path: Path, seed: int | None, out: Path | None, force: bool
) -> Iterator[Experiment]:
    """
    Yield the Experiment described by the CLI options.

    Configuration errors become usage errors (exit 2), any other
    QlabError a failure naming the module and operation (exit 1).
    """
    try:
        config = load_config(config_path, seed=seed, out=out)
    except ConfigurationError as e:
        raise click.BadParameter(str(e), param_hint="--config") from e
    try:
        yield Experiment(config, force=force)
    except ArtifactExistsError as e:
        click.secho(f"✗ Error: {e}", fg="red", err=True)
        raise click.Abort() from e
    except QlabError as e:
        log.debug("Stage failed", exc_info=True)
        raise click.ClickException(e.diagnostic) from e


def selected_formats(exp: Experiment, fmt: str | None) -> tuple[str, ...]:
    return (fmt,) if fmt else exp.config.formats
