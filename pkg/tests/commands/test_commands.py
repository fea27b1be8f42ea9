"""
Parameterized tests for the experiment subcommands.

Each case runs its steps in a fresh output directory: commands use the
``{out}`` and ``{config}`` placeholders.
"""

import logging

import pytest
from click.testing import CliRunner

from tests.commands.utils import harness_step, make_fixtures
from tests.constants import CONFIG

COMMAND_FIXTURES = make_fixtures(__file__)


@pytest.mark.parametrize("params", argvalues=COMMAND_FIXTURES)
def test_commands(
    params, runner: CliRunner, caplog: pytest.LogCaptureFixture, tmp_path
):
    """
    Execute the test suite defined in the associated YAML file.
    """
    # Set DEBUG log level for this specific test,
    #   so we can test log messages.
    caplog.set_level(logging.DEBUG)

    for step in params["steps"]:
        harness_step(step, runner, caplog, tmp_path / "out", CONFIG)
