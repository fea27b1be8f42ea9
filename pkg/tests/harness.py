"""Assertions on the files produced by CLI steps."""

import re
from pathlib import Path

import pandas as pd
import yaml

from qlab.harness.reports import read_config_hash, read_csv


def assert_file(fileinfo: dict, basedir: Path | None = None):
    path = Path(fileinfo["path"])
    if basedir is not None and not path.is_absolute():
        path = basedir / path
    assert path.exists() == fileinfo.get("exists", True), (
        f"Expected file {'not ' if path.exists() else ''}found: {path}"
    )
    if not path.exists():
        return

    if "rows" in fileinfo:
        df = read_csv(path)
        assert len(df) == fileinfo["rows"], (
            f"{path}: expected {fileinfo['rows']} rows, got {len(df)}"
        )
    if "columns" in fileinfo:
        assert list(read_csv(path).columns) == fileinfo["columns"]
    if "config_hash" in fileinfo:
        assert re.fullmatch(fileinfo["config_hash"], read_config_hash(path))
    for key, expected in fileinfo.get("data", {}).items():
        data = yaml.safe_load(path.read_text())
        assert data[key] == expected, f"{path}: {key}={data[key]!r}"


def assert_frames_equal(left: Path, right: Path):
    """Two reports hold the same bytes, hash line included."""
    assert left.read_bytes() == right.read_bytes(), (
        f"{left} and {right} differ:\n"
        f"{pd.concat([read_csv(left), read_csv(right)]).drop_duplicates(keep=False)}"
    )
