"""
CSV reports built from the YAML result records of a run.

Every CSV starts with a ``# config_hash: <hash>`` line followed by the
header; read them back with :func:`read_csv`.
"""

import logging
import math
from collections.abc import Callable, Iterable
from pathlib import Path

import pandas as pd
import yaml

from qlab.base import MissingArtifactError

log = logging.getLogger(__name__)

COLUMNS: dict[str, list[str]] = {
    "misalignment": [
        "format",
        "method",
        "scope",
        "layer",
        "test_nll",
        "perplexity",
        "mse",
    ],
    "tradeoff": ["format", "method", "weight_bytes", "test_nll", "perplexity"],
    "landscape": [
        "kind",
        "anchor_a",
        "anchor_b",
        "seed",
        "t_or_lambda",
        "distance",
        "train_nll",
        "val_nll",
    ],
    "qaft_trace": ["format", "lr", "epoch", "train_nll", "val_nll", "test_nll"],
    "qaft_lr": ["format", "lr", "best_val_nll", "best_epoch", "failed"],
    "gptq_damp": [
        "format",
        "layer",
        "damp_factor",
        "mse_rtn",
        "mse_gptq",
        "candidate",
        "failed_factors",
    ],
    "basin": [
        "format",
        "method",
        "distance",
        "radius",
        "base_loss",
        "plateau_loss",
        "inside",
    ],
    "generalization": ["corpus", "format", "method", "test_nll"],
}
REPORT_NAMES = tuple(COLUMNS)

EVALUATION_RECORD = "evaluation.yaml"
LANDSCAPE_RECORD = "landscape.yaml"


def perplexity(nll: float | None) -> float | None:
    if nll is None:
        return None
    return math.exp(nll) if nll < 700 else math.inf


def load_record(path: Path) -> dict:
    if not path.exists():
        raise MissingArtifactError(
            f"missing result record {path}",
            module="harness",
            operation="emit_reports",
        )
    return yaml.safe_load(path.read_text())


def _records(results: Path, method: str) -> Iterable[dict]:
    for path in sorted(results.glob(f"int*-{method}.yaml")):
        yield load_record(path)


def _format_order(record: dict) -> int:
    return int(record["format"][3:])


def misalignment_rows(results: Path) -> list[dict]:
    rows = []
    for entry in load_record(results / EVALUATION_RECORD)["models"]:
        if entry["method"] == "full-precision":
            continue
        rows.append(
            {
                "format": entry["format"],
                "method": entry["method"],
                "scope": "global",
                "layer": None,
                "test_nll": entry["test_nll"],
                "perplexity": perplexity(entry["test_nll"]),
                "mse": None,
            }
        )
        for layer in entry["layers"]:
            rows.append(
                {
                    "format": entry["format"],
                    "method": entry["method"],
                    "scope": "layer",
                    "layer": layer["layer"],
                    "test_nll": None,
                    "perplexity": None,
                    "mse": layer["mse"],
                }
            )
    return rows


def tradeoff_rows(results: Path) -> list[dict]:
    return [
        {
            "format": entry["format"],
            "method": entry["method"],
            "weight_bytes": entry["weight_bytes"],
            "test_nll": entry["test_nll"],
            "perplexity": perplexity(entry["test_nll"]),
        }
        for entry in load_record(results / EVALUATION_RECORD)["models"]
    ]


def generalization_rows(results: Path) -> list[dict]:
    return list(load_record(results / EVALUATION_RECORD).get("generalization", []))


def landscape_rows(results: Path) -> list[dict]:
    record = load_record(results / LANDSCAPE_RECORD)
    return [row for profile in record["profiles"] for row in profile["rows"]]


def basin_rows(results: Path) -> list[dict]:
    return list(load_record(results / LANDSCAPE_RECORD).get("basin", []))


def qaft_trace_rows(results: Path) -> list[dict]:
    rows = []
    for record in sorted(_records(results, "qaft"), key=_format_order):
        for row in record["trace"]:
            rows.append({"format": record["format"], **row})
    return rows


def qaft_lr_rows(results: Path) -> list[dict]:
    rows = []
    for record in sorted(_records(results, "qaft"), key=_format_order):
        for row in record["lr_summary"]:
            rows.append({"format": record["format"], **row})
    return rows


def gptq_damp_rows(results: Path) -> list[dict]:
    rows = []
    for record in sorted(_records(results, "gptq"), key=_format_order):
        for row in record["damp"]:
            rows.append({"format": record["format"], **row})
    return rows


BUILDERS: dict[str, Callable[[Path], list[dict]]] = {
    "misalignment": misalignment_rows,
    "tradeoff": tradeoff_rows,
    "landscape": landscape_rows,
    "qaft_trace": qaft_trace_rows,
    "qaft_lr": qaft_lr_rows,
    "gptq_damp": gptq_damp_rows,
    "basin": basin_rows,
    "generalization": generalization_rows,
}


def build_report(name: str, results: Path) -> pd.DataFrame:
    rows = BUILDERS[name](results)
    return pd.DataFrame(rows, columns=COLUMNS[name])


def write_csv(df: pd.DataFrame, path: Path, config_hash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        f.write(f"# config_hash: {config_hash}\n")
        df.to_csv(f, index=False, lineterminator="\n")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def read_config_hash(path: Path) -> str:
    first = path.read_text(encoding="utf-8").splitlines()[0]
    return first.removeprefix("# config_hash:").strip()


def emit_reports(
    results: Path,
    reports: Path,
    config_hash: str,
    names: Iterable[str] | None = None,
) -> list[Path]:
    """
    Write the CSV reports whose result records exist.

    Reports named explicitly in ``names`` must be buildable; otherwise
    reports lacking their records are skipped with a warning.
    """
    strict = names is not None
    written = []
    for name in names or REPORT_NAMES:
        try:
            df = build_report(name, results)
        except MissingArtifactError as e:
            if strict:
                raise
            log.warning("Skipping %s report: %s", name, e)
            continue
        if df.empty and not strict:
            log.warning("Skipping %s report: no rows", name)
            continue
        path = write_csv(df, reports / f"{name}.csv", config_hash)
        log.info("Wrote %s (%d rows)", path, len(df))
        written.append(path)
    if not written:
        raise MissingArtifactError(
            f"no completed runs under {results}",
            module="harness",
            operation="emit_reports",
        )
    return written
