"""
Checkpoints: a YAML manifest plus a raw little-endian binary32 blob.

    <name>.yaml   format, version, architecture, dtype, blob, tensors
    <name>.bin    tensors concatenated in manifest order

Each tensor entry gives its name, shape and byte offset in the blob; the
manifest order is the canonical parameter order, so it also defines the
flattening order of the weight vector.
"""

import json
import logging
import math
from pathlib import Path

import numpy as np
import yaml
from jsonschema import ValidationError, validate

from qlab.base import CHECKPOINT_DTYPE, DATADIR, DTYPE, CorruptionError
from qlab.lm import ModelConfig, Parameters, parameter_shapes
from qlab.utils import dump_record

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qlab-checkpoint"
CHECKPOINT_VERSION = 1
CHECKPOINT_SCHEMA_JSON = DATADIR / "checkpoint.schema.json"
CHECKPOINT_SCHEMA = json.loads(CHECKPOINT_SCHEMA_JSON.read_text())
ITEMSIZE = np.dtype(CHECKPOINT_DTYPE).itemsize


def manifest_path(path: Path | str) -> Path:
    return Path(path).with_suffix(".yaml")


def blob_path(path: Path | str) -> Path:
    return Path(path).with_suffix(".bin")


def save_checkpoint(
    params: Parameters, path: Path | str, metadata: dict | None = None
) -> Path:
    """Write ``params`` to ``path``.yaml and ``path``.bin; return the manifest."""
    manifest_file, blob_file = manifest_path(path), blob_path(path)
    manifest_file.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, value in params.items():
        raw = np.ascontiguousarray(value, dtype=CHECKPOINT_DTYPE).tobytes()
        tensors.append(
            {"name": name, "shape": list(value.shape), "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.config.to_dict(),
        "dtype": CHECKPOINT_DTYPE,
        "blob": blob_file.name,
        "metadata": metadata or {},
        "tensors": tensors,
    }
    blob_file.write_bytes(b"".join(chunks))
    manifest_file.write_text(dump_record(manifest))
    log.info("Saved checkpoint %s (%d bytes)", manifest_file, offset)
    return manifest_file


def _corrupt(path: Path, message: str) -> CorruptionError:
    return CorruptionError(
        f"{path}: {message}", module="harness", operation="load_checkpoint"
    )


def read_manifest(path: Path | str) -> dict:
    manifest_file = manifest_path(path)
    try:
        manifest = yaml.safe_load(manifest_file.read_text())
        validate(instance=manifest, schema=CHECKPOINT_SCHEMA)
    except ValidationError as e:
        raise _corrupt(manifest_file, f"invalid manifest: {e.message}") from e
    except yaml.YAMLError as e:
        raise _corrupt(manifest_file, f"unreadable manifest: {e}") from e
    return manifest


def load_checkpoint(path: Path | str) -> Parameters:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises CorruptionError when the manifest does not describe the blob:
    wrong names or shapes for the architecture, non-contiguous offsets, or
    a blob of the wrong length.
    """
    manifest_file = manifest_path(path)
    manifest = read_manifest(manifest_file)
    config = ModelConfig(**manifest["architecture"])
    blob = (manifest_file.parent / manifest["blob"]).read_bytes()

    expected = parameter_shapes(config)
    names = [t["name"] for t in manifest["tensors"]]
    if names != list(expected):
        raise _corrupt(manifest_file, "tensor names or order do not match")

    tensors, offset = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise _corrupt(
                manifest_file,
                f"{entry['name']} has shape {shape},"
                f" the architecture needs {expected[entry['name']]}",
            )
        if entry["offset"] != offset:
            raise _corrupt(
                manifest_file,
                f"{entry['name']} starts at {entry['offset']}, expected {offset}",
            )
        count = math.prod(shape)
        end = offset + count * ITEMSIZE
        if end > len(blob):
            raise _corrupt(manifest_file, f"blob too short for {entry['name']}")
        tensors[entry["name"]] = (
            np.frombuffer(blob, CHECKPOINT_DTYPE, count, offset)
            .reshape(shape)
            .astype(DTYPE)
        )
        offset = end
    if offset != len(blob):
        raise _corrupt(
            manifest_file,
            f"manifest covers {offset} bytes, the blob has {len(blob)}",
        )
    return Parameters(config, tensors)


def checkpoint_exists(path: Path | str) -> bool:
    return manifest_path(path).exists() and blob_path(path).exists()
