"""
Hashing, seed derivation and YAML helpers shared by the harness.
"""

import json
import logging
from hashlib import sha256
from typing import Any

import numpy as np
import yaml

log = logging.getLogger(__name__)


def canonical_json(data: Any) -> str:
    """Render data as JSON with sorted keys and no whitespace."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(data: dict) -> str:
    """Return a short, stable hash of a configuration dictionary."""
    return sha256(canonical_json(data).encode()).hexdigest()[:16]


def derive_seed(seed: int, *labels: Any) -> int:
    """
    Derive an independent 32-bit seed for a named random stream.

    Examples:
        derive_seed(0, "pretrain") != derive_seed(0, "landscape", 3)
    """
    key = "|".join([str(int(seed)), *(str(label) for label in labels)])
    return int.from_bytes(sha256(key.encode()).digest()[:4], "little")


def rng_for(seed: int, *labels: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))


def to_builtin(value: Any) -> Any:
    """Convert numpy scalars and arrays to plain Python for YAML dumps."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class RecordDumper(yaml.SafeDumper):
    """YAML dumper for result records: block style, no aliases."""

    def ignore_aliases(self, data):
        return True


def dump_record(data: Any) -> str:
    return yaml.dump(
        to_builtin(data),
        Dumper=RecordDumper,
        sort_keys=False,
        default_flow_style=False,
    )
