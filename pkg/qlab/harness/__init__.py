"""
Run configuration.

A run is described by one YAML file validated against
``qlab/data/runconfig.schema.json``. Missing sections take the defaults
of the dataclasses below; relative corpus paths are resolved against the
directory of the configuration file.

    corpus: corpus.txt
    seed: 0
    formats: [int2, int3, int4, int6, int8]
    methods: [rtn, gptq, qaft]
    model: {seq_len: 128, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 256}
    qaft: {lr_grid: [1.0e-6, 1.0e-5, 1.0e-4, 1.0e-3], epochs: 8}
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml
from jsonschema import ValidationError, validate

from qlab.base import DATADIR, METHODS, SUPPORTED_BITS, ConfigurationError
from qlab.gptq import DEFAULT_DAMP_FACTORS, DampSearchSpace
from qlab.lm import ModelConfig
from qlab.lm.data import DataConfig
from qlab.lm.taps import SEQUENTIAL_QUANTIZED, TAP_MODES
from qlab.lm.train import PretrainConfig
from qlab.qaft import TrainConfig
from qlab.quantizer import QuantFormat
from qlab.utils import config_hash

log = logging.getLogger(__name__)

RUNCONFIG_SCHEMA_JSON = DATADIR / "runconfig.schema.json"
RUNCONFIG_SCHEMA = json.loads(RUNCONFIG_SCHEMA_JSON.read_text())

DEFAULT_FORMATS = tuple(f"int{b}" for b in SUPPORTED_BITS)


@dataclass(frozen=True)
class GptqConfig:
    damp_grid: tuple[float, ...] = DEFAULT_DAMP_FACTORS
    propagate: str = SEQUENTIAL_QUANTIZED
    batch_size: int = 32
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "damp_grid", tuple(self.damp_grid))
        if self.propagate not in TAP_MODES:
            raise ConfigurationError(
                f"unknown tap mode {self.propagate!r}, expected {TAP_MODES}",
                module="harness",
                operation="load_config",
            )
        DampSearchSpace(self.damp_grid)

    @property
    def space(self) -> DampSearchSpace:
        return DampSearchSpace(self.damp_grid)


@dataclass(frozen=True)
class EvalConfig:
    """``max_blocks`` caps every validation and test split (None: all)."""

    max_blocks: int | None = 64
    batch_size: int = 32
    workers: int = 1


@dataclass(frozen=True)
class LandscapeConfig:
    directions: int = 16
    n_radii: int = 32
    radii: tuple[float, ...] | None = None
    segment_samples: int = 33
    eval_blocks: int | None = 16
    threshold: float = 0.5
    workers: int = 1


@dataclass(frozen=True)
class RunConfig:
    corpus: Path
    seed: int = 0
    out: Path = Path("out")
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    formats: tuple[str, ...] = DEFAULT_FORMATS
    methods: tuple[str, ...] = METHODS
    gptq: GptqConfig = field(default_factory=GptqConfig)
    qaft: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    landscape: LandscapeConfig = field(default_factory=LandscapeConfig)
    eval_corpora: tuple[Path, ...] = ()
    # Paths as written in the file: they enter the hash, not the resolved ones.
    source: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path = Path(".")) -> "RunConfig":
        seed = int(data.get("seed", 0))
        try:
            model = ModelConfig(**data.get("model", {}), seed=seed)
            gptq = data.get("gptq", {})
            qaft = data.get("qaft", {})
            landscape = data.get("landscape", {})
            config = cls(
                corpus=base_dir / data["corpus"],
                seed=seed,
                out=Path(data.get("out", "out")),
                model=model,
                data=DataConfig(**data.get("data", {})),
                pretrain=PretrainConfig(**data.get("pretrain", {})),
                formats=tuple(
                    QuantFormat.parse(f).name
                    for f in data.get("formats", DEFAULT_FORMATS)
                ),
                methods=tuple(data.get("methods", METHODS)),
                gptq=GptqConfig(**gptq),
                qaft=TrainConfig(**qaft),
                eval=EvalConfig(**data.get("eval", {})),
                landscape=LandscapeConfig(
                    **{
                        **landscape,
                        "radii": tuple(landscape["radii"])
                        if landscape.get("radii")
                        else None,
                    }
                ),
                eval_corpora=tuple(
                    base_dir / p for p in data.get("eval_corpora", ())
                ),
                source={
                    "corpus": str(data["corpus"]),
                    "eval_corpora": [str(p) for p in data.get("eval_corpora", ())],
                },
            )
        except TypeError as e:
            raise ConfigurationError(
                str(e), module="harness", operation="load_config"
            ) from e
        return config

    def to_dict(self) -> dict[str, Any]:
        """The resolved configuration, as hashed into every report."""
        model = self.model.to_dict()
        model.pop("seed")
        return {
            "corpus": self.source.get("corpus", str(self.corpus)),
            "seed": self.seed,
            "out": str(self.out),
            "model": model,
            "data": _plain(asdict(self.data)),
            "pretrain": _plain(asdict(self.pretrain)),
            "formats": list(self.formats),
            "methods": list(self.methods),
            "gptq": _plain(asdict(self.gptq)),
            "qaft": _plain(asdict(self.qaft)),
            "eval": _plain(asdict(self.eval)),
            "landscape": _plain(asdict(self.landscape)),
            "eval_corpora": self.source.get(
                "eval_corpora", [str(p) for p in self.eval_corpora]
            ),
        }

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list | tuple):
        return [_plain(v) for v in value]
    return value


def load_config(
    path: Path | str, seed: int | None = None, out: Path | str | None = None
) -> RunConfig:
    """Load and validate a run configuration, applying CLI overrides."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(
            f"cannot read {path}: {e}", module="harness", operation="load_config"
        ) from e
    if not isinstance(data, dict):
        raise ConfigurationError(
            f"{path} must contain a mapping",
            module="harness",
            operation="load_config",
        )
    try:
        validate(instance=data, schema=RUNCONFIG_SCHEMA)
    except ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "(root)"
        raise ConfigurationError(
            f"{path}: {e.message} at {where}",
            module="harness",
            operation="load_config",
        ) from e
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = str(out)
    config = RunConfig.from_dict(data, base_dir=path.parent)
    log.info("Loaded %s (config_hash %s)", path, config.hash)
    return config


__all__ = [
    "DEFAULT_FORMATS",
    "EvalConfig",
    "GptqConfig",
    "LandscapeConfig",
    "RunConfig",
    "load_config",
]
