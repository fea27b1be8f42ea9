"""
Experiment stages and their artifacts.

    <out>/checkpoints/base.{yaml,bin}          train-base
    <out>/checkpoints/<format>-<method>.*      quantize, qaft
    <out>/results/*.yaml                       one record per stage
    <out>/reports/*.csv                        report

Stages re-read the corpus and the base checkpoint instead of sharing
state, so each CLI subcommand can run on its own.
"""

import logging
from collections.abc import Iterable
from functools import cached_property
from itertools import combinations
from pathlib import Path

import numpy as np

from qlab.base import (
    FULL_PRECISION,
    ArtifactExistsError,
    BasinEstimateRefused,
    ConfigurationError,
    MissingArtifactError,
)
from qlab.gptq import gptq_quantize_model, layer_mse
from qlab.harness import RunConfig
from qlab.harness.checkpoint import (
    checkpoint_exists,
    load_checkpoint,
    manifest_path,
    save_checkpoint,
)
from qlab.harness.reports import (
    EVALUATION_RECORD,
    LANDSCAPE_RECORD,
    emit_reports,
    perplexity,
)
from qlab.landscape import (
    POINT,
    LossProbe,
    basin_radius,
    default_radii,
    radial_profiles,
    segment_profile,
    weight_distance,
)
from qlab.lm import Parameters, evaluate_nll, weight_size_bytes
from qlab.lm.data import TokenDataset, ingest_corpus, ingest_test_split
from qlab.lm.taps import FULL_PRECISION as FULL_PRECISION_TAPS
from qlab.lm.taps import capture_layer_taps
from qlab.lm.train import pretrain_base
from qlab.qaft import QaftData, qaft_train
from qlab.quantizer import (
    QuantFormat,
    Quantizers,
    calibrate_model,
    quantize_model_rtn,
)
from qlab.utils import dump_record

log = logging.getLogger(__name__)

BASE = "base"
POST_TRAINING = ("rtn", "gptq")


def checkpoint_name(fmt: str, method: str) -> str:
    return f"{QuantFormat.parse(fmt).name}-{method}"


class Experiment:
    """The stages of one run, bound to its configuration and output tree."""

    def __init__(self, config: RunConfig, force: bool = False):
        self.config = config
        self.force = force
        self.out = Path(config.out)
        self.checkpoints = self.out / "checkpoints"
        self.results = self.out / "results"
        self.reports = self.out / "reports"
        self._quantizers: dict[str, Quantizers] = {}

    @property
    def config_hash(self) -> str:
        return self.config.hash

    #
    # Inputs.
    #
    @cached_property
    def dataset(self) -> TokenDataset:
        return ingest_corpus(
            self.config.corpus, self.config.model.seq_len, self.config.data
        )

    def _capped(self, blocks: np.ndarray, limit: int | None) -> np.ndarray:
        return blocks if limit is None else blocks[:limit]

    @property
    def val_blocks(self) -> np.ndarray:
        return self._capped(self.dataset.val, self.config.eval.max_blocks)

    @property
    def test_blocks(self) -> np.ndarray:
        return self._capped(self.dataset.test, self.config.eval.max_blocks)

    @cached_property
    def base(self) -> Parameters:
        path = self.checkpoints / BASE
        if not checkpoint_exists(path):
            raise MissingArtifactError(
                f"no base checkpoint at {manifest_path(path)}: run train-base first",
                module="harness",
                operation="load_checkpoint",
            )
        return load_checkpoint(path)

    def quantizers(self, fmt: str) -> Quantizers:
        name = QuantFormat.parse(fmt).name
        if name not in self._quantizers:
            self._quantizers[name] = calibrate_model(self.base, QuantFormat.parse(name))
        return self._quantizers[name]

    def load(self, name: str) -> Parameters:
        path = self.checkpoints / name
        if not checkpoint_exists(path):
            raise MissingArtifactError(
                f"no checkpoint {manifest_path(path)}",
                module="harness",
                operation="load_checkpoint",
            )
        return load_checkpoint(path)

    def has(self, name: str) -> bool:
        return checkpoint_exists(self.checkpoints / name)

    #
    # Artifact bookkeeping.
    #
    def outputs(self, stage: str, fmt: str | None = None) -> list[Path]:
        if stage == "prep-data":
            return [self.results / "dataset.yaml"]
        if stage == "train-base":
            return [manifest_path(self.checkpoints / BASE), self.results / "base.yaml"]
        if stage in ("rtn", "gptq", "qaft"):
            assert fmt is not None
            name = checkpoint_name(fmt, stage)
            return [manifest_path(self.checkpoints / name), self.results / f"{name}.yaml"]
        if stage == "eval":
            return [self.results / EVALUATION_RECORD]
        if stage == "landscape":
            return [self.results / LANDSCAPE_RECORD]
        raise ConfigurationError(
            f"unknown stage {stage!r}", module="harness", operation="cli"
        )

    def done(self, stage: str, fmt: str | None = None) -> bool:
        return all(p.exists() for p in self.outputs(stage, fmt))

    def _claim(self, paths: Iterable[Path]) -> None:
        existing = [p for p in paths if p.exists()]
        if not existing:
            return
        if not self.force:
            raise ArtifactExistsError(
                f"{existing[0]} already exists. Use --force/-f to overwrite.",
                module="harness",
                operation="cli",
            )
        for p in existing:
            log.warning("Overwriting existing file: %s", p)

    def _write_record(self, name: str, data: dict) -> Path:
        path = self.results / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_record({"config_hash": self.config_hash, **data}))
        log.debug("Wrote %s", path)
        return path

    #
    # Stages.
    #
    def prep_data(self) -> dict:
        self._claim(self.outputs("prep-data"))
        summary = self.dataset.summary()
        self._write_record("dataset.yaml", {"dataset": summary})
        return summary

    def train_base(self):
        self._claim(self.outputs("train-base"))
        cfg = self.config
        result = pretrain_base(
            cfg.model,
            self.dataset,
            cfg.pretrain,
            eval_blocks=cfg.eval.max_blocks,
            eval_batch_size=cfg.eval.batch_size,
        )
        save_checkpoint(
            result.params,
            self.checkpoints / BASE,
            metadata={"method": "full-precision", "config_hash": self.config_hash},
        )
        self._write_record(
            "base.yaml",
            {
                "initial_train_nll": result.initial_train_nll,
                "best_step": result.best_step,
                "best_val_nll": result.best_val_nll,
                "history": result.history,
            },
        )
        self.__dict__.pop("base", None)
        self._quantizers.clear()
        return result

    def quantize(self, method: str, fmt: str) -> Parameters:
        if method not in POST_TRAINING:
            raise ConfigurationError(
                f"quantize supports {POST_TRAINING}, got {method!r}",
                module="harness",
                operation="cli",
            )
        fmt = QuantFormat.parse(fmt).name
        self._claim(self.outputs(method, fmt))
        quantizers = self.quantizers(fmt)
        record: dict = {"format": fmt, "method": method}
        if method == "rtn":
            params = quantize_model_rtn(self.base, QuantFormat.parse(fmt), quantizers)
        else:
            gptq = self.config.gptq
            taps = capture_layer_taps(
                self.base,
                self.dataset.train,
                propagate=gptq.propagate,
                quantizers=quantizers,
                batch_size=gptq.batch_size,
            )
            result = gptq_quantize_model(
                self.base, taps, quantizers, gptq.space, workers=gptq.workers
            )
            params = result.params
            record["propagate"] = gptq.propagate
            record["damp"] = [row.to_dict() for row in result.report]
        record["scales"] = {k: q.scale for k, q in quantizers.items()}
        record["distance"] = weight_distance(params.flatten(), self.base.flatten())
        self._save(params, fmt, method)
        self._write_record(f"{checkpoint_name(fmt, method)}.yaml", record)
        return params

    def qaft(self, fmt: str) -> Parameters:
        fmt = QuantFormat.parse(fmt).name
        self._claim(self.outputs("qaft", fmt))
        quantizers = self.quantizers(fmt)
        data = QaftData(
            train=self.dataset.train,
            val=self.val_blocks,
            test=self.test_blocks,
            eval_batch_size=self.config.eval.batch_size,
        )
        result = qaft_train(
            self.base,
            quantizers,
            data,
            self.config.qaft,
            seed=self.config.seed,
            label=fmt,
        )
        params = result.quantized()
        self._save(params, fmt, "qaft")
        self._write_record(
            f"{checkpoint_name(fmt, 'qaft')}.yaml",
            {
                "format": fmt,
                "method": "qaft",
                "best_lr": result.best_lr,
                "best_epoch": result.best_epoch,
                "best_val_nll": result.best_val_nll,
                "distance": weight_distance(params.flatten(), self.base.flatten()),
                "trace": [row.to_dict() for row in result.trace],
                "lr_summary": [run.summary() for run in result.runs],
            },
        )
        return params

    def _save(self, params: Parameters, fmt: str, method: str) -> None:
        save_checkpoint(
            params,
            self.checkpoints / checkpoint_name(fmt, method),
            metadata={
                "format": fmt,
                "method": method,
                "config_hash": self.config_hash,
            },
        )

    def models(self) -> list[tuple[str, str, Parameters]]:
        """The base model and every quantized checkpoint of the config."""
        found = [(FULL_PRECISION, "full-precision", self.base)]
        for fmt in self.config.formats:
            for method in self.config.methods:
                name = checkpoint_name(fmt, method)
                if self.has(name):
                    found.append((fmt, method, self.load(name)))
                else:
                    log.warning("No checkpoint %s: not evaluated", name)
        return found

    def evaluate(self) -> dict:
        self._claim(self.outputs("eval"))
        cfg = self.config.eval
        test = self.test_blocks
        taps = capture_layer_taps(
            self.base, test, propagate=FULL_PRECISION_TAPS, batch_size=cfg.batch_size
        )
        base_weights = self.base.quantized_weights()
        entries = []
        models = self.models()
        for fmt, method, params in models:
            test_nll = evaluate_nll(
                params, test, batch_size=cfg.batch_size, workers=cfg.workers
            )
            size_format = None if fmt == FULL_PRECISION else QuantFormat.parse(fmt)
            layers = []
            if fmt != FULL_PRECISION:
                weights = params.quantized_weights()
                layers = [
                    {
                        "layer": layer,
                        "mse": layer_mse(weights[layer], base_weights[layer], taps[layer]),
                    }
                    for layer in taps.layers
                ]
            log.info("%s %s: test NLL %.4f", fmt, method, test_nll)
            entries.append(
                {
                    "format": fmt,
                    "method": method,
                    "test_nll": test_nll,
                    "perplexity": perplexity(test_nll),
                    "weight_bytes": weight_size_bytes(self.config.model, size_format),
                    "layers": layers,
                }
            )

        generalization = []
        for corpus, source in zip(
            self.config.eval_corpora, self.config.source.get("eval_corpora", [])
        ):
            blocks = self._capped(
                ingest_test_split(corpus, self.config.model.seq_len, self.config.data),
                cfg.max_blocks,
            )
            for fmt, method, params in models:
                generalization.append(
                    {
                        "corpus": source,
                        "format": fmt,
                        "method": method,
                        "test_nll": evaluate_nll(
                            params, blocks, batch_size=cfg.batch_size, workers=cfg.workers
                        ),
                    }
                )
        record = {"models": entries, "generalization": generalization}
        self._write_record(EVALUATION_RECORD, record)
        return record

    def landscape(self) -> dict:
        self._claim(self.outputs("landscape"))
        cfg = self.config.landscape
        base = self.base
        probe = LossProbe(
            base,
            self._capped(self.dataset.train, cfg.eval_blocks),
            self._capped(self.dataset.val, cfg.eval_blocks),
            batch_size=self.config.eval.batch_size,
            workers=cfg.workers,
        )
        w = probe.origin

        points: dict[str, dict[str, np.ndarray]] = {}
        for fmt in self.config.formats:
            quantizers = self.quantizers(fmt)
            solutions = {
                "rtn": quantize_model_rtn(base, QuantFormat.parse(fmt), quantizers).flatten()
            }
            for method in ("gptq", "qaft"):
                name = checkpoint_name(fmt, method)
                if method in self.config.methods and self.has(name):
                    solutions[method] = self.load(name).flatten()
            points[fmt] = solutions

        radii = list(cfg.radii) if cfg.radii else default_radii(
            [weight_distance(s["rtn"], w) for s in points.values()], cfg.n_radii
        )
        profiles = radial_profiles(probe, radii, cfg.directions, self.config.seed)

        base_train, base_val = probe.losses_at(w)
        point_rows = [_point_row("w", 0.0, base_train, base_val)]
        for fmt, solutions in points.items():
            for method, vector in solutions.items():
                train, val = probe.losses_at(vector)
                point_rows.append(
                    _point_row(
                        checkpoint_name(fmt, method),
                        weight_distance(vector, w),
                        train,
                        val,
                    )
                )

        ts = np.linspace(0.0, 1.0, cfg.segment_samples).tolist()
        segments = []
        for fmt, solutions in points.items():
            anchors = {"w": w} | {
                checkpoint_name(fmt, m): v for m, v in solutions.items()
            }
            for (name_a, a), (name_b, b) in combinations(anchors.items(), 2):
                segments.append(
                    segment_profile(probe, a, b, ts, anchors=(name_a, name_b))
                )

        basin = []
        estimate = None
        try:
            estimate = basin_radius(profiles, threshold=cfg.threshold, split="train")
        except BasinEstimateRefused as e:
            log.warning("Basin radius refused: %s", e)
        for fmt, solutions in points.items():
            for method, vector in solutions.items():
                distance = weight_distance(vector, w)
                basin.append(
                    {
                        "format": fmt,
                        "method": method,
                        "distance": distance,
                        "radius": estimate.radius if estimate else None,
                        "base_loss": estimate.base_loss if estimate else None,
                        "plateau_loss": estimate.plateau_loss if estimate else None,
                        "inside": estimate.contains(distance) if estimate else None,
                    }
                )

        record = {
            "radii": radii,
            "profiles": [
                {"kind": POINT, "rows": point_rows},
                *({"kind": p.kind, "rows": p.rows()} for p in profiles),
                *({"kind": p.kind, "rows": p.rows()} for p in segments),
            ],
            "basin": basin,
        }
        self._write_record(LANDSCAPE_RECORD, record)
        return record

    def report(self, names: Iterable[str] | None = None) -> list[Path]:
        return emit_reports(self.results, self.reports, self.config_hash, names)

    def run_all(self) -> list[Path]:
        """
        Every stage in order.

        Without --force, stages whose outputs already exist are reused.
        """

        def stage(name: str, fn, fmt: str | None = None):
            if not self.force and self.done(name, fmt):
                log.info("Reusing %s%s", name, f" {fmt}" if fmt else "")
                return
            fn()

        stage("prep-data", self.prep_data)
        stage("train-base", self.train_base)
        for fmt in self.config.formats:
            for method in POST_TRAINING:
                if method in self.config.methods:
                    stage(method, lambda m=method, f=fmt: self.quantize(m, f), fmt)
            if "qaft" in self.config.methods:
                stage("qaft", lambda f=fmt: self.qaft(f), fmt)
        stage("eval", self.evaluate)
        stage("landscape", self.landscape)
        return self.report()


def _point_row(anchor: str, distance: float, train: float, val: float) -> dict:
    return {
        "kind": POINT,
        "anchor_a": "w",
        "anchor_b": anchor,
        "seed": None,
        "t_or_lambda": distance,
        "distance": distance,
        "train_nll": train,
        "val_nll": val,
    }
