"""End-to-end run of every stage on the seconds-long test configuration."""

import logging

import numpy as np
import pytest
import yaml

from qlab.base import ArtifactExistsError, MissingArtifactError
from qlab.harness import load_config
from qlab.harness.pipeline import Experiment, checkpoint_name
from qlab.harness.reports import read_config_hash, read_csv
from qlab.quantizer import QuantFormat, calibrate_model, quantize_model_rtn
from tests.constants import CONFIG, CORPUS


@pytest.fixture
def exp(tmp_path) -> Experiment:
    return Experiment(load_config(CONFIG, out=tmp_path / "run"))


def test_stages_need_the_base_model(exp):
    with pytest.raises(MissingArtifactError, match="run train-base first"):
        exp.quantize("rtn", "int3")


def test_prep_data_refuses_to_overwrite(exp):
    exp.prep_data()
    with pytest.raises(ArtifactExistsError, match="--force"):
        exp.prep_data()
    exp.force = True
    exp.prep_data()


@pytest.mark.slow
def test_run_all(exp, caplog):
    """
    Given:
    - the test configuration: int3 and int8, every method, one block

    When:
    - every stage runs

    Then:
    - all reports carry the run's config hash
    - the row counts follow the configuration
    - the RTN checkpoint equals Q(W) of the base checkpoint
    - a second run reuses every stage
    - a forced rerun writes byte-identical reports
    """
    written = exp.run_all()
    names = sorted(p.stem for p in written)
    assert names == [
        "basin",
        "gptq_damp",
        "landscape",
        "misalignment",
        "qaft_lr",
        "qaft_trace",
        "tradeoff",
    ]
    for path in written:
        assert read_config_hash(path) == exp.config_hash

    def rows(name):
        return len(read_csv(exp.reports / f"{name}.csv"))

    # 2 formats x 3 methods, 6 quantized layers in one block.
    assert rows("tradeoff") == 7
    assert rows("misalignment") == 6 * 7
    assert rows("gptq_damp") == 2 * 6
    assert rows("qaft_lr") == 2 * 2
    assert rows("qaft_trace") == 2 * 2 * 2
    assert rows("basin") == 6
    # 7 points, 2 directions x 7 radii, 6 segments of 3 samples per format.
    assert rows("landscape") == 7 + 14 + 2 * 6 * 3

    base = exp.base
    rtn = exp.load(checkpoint_name("int3", "rtn"))
    expected = quantize_model_rtn(
        base, QuantFormat(3), calibrate_model(base, QuantFormat(3))
    )
    for name in rtn:
        np.testing.assert_array_equal(rtn[name], expected[name])

    record = yaml.safe_load((exp.results / "int8-qaft.yaml").read_text())
    assert record["config_hash"] == exp.config_hash
    assert record["best_lr"] in (1e-4, 1e-3)

    caplog.set_level(logging.INFO)
    Experiment(exp.config).run_all()
    assert "Reusing landscape" in caplog.text

    first = {p.name: p.read_bytes() for p in written}
    for path in Experiment(exp.config, force=True).run_all():
        assert path.read_bytes() == first[path.name], path.name


@pytest.mark.slow
def test_generalization_on_extra_corpora(tmp_path):
    """
    Given:
    - a configuration listing its own corpus under eval_corpora
    When:
    - the base model and the int3 RTN model are evaluated
    Then:
    - generalization.csv has one row per model, named by the corpus as written
    - each row repeats the test NLL of the main evaluation
    """
    data = yaml.safe_load(CONFIG.read_text())
    data.update(
        corpus=str(CORPUS),
        eval_corpora=[str(CORPUS)],
        formats=["int3"],
        methods=["rtn"],
        out=str(tmp_path / "run"),
    )
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(data))
    exp = Experiment(load_config(config_path))

    exp.train_base()
    exp.quantize("rtn", "int3")
    record = exp.evaluate()

    expected = {(m["format"], m["method"]): m["test_nll"] for m in record["models"]}
    rows = record["generalization"]
    assert [(r["format"], r["method"]) for r in rows] == list(expected)
    for row in rows:
        assert row["corpus"] == str(CORPUS)
        assert row["test_nll"] == pytest.approx(expected[row["format"], row["method"]])

    (path,) = exp.report(["generalization"])
    assert len(read_csv(path)) == 2
    assert read_config_hash(path) == exp.config_hash
