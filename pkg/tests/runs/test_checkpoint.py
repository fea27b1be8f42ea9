import numpy as np
import pytest
import yaml

from qlab.base import CorruptionError
from qlab.harness.checkpoint import (
    blob_path,
    checkpoint_exists,
    load_checkpoint,
    manifest_path,
    save_checkpoint,
)
from qlab.lm import Parameters, parameter_shapes


@pytest.fixture
def saved(tiny_params, tmp_path):
    save_checkpoint(tiny_params, tmp_path / "base", metadata={"method": "fp32"})
    return tmp_path / "base"


def edit_manifest(path, edit):
    manifest = yaml.safe_load(manifest_path(path).read_text())
    edit(manifest)
    manifest_path(path).write_text(yaml.safe_dump(manifest, sort_keys=False))


def test_roundtrip_is_bitwise(tiny_params, saved):
    """
    Given:
    - a checkpoint of freshly initialized parameters

    Then:
    - every tensor loads back bit for bit, in the canonical order
    - the blob holds 4 bytes per parameter
    """
    loaded = load_checkpoint(saved)
    assert list(loaded) == list(tiny_params)
    for name, value in tiny_params.items():
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], value)
    assert blob_path(saved).stat().st_size == 4 * tiny_params.size
    assert checkpoint_exists(saved)
    assert not checkpoint_exists(saved.parent / "other")


def test_manifest_layout(tiny_params, saved):
    manifest = yaml.safe_load(manifest_path(saved).read_text())
    assert manifest["format"] == "qlab-checkpoint"
    assert manifest["dtype"] == "<f4"
    assert manifest["blob"] == "base.bin"
    assert manifest["metadata"] == {"method": "fp32"}
    assert manifest["architecture"] == tiny_params.config.to_dict()
    assert manifest["tensors"][0]["offset"] == 0


def _reshape_first(manifest):
    manifest["tensors"][0]["shape"] = list(reversed(manifest["tensors"][0]["shape"]))


def _shift_second(manifest):
    manifest["tensors"][1]["offset"] += 4


def _swap_names(manifest):
    t = manifest["tensors"]
    t[0]["name"], t[1]["name"] = t[1]["name"], t[0]["name"]


def _bad_version(manifest):
    manifest["version"] = 2


@pytest.mark.parametrize(
    "edit,match",
    [
        (_reshape_first, "shape"),
        (_shift_second, "starts at"),
        (_swap_names, "names or order"),
        (_bad_version, "invalid manifest"),
    ],
    ids=["shape", "offset", "order", "version"],
)
def test_corrupt_manifest(saved, edit, match):
    edit_manifest(saved, edit)
    with pytest.raises(CorruptionError, match=match):
        load_checkpoint(saved)


def test_blob_length_is_checked(saved):
    blob = blob_path(saved)
    data = blob.read_bytes()
    blob.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(CorruptionError, match="the blob has"):
        load_checkpoint(saved)
    blob.write_bytes(data[:-4])
    with pytest.raises(CorruptionError, match="too short"):
        load_checkpoint(saved)


def test_roundtrip_random_parameters(tiny_config, tmp_path):
    """
    Given:
    - 100 parameter sets with every tensor drawn at random

    Then:
    - each loads back bit for bit
    """
    rng = np.random.default_rng(100)
    shapes = parameter_shapes(tiny_config)
    for i in range(100):
        params = Parameters(
            tiny_config,
            {
                name: rng.standard_normal(shape).astype(np.float32)
                for name, shape in shapes.items()
            },
        )
        save_checkpoint(params, tmp_path / f"random-{i}")
        loaded = load_checkpoint(tmp_path / f"random-{i}")
        for name, value in params.items():
            np.testing.assert_array_equal(loaded[name], value)
