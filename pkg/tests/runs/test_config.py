import pytest
import yaml

from qlab.base import METHODS, ConfigurationError
from qlab.harness import DEFAULT_FORMATS, load_config
from tests.constants import CONFIG, CORPUS


def write_config(tmp_path, data: dict):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def test_load_config():
    config = load_config(CONFIG)
    assert config.seed == 7
    assert config.model.seed == 7
    assert config.formats == ("int3", "int8")
    assert config.methods == ("rtn", "gptq", "qaft")
    assert config.gptq.damp_grid == (1e-2, 1.0, 100.0)
    assert config.corpus.resolve() == CORPUS.resolve()
    assert len(config.hash) == 16


def test_defaults(tmp_path):
    config = load_config(write_config(tmp_path, {"corpus": "corpus.txt"}))
    assert config.formats == DEFAULT_FORMATS
    assert config.methods == METHODS
    assert config.landscape.directions == 16
    assert config.landscape.radii is None
    assert config.eval.max_blocks == 64


def test_hash_follows_the_configuration(tmp_path):
    """
    Given:
    - the same configuration file in two directories

    Then:
    - both hash the same, since paths enter the hash as written
    - a seed or output override changes the hash
    """
    copy = tmp_path / "config.yaml"
    copy.write_text(CONFIG.read_text())
    assert load_config(copy).hash == load_config(CONFIG).hash
    assert load_config(CONFIG, seed=8).hash != load_config(CONFIG).hash
    assert load_config(CONFIG, out=tmp_path).hash != load_config(CONFIG).hash
    assert load_config(CONFIG, seed=8).model.seed == 8


@pytest.mark.parametrize(
    "data,match",
    [
        ({"corpus": "c.txt", "model": {"d_model": "big"}}, "model/d_model"),
        ({"corpus": "c.txt", "colour": "blue"}, "colour"),
        ({"seed": 1}, "corpus"),
        ({"corpus": "c.txt", "formats": ["int5"]}, "formats"),
        ({"corpus": "c.txt", "model": {"d_model": 10, "n_heads": 3}}, "n_heads"),
        ({"corpus": "c.txt", "gptq": {"propagate": "sideways"}}, "sideways"),
    ],
    ids=["type", "unknown-key", "no-corpus", "format", "heads", "tap-mode"],
)
def test_invalid_config(tmp_path, data, match):
    with pytest.raises(ConfigurationError, match=match):
        load_config(write_config(tmp_path, data))


def test_config_is_a_mapping(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("- corpus.txt\n")
    with pytest.raises(ConfigurationError, match="mapping"):
        load_config(path)
