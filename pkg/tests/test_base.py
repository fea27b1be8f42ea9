import pytest

from qlab.base import (
    FULL_PRECISION,
    METHODS,
    QUANTIZED_LAYERS,
    SUPPORTED_BITS,
    ArtifactExistsError,
    BasinEstimateRefused,
    CholeskyFailure,
    ConfigurationError,
    ContractViolation,
    CorruptionError,
    DegenerateInputError,
    IngestionError,
    MissingArtifactError,
    NumericFault,
    QlabError,
    TrainingFault,
)


def test_constants():
    assert SUPPORTED_BITS == (2, 3, 4, 6, 8)
    assert METHODS == ("rtn", "gptq", "qaft")
    assert len(QUANTIZED_LAYERS) == 6
    assert FULL_PRECISION == "fp32"


@pytest.mark.parametrize(
    "error,builtin",
    [
        (ContractViolation, ValueError),
        (ConfigurationError, ValueError),
        (DegenerateInputError, ValueError),
        (IngestionError, ValueError),
        (CorruptionError, ValueError),
        (BasinEstimateRefused, ValueError),
        (NumericFault, ArithmeticError),
        (CholeskyFailure, NumericFault),
        (TrainingFault, RuntimeError),
        (MissingArtifactError, FileNotFoundError),
        (ArtifactExistsError, FileExistsError),
    ],
)
def test_error_hierarchy(error, builtin):
    assert issubclass(error, QlabError)
    assert issubclass(error, builtin)


def test_diagnostic():
    """
    Given:
    - an error raised by an operation of a module

    Then:
    - the diagnostic names both before the message
    """
    e = CholeskyFailure("not positive definite", module="gptq", operation="gptq_quantize_layer")
    assert e.diagnostic == "[gptq.gptq_quantize_layer] not positive definite"
    assert QlabError("boom").diagnostic == "[qlab.unknown] boom"
