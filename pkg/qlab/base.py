import importlib.resources
import logging
from importlib.resources.abc import Traversable

import numpy as np

log = logging.getLogger(__name__)

DATADIR: Traversable = importlib.resources.files("qlab") / "data"

# Models and checkpoints are binary32; gradient checks may promote to binary64.
DTYPE = np.float32
CHECKPOINT_DTYPE = "<f4"

BYTE_VOCAB = 256
PAD_ID = BYTE_VOCAB
VOCAB_SIZE = BYTE_VOCAB + 1

SUPPORTED_BITS = (2, 3, 4, 6, 8)

# Linear layers of one transformer block that get quantized, in the
# order they are visited by GPTQ and flattened into w.
QUANTIZED_LAYERS = (
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.out",
    "mlp.fc1",
    "mlp.fc2",
)

METHODS = ("rtn", "gptq", "qaft")
FULL_PRECISION = "fp32"

type LayerName = str
type ParameterName = str


class QlabError(Exception):
    """Base error: carries the module and operation that raised it."""

    module: str = "qlab"

    def __init__(
        self,
        message: str,
        *,
        module: str | None = None,
        operation: str | None = None,
    ):
        super().__init__(message)
        if module is not None:
            self.module = module
        self.operation = operation or "unknown"

    @property
    def diagnostic(self) -> str:
        return f"[{self.module}.{self.operation}] {self}"


class ContractViolation(QlabError, ValueError):
    """Inputs do not satisfy an operation's preconditions (shapes, ranges)."""


class ConfigurationError(QlabError, ValueError):
    """The run configuration or a format name is invalid."""


class DegenerateInputError(QlabError, ValueError):
    """The input is well-formed but carries no information (e.g. all zeros)."""


class IngestionError(QlabError, ValueError):
    """The corpus cannot be packed into the configured blocks."""


class CorruptionError(QlabError, ValueError):
    """A checkpoint manifest does not match its blob."""


class BasinEstimateRefused(QlabError, ValueError):
    """Radial profiles do not support a basin radius estimate."""


class NumericFault(QlabError, ArithmeticError):
    """A kernel produced NaN or Inf."""


class CholeskyFailure(NumericFault):
    """The damped Hessian is not numerically positive definite."""


class TrainingFault(QlabError, RuntimeError):
    """Training diverged and no usable parameters are left."""


class MissingArtifactError(QlabError, FileNotFoundError):
    """A stage needs the output of an earlier stage that was not run."""


class ArtifactExistsError(QlabError, FileExistsError):
    """A stage would overwrite existing outputs without --force."""
