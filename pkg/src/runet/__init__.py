"""Recurrent U-Net for binary segmentation on a small numpy autodiff core."""
from .errors import (
    CheckpointFormatError,
    ContractViolation,
    DivergenceError,
    InvalidConfigError,
    InvalidDataError,
    InvalidShapeError,
    RunetError,
)
from .models import MODEL_NAMES, ModelSpec, build_model
from .tensor import Parameter, Tensor, backward, no_grad, wide_precision

__version__ = "0.1.0"
