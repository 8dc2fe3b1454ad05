"""Cycle-consistent deformation networks for point-cloud correspondence and
few-shot part-label transfer."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CorruptFile,
    CycleDeformError,
    DataError,
    DegenerateCloud,
    IndexOutOfRange,
    InsufficientShapes,
    LabelSpaceMismatch,
    LengthMismatch,
    NonFiniteLoss,
    NonFiniteValue,
    NumericalError,
    ParseError,
    ShapeMismatch,
    VersionMismatch,
)
from .geometry import LabeledCloud, chamfer_asym, chamfer_sym, icp_align, miou  # noqa: E402
from .model import Model, ModelConfig  # noqa: E402
from .training import TrainConfig, train  # noqa: E402

__all__ = [
    "CorruptFile", "CycleDeformError", "DataError", "DegenerateCloud", "IndexOutOfRange",
    "InsufficientShapes", "LabelSpaceMismatch", "LabeledCloud", "LengthMismatch", "Model",
    "ModelConfig", "NonFiniteLoss", "NonFiniteValue", "NumericalError", "ParseError",
    "ShapeMismatch", "TrainConfig", "VersionMismatch", "chamfer_asym", "chamfer_sym",
    "icp_align", "miou", "train",
]
