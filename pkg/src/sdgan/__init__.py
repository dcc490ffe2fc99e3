"""Two-mode adversarial completion of occluded face images on numpy."""

from .errors import (
    BoundsError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    NumericError,
    SdganError,
)
from .tensor import Tensor
from .trainer import TrainConfig, train

__version__ = "0.1.0"
