"""Multi-view voxel reconstruction with global-aware attention fusion, on a numpy autodiff engine."""

from .config import DESK, TINY, IMBTrainConfig, LossWeights, ModelConfig, TrainConfig
from .errors import ContractError, FormatError
from .model import GARNet

__all__ = [
    "DESK",
    "TINY",
    "ContractError",
    "FormatError",
    "GARNet",
    "IMBTrainConfig",
    "LossWeights",
    "ModelConfig",
    "TrainConfig",
]
