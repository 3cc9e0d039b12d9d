"""Point clouds as sets of local continuous surface patches, resampled at any density."""
from .autodiff import ContractError, DimensionError, Tensor, TrainingError
from .config import LossWeights, ModelConfig, TrainConfig
from .geometry import PointCloud, normalize_unit_ball
from .model import NeuralPointsModel, load_checkpoint, save_checkpoint
from .sampler import UpsampleRequest, target_count, upsample

__all__ = [
    "ContractError", "DimensionError", "Tensor", "TrainingError",
    "LossWeights", "ModelConfig", "TrainConfig",
    "PointCloud", "normalize_unit_ball",
    "NeuralPointsModel", "load_checkpoint", "save_checkpoint",
    "UpsampleRequest", "target_count", "upsample",
]

__version__ = "0.1.0"
