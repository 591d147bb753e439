"""Variational folding autoencoder for open-surface point clouds, with evaluation tools."""

__version__ = "0.1.0"

from .errors import VFNetError
from .model import ModelConfig, VFNet
from .pointcloud import PointCloud
from .training import TrainConfig, train

__all__ = ["ModelConfig", "PointCloud", "TrainConfig", "VFNet", "VFNetError", "train", "__version__"]
