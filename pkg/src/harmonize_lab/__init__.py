"""Image harmonization with external background style fusion and a
region-wise contrastive objective."""

__version__ = "0.1.0"

from .model import NetworkConfig, build_network
from .training import TrainConfig, train_loop

__all__ = ["NetworkConfig", "TrainConfig", "build_network", "train_loop", "__version__"]
