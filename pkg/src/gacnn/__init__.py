"""Graph attention convolution network for airborne LiDAR point classification."""
from .geometry import PointCloud, farthest_point_sample, kde_density, knn_graph
from .network import GacnnConfig, GacnnModel, predict
from .training import TrainConfig, train

__all__ = [
    "GacnnConfig",
    "GacnnModel",
    "PointCloud",
    "TrainConfig",
    "farthest_point_sample",
    "kde_density",
    "knn_graph",
    "predict",
    "train",
]
