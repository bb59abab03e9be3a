"""Point-cloud semantic segmentation with dilated grid-cell convolutions and attention gates."""
from .estimator import PAAConvSegmenter, SurfaceNormalEstimator
from .geometry import VoxelGrid, atrous_offsets, build_grid, canonical_order
from .network import Network, NetworkConfig, build_network
from .normals import KdTree, estimate_normals, fit_plane_normal, orient_normal
from .training import TrainConfig, sgd_momentum_step, train

__all__ = [
    "KdTree", "Network", "NetworkConfig", "PAAConvSegmenter", "SurfaceNormalEstimator",
    "TrainConfig", "VoxelGrid", "atrous_offsets", "build_grid", "build_network",
    "canonical_order", "estimate_normals", "fit_plane_normal", "orient_normal",
    "sgd_momentum_step", "train",
]
__version__ = "0.1.0"
