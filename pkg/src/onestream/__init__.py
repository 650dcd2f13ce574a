"""One-stream transformer tracker for 3D point clouds."""

from .config import BackboneConfig, BEVConfig, LossWeights, TrackerConfig
from .data import SceneSpec, TrackletFrame, generate_scene
from .geometry import Box3D, VoxelSpec
from .pipeline import TrackerModel, TrackResult, track, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "BEVConfig", "Box3D", "LossWeights", "SceneSpec",
    "TrackerConfig", "TrackerModel", "TrackResult", "TrackletFrame",
    "VoxelSpec", "generate_scene", "track", "train", "__version__",
]
