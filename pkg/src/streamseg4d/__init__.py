"""Latency-aware streaming 4D panoptic segmentation over voxel memories."""

from .geometry import RigidTransform, TwistVector, se3_exp, se3_log
from .scene import SceneConfig, generate_scene
from .runtime import RunConfig, run_stream
from .metrics import streaming_evaluate

__version__ = "0.1.0"

__all__ = [
    "RigidTransform",
    "TwistVector",
    "se3_exp",
    "se3_log",
    "SceneConfig",
    "generate_scene",
    "RunConfig",
    "run_stream",
    "streaming_evaluate",
]
