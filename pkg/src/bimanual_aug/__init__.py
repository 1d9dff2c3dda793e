"""Keypoint-based spatial augmentation of bimanual human demos."""

from .augment import AugmentationSpec, GroundedDemo, augment_demo, generate_dataset
from .geometry import Plane, Pose
from .parse import parse_demo
from .template import TaskTemplate, ground_segments
from .trajectory import Trajectory

__all__ = [
    "AugmentationSpec",
    "GroundedDemo",
    "Plane",
    "Pose",
    "TaskTemplate",
    "Trajectory",
    "augment_demo",
    "generate_dataset",
    "ground_segments",
    "parse_demo",
]
