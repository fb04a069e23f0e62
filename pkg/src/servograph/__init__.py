"""Compositional visual servoing on demonstration graphs.

Demonstrations are segmented into parts, arranged on a similarity-weighted
directed graph, and recombined at inference time by goal-conditioned
shortest-path search; the selected parts are imitated by flow-based frame
alignment and sequence tracking. A deterministic synthetic tabletop
simulator makes the planning and servoing experiments reproducible.
"""

from .core import (
    Action,
    CameraIntrinsics,
    Frame,
    Gripper,
    RigidTransform,
    TransformMagnitude,
    compose,
    inverse,
    magnitude,
    project,
    unproject,
)
from .similarity import ScoreKind, SimilarityResult

__version__ = "0.1.0"

__all__ = [
    "Action",
    "CameraIntrinsics",
    "Frame",
    "Gripper",
    "RigidTransform",
    "ScoreKind",
    "SimilarityResult",
    "TransformMagnitude",
    "compose",
    "inverse",
    "magnitude",
    "project",
    "unproject",
    "__version__",
]
