"""Auto-complete graph SLAM: fuse a rough emergency map with an online robot map."""

from .geometry import Pose2, anisotropic_cov, normalize_angle
from .graph import AcgGraph, LinkCandidatePolicy, deserialize, serialize
from .solver import KernelSpec, Schedule, optimize

__version__ = "0.1.0"

__all__ = [
    "AcgGraph",
    "KernelSpec",
    "LinkCandidatePolicy",
    "Pose2",
    "Schedule",
    "anisotropic_cov",
    "deserialize",
    "normalize_angle",
    "optimize",
    "serialize",
]
