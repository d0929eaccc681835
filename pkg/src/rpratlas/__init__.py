"""Workspace, singularity and uniqueness-domain analysis of a planar 3-RPR manipulator."""
from .kinematics import (
    IDENTICALLY_ZERO,
    DegenerateConfiguration,
    Geometry,
    JacobianPair,
    JointVector,
    Pose,
    det_a,
    inverse_kinematics,
    jacobians,
    residual,
    singular_y,
    solve_dkp,
    within_limits,
)

__all__ = [
    "IDENTICALLY_ZERO",
    "DegenerateConfiguration",
    "Geometry",
    "JacobianPair",
    "JointVector",
    "Pose",
    "det_a",
    "inverse_kinematics",
    "jacobians",
    "residual",
    "singular_y",
    "solve_dkp",
    "within_limits",
]
