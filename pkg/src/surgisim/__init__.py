"""surgisim: desk-scale surgical robot simulator with teleoperation and RL."""

from .kinematics import (
    Pose,
    KinematicChain,
    DHRow,
    JointKind,
    dh_transform,
    forward_kinematics,
    inverse_kinematics_psm,
    inverse_kinematics_ecm,
    psm_chain,
    ecm_chain,
)

__all__ = [
    "Pose",
    "KinematicChain",
    "DHRow",
    "JointKind",
    "dh_transform",
    "forward_kinematics",
    "inverse_kinematics_psm",
    "inverse_kinematics_ecm",
    "psm_chain",
    "ecm_chain",
]

__version__ = "0.1.0"
