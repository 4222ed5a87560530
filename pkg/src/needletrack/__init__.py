"""Multimodal 6-DoF needle pose inference on SE(3) from monocular images
and robot-grasp constraints."""
from .camera import CameraIntrinsics
from .geometry import Pose
from .needle import NeedleModel
from .pf import PfConfig, PfTracker
from .residuals import FrameLikelihood, NoiseCalibration, Observation, TermMask
from .svn import SvnConfig, SvnTracker
from .synth import TrajectorySpec, generate

__all__ = ["CameraIntrinsics", "Pose", "NeedleModel", "PfConfig", "PfTracker", "FrameLikelihood",
           "NoiseCalibration", "Observation", "TermMask", "SvnConfig", "SvnTracker",
           "TrajectorySpec", "generate"]
__version__ = "0.1.0"
