"""Keypoint-based monocular visual odometry: geometry, pose estimation, losses and evaluation."""
from .errors import (BehindCameraError, ConfigError, DegenerateError, DimensionMismatchError,
                     EstimationFailedError, FormatError, GeometryError, InvalidDepthError, Kp3dError,
                     NoNegativeError, NonConvergenceError)
from .evaluation import KeypointMetricConfig, Trajectory, kitti_drift, umeyama_sim3
from .geometry import CameraIntrinsics, Pose, Sim3, Twist, pose_error, project, se3_exp, se3_log, unproject
from .losses import LossWeights, total_loss
from .matching import CorrespondenceSet, KeypointFrame, reciprocal_match
from .pose import PoseEstimate, RansacConfig, estimate_relative_pose, pnp_ransac, procrustes
from .synth import SceneConfig, generate_planar_scene, generate_point_scene

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError", "ConfigError", "DegenerateError", "DimensionMismatchError", "EstimationFailedError",
    "FormatError", "GeometryError", "InvalidDepthError", "Kp3dError", "NoNegativeError", "NonConvergenceError",
    "KeypointMetricConfig", "Trajectory", "kitti_drift", "umeyama_sim3",
    "CameraIntrinsics", "Pose", "Sim3", "Twist", "pose_error", "project", "se3_exp", "se3_log", "unproject",
    "LossWeights", "total_loss", "CorrespondenceSet", "KeypointFrame", "reciprocal_match",
    "PoseEstimate", "RansacConfig", "estimate_relative_pose", "pnp_ransac", "procrustes",
    "SceneConfig", "generate_planar_scene", "generate_point_scene",
]
