"""Indoor hall mapping: LiDAR odometry, camera-rig fusion, map evaluation and a sensor simulator.

Submodules: ``geometry``, ``io``, ``registration``, ``odometry``, ``rigfusion``,
``evaluation``, ``synth`` and ``cli``. The most used names are re-exported here.
"""

__version__ = "0.1.0"

from hallmap.evaluation import ColorRamp, EvalReport, ExclusionBox, evaluate
from hallmap.geometry import PoseSE3, Rotation, Sim3Transform, se3_exp, se3_log
from hallmap.io import (
    PointCloud,
    RigCalibration,
    ScanFrame,
    Trajectory,
    load_point_cloud,
    load_trajectory,
    save_point_cloud,
    save_trajectory,
)
from hallmap.odometry import OdometryConfig, TrackingLostError, run_lidar_odometry
from hallmap.registration import IcpConfig, KdTree, icp, umeyama_align, voxel_downsample
from hallmap.rigfusion import PoseGraph, RigFusionConfig, optimize_pose_graph, run_rig_fusion

__all__ = [
    "ColorRamp", "EvalReport", "ExclusionBox", "IcpConfig", "KdTree", "OdometryConfig", "PointCloud", "PoseGraph",
    "PoseSE3", "RigCalibration", "RigFusionConfig", "Rotation", "ScanFrame", "Sim3Transform", "TrackingLostError",
    "Trajectory", "evaluate", "icp", "load_point_cloud", "load_trajectory", "optimize_pose_graph",
    "run_lidar_odometry", "run_rig_fusion", "save_point_cloud", "save_trajectory", "se3_exp", "se3_log",
    "umeyama_align", "voxel_downsample",
]
