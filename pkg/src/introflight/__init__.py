"""Introspective perception for simulated forest flight.

A semi-dense direct visual odometry stack, a trajectory-library planner, and
a learned per-frame failure score that gates the flight loop: when the score
crosses the alert threshold the vehicle performs a short pure-translation
emergency maneuver instead of trusting its obstacle map.
"""

from .evalharness import (
    FR_GRID,
    ComparisonReport,
    RamCurve,
    ScoredInstance,
    baseline_curve,
    chance_curve,
    compare,
    oracle_curve,
    ram_curve,
    true_error,
)
from .features import FEATURE_DIM, FLOW_HISTORY, FlowConfig, compute_flow, extract_features
from .geometry import CameraIntrinsics, Pose, look_pose
from .introspection import FailurePredictor, failure_target, label_agreement, should_alert
from .mission import (
    CollectConfig,
    EpisodeLog,
    MissionConfig,
    MissionSetup,
    PerceptionPipeline,
    collect_episode,
    generate_dataset,
    intervention_metric,
    run_episode,
)
from .planning import (
    ControlCommand,
    ControlGains,
    ScoreWeights,
    Trajectory,
    TrajectoryLibrary,
    VehicleState,
    build_library,
    budget_by_dispersion,
    label_collisions,
    pd_control,
    pure_pursuit,
    score_trajectory,
    select_trajectory,
    step_vehicle,
)
from .vo import (
    InverseDepthMap,
    Keyframe,
    StereoConfig,
    TrackerConfig,
    TrackingResult,
    fill_holes,
    make_keyframe,
    mean_depth_variance,
    photometric_error,
    photometric_error_and_gradient,
    point_cloud,
    propagate,
    regularize,
    stereo_update,
    track,
)
from .world import (
    DegradationProfile,
    ForestWorld,
    degrade,
    generate_forest,
    obstacle_clearance,
    render,
)

__version__ = "0.1.0"

__all__ = [
    "FR_GRID",
    "FEATURE_DIM",
    "FLOW_HISTORY",
    "CameraIntrinsics",
    "CollectConfig",
    "ComparisonReport",
    "ControlCommand",
    "ControlGains",
    "DegradationProfile",
    "EpisodeLog",
    "FailurePredictor",
    "FlowConfig",
    "ForestWorld",
    "InverseDepthMap",
    "Keyframe",
    "MissionConfig",
    "MissionSetup",
    "PerceptionPipeline",
    "Pose",
    "RamCurve",
    "ScoreWeights",
    "ScoredInstance",
    "StereoConfig",
    "TrackerConfig",
    "TrackingResult",
    "Trajectory",
    "TrajectoryLibrary",
    "VehicleState",
    "baseline_curve",
    "budget_by_dispersion",
    "build_library",
    "chance_curve",
    "collect_episode",
    "compare",
    "compute_flow",
    "degrade",
    "extract_features",
    "fill_holes",
    "failure_target",
    "generate_dataset",
    "generate_forest",
    "intervention_metric",
    "label_agreement",
    "label_collisions",
    "look_pose",
    "make_keyframe",
    "mean_depth_variance",
    "obstacle_clearance",
    "oracle_curve",
    "pd_control",
    "photometric_error",
    "photometric_error_and_gradient",
    "point_cloud",
    "propagate",
    "regularize",
    "pure_pursuit",
    "ram_curve",
    "render",
    "run_episode",
    "score_trajectory",
    "select_trajectory",
    "should_alert",
    "step_vehicle",
    "stereo_update",
    "track",
    "true_error",
]
