"""Deterministic 2D multi-lane highway simulator with lidar-based TTC."""

from .core import (
    LidarScan,
    Road,
    VehicleState,
    beam_ttc,
    cast_rays,
    check_crash,
    env_policy_act,
    feature_dim,
    policy_features,
    rects_overlap,
    step,
)
from .ego import ConstantEgo, IDMEgo
from .rollout import TTC_SENTINEL, RolloutResult, SimulationDiverged, initial_world, rollout

__all__ = [
    "ConstantEgo", "IDMEgo", "LidarScan", "Road", "RolloutResult", "SimulationDiverged",
    "TTC_SENTINEL", "VehicleState", "beam_ttc", "cast_rays", "check_crash", "env_policy_act",
    "feature_dim", "initial_world", "policy_features", "rects_overlap", "rollout", "step",
]
