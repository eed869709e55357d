from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("vehicle length and width must be positive")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


@dataclass(frozen=True)
class Road:
    length: float = 2000.0
    lane_count: int = 6
    lane_width: float = 3.7

    def lane_center(self, lane: int) -> float:
        return (lane + 0.5) * self.lane_width

    def as_array(self):
        return np.array([self.length, float(self.lane_count), self.lane_width])


@dataclass(frozen=True, eq=False)
class LidarScan:
    ranges: np.ndarray
    range_rates: np.ndarray
    angles: np.ndarray
    hits: np.ndarray

    @property
    def n_beams(self):
        return self.ranges.shape[0]


def pack(vehicles: Sequence[VehicleState]):
    state = np.array([[v.x, v.y, v.heading, v.speed] for v in vehicles], dtype=float).reshape(-1, 4)
    dims = np.array([[v.length, v.width] for v in vehicles], dtype=float).reshape(-1, 2)
    return state, dims


def unpack(state, dims):
    return [VehicleState(*map(float, s), *map(float, d)) for s, d in zip(state, dims)]


def beam_angles(n_beams: int):
    return 2.0 * math.pi * np.arange(n_beams) / n_beams


def scan_row(state, dims, row, n_beams, max_range):
    ranges = np.empty(n_beams)
    rates = np.empty(n_beams)
    hits = np.empty(n_beams, dtype=np.int64)
    K.cast(row, state, dims, n_beams, max_range, ranges, rates, hits)
    return LidarScan(ranges, rates, beam_angles(n_beams), hits)


def cast_rays(ego: VehicleState, others: Sequence[VehicleState], n_beams: int, max_range: float) -> LidarScan:
    """Lidar from the ego center; ``hits`` holds indices into ``others`` (-1 on a miss)."""
    if n_beams < 4:
        raise ValueError("n_beams must be >= 4")
    state, dims = pack([ego, *others])
    scan = scan_row(state, dims, 0, n_beams, float(max_range))
    hits = np.where(scan.hits >= 0, scan.hits - 1, -1)
    return LidarScan(scan.ranges, scan.range_rates, scan.angles, hits)


def beam_ttc(scan: LidarScan) -> float:
    """Smallest ``-s/s_dot`` over closing beams; ``inf`` when nothing closes."""
    return float(K.beam_ttc(np.asarray(scan.ranges, float), np.asarray(scan.range_rates, float)))


def check_crash(ego: VehicleState, others: Sequence[VehicleState]) -> int | None:
    if not others:
        return None
    state, dims = pack([ego, *others])
    row = K.crash_index(state, dims)
    return None if row < 0 else row - 1


def rects_overlap(a: VehicleState, b: VehicleState) -> bool:
    return bool(K.rects_overlap(a.x, a.y, a.heading, a.length, a.width,
                                b.x, b.y, b.heading, b.length, b.width))


def feature_dim(n_beams: int) -> int:
    return K.N_STATE_FEATURES + 2 * n_beams


def policy_features(state: VehicleState, scan: LidarScan, road: Road, max_range: float):
    out = np.empty(feature_dim(scan.n_beams))
    row = np.array([state.x, state.y, state.heading, state.speed])
    K.features(row, np.asarray(scan.ranges, float), np.asarray(scan.range_rates, float),
               road.as_array(), float(max_range), out)
    return out


def env_policy_act(weights, state: VehicleState, scan: LidarScan, road: Road,
                   max_range: float = 100.0, clamp: bool = True):
    """Surrogate environment driver: ``(accel, steering_rate) = W @ features``.

    ``weights`` has length ``2 * F`` (acceleration row then steering row).
    """
    feats = policy_features(state, scan, road, max_range)
    w = np.asarray(weights, dtype=float)
    if w.size != 2 * feats.size:
        raise ValueError(f"policy weights have length {w.size}, expected {2 * feats.size}")
    a, s = K.linear_action(w.reshape(2, feats.size), feats)
    if clamp:
        a, s = K.clamp_action(a, s)
    return float(a), float(s)


def step(world: Sequence[VehicleState], actions, dt: float):
    """Kinematic unicycle update for every vehicle."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    state, dims = pack(world)
    acts = np.asarray(actions, dtype=float).reshape(len(world), 2)
    out = np.empty_like(state)
    K.kinematic_step(state, acts, float(dt), out)
    return unpack(out, dims)
