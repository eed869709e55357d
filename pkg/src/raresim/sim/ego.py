"""Ego (system-under-test) policies.

Any object with ``act(state, scan, road) -> (accel, steering_rate)`` can drive
the ego. Set ``concurrent_safe = False`` on policies that hold non-shareable
resources; the orchestrator then keeps one instance per worker process.

The two built-ins also expose ``kind`` and ``params()`` so rollouts can run
entirely inside the jitted kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K


@dataclass(frozen=True)
class IDMEgo:
    """Intelligent-driver-model cruise control with proportional lane keeping."""

    lane_y: float
    target_speed: float = 25.0
    headway: float = 1.5
    min_gap: float = 2.0
    max_accel: float = 1.5
    comfort_decel: float = 2.0
    k_lateral: float = 0.15
    k_heading: float = 3.0
    cone_deg: float = 10.0
    concurrent_safe = True
    kind = K.EGO_IDM

    def params(self):
        return np.array([
            self.target_speed, self.headway, self.min_gap, self.max_accel, self.comfort_decel,
            self.lane_y, self.k_lateral, self.k_heading, math.radians(self.cone_deg),
        ])

    def act(self, state, scan, road, max_range=math.inf):
        row = np.array([state.x, state.y, state.heading, state.speed])
        a, s = K.idm_action(row, np.asarray(scan.ranges, float), np.asarray(scan.range_rates, float),
                            scan.n_beams, float(max_range), self.params(), state.length)
        return float(a), float(s)


@dataclass(frozen=True)
class ConstantEgo:
    """Fixed actuation; with the defaults the ego holds speed and heading."""

    accel: float = 0.0
    steering_rate: float = 0.0
    concurrent_safe = True
    kind = K.EGO_CONSTANT

    def params(self):
        return np.array([self.accel, self.steering_rate])

    def act(self, state, scan, road, max_range=math.inf):
        a, s = K.clamp_action(self.accel, self.steering_rate)
        return float(a), float(s)
