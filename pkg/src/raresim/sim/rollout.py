from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from ..expfam import log_density
from ..scenario import ScenarioSpec, base_family
from . import _kernels as K
from .core import LidarScan, Road, VehicleState, beam_angles, feature_dim
from .ego import ConstantEgo, IDMEgo

logger = logging.getLogger(__name__)

# Reported min_ttc when no beam ever closes; finite so CSV output stays numeric.
TTC_SENTINEL = 1e9


class SimulationDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class RolloutResult:
    """``min_ttc`` is the objective value ``f(X)`` (for toy runners, whatever they compute)."""

    min_ttc: float
    crashed: bool
    crash_step: int | None
    steps: int
    log_p0: float
    seed: int


def road_of(spec: ScenarioSpec) -> Road:
    return Road(spec.road_length_m, spec.lane_count, spec.lane_width_m)


def default_ego(spec: ScenarioSpec):
    if spec.ego_policy == "constant":
        return ConstantEgo()
    lane_y = road_of(spec).lane_center(spec.ego_lane) + spec.ego_offset_m
    return IDMEgo(lane_y=lane_y, target_speed=spec.ego_target_speed_mps)


def initial_world(sample, spec: ScenarioSpec):
    """``(state, dims, env_weights)`` for a sample laid out as ``[S, T, W, V, xi]``.

    W is in degrees and converted to radians here, once.
    """
    n = spec.n_env
    sample = np.asarray(sample, dtype=float)
    n_xi = spec.policy_dim * (n if spec.policy_per_vehicle else 1)
    if sample.shape != (4 * n + n_xi,):
        raise ValueError(f"sample has shape {sample.shape}, scenario needs ({4 * n + n_xi},)")
    s, t, w, v = (sample[i * n:(i + 1) * n] for i in range(4))
    xi = sample[4 * n:]
    road = road_of(spec)
    state = np.empty((n + 1, 4))
    state[0] = (spec.ego_x_m, road.lane_center(spec.ego_lane) + spec.ego_offset_m,
                math.radians(spec.ego_heading_deg), spec.ego_speed_mps)
    offsets = np.array(spec.env_x_offset_m) if spec.env_x_offset_m else np.zeros(n)
    centers = np.array([road.lane_center(lane) for lane in spec.env_lanes])
    state[1:, 0] = s + offsets
    state[1:, 1] = centers + t
    state[1:, 2] = np.radians(w)
    state[1:, 3] = v
    dims = np.tile([spec.vehicle_length_m, spec.vehicle_width_m], (n + 1, 1))
    f = feature_dim(spec.policy_n_beams)
    if spec.policy_per_vehicle:
        env_w = xi.reshape(n, 2, f)
    else:
        env_w = np.broadcast_to(xi.reshape(1, 2, f), (n, 2, f)).copy()
    return state, dims, env_w


def rollout(sample, scenario: ScenarioSpec, ego=None, seed: int = 0, trace=None) -> RolloutResult:
    """Simulate one realization and return its minimum beam TTC.

    The rollout stops at the horizon, at the end of the road, or at the first
    step where the ego rectangle intersects another vehicle. Environment
    vehicles pass through each other. ``trace`` (a path or text stream)
    receives ``step,vehicle,x,y,heading,speed`` rows.

    Raises :class:`SimulationDiverged` on a non-finite state.
    """
    ego = default_ego(scenario) if ego is None else ego
    state, dims, env_w = initial_world(sample, scenario)
    family, theta0 = base_family(scenario)
    log_p0 = log_density(family, theta0, sample)
    road = road_of(scenario)
    if trace is None and isinstance(ego, (IDMEgo, ConstantEgo)):
        min_ttc, row, crash_step, steps, diverged = K.rollout_kernel(
            state, dims, env_w, road.as_array(), scenario.n_beams, scenario.policy_n_beams,
            scenario.max_range_m, scenario.dt_s, scenario.n_steps, ego.kind, ego.params())
    else:
        min_ttc, row, crash_step, steps, diverged = _rollout_loop(state, dims, env_w, road, scenario, ego, trace)
    if diverged:
        raise SimulationDiverged(f"non-finite vehicle state after {steps} steps")
    return RolloutResult(
        min_ttc=float(min_ttc) if math.isfinite(min_ttc) else TTC_SENTINEL,
        crashed=row >= 0,
        crash_step=int(crash_step) if row >= 0 else None,
        steps=int(steps),
        log_p0=float(log_p0),
        seed=int(seed),
    )


def _rollout_loop(state, dims, env_w, road, spec, ego, trace):
    # Mirrors rollout_kernel step for step, with a Python-level ego policy.
    own_file = isinstance(trace, (str, bytes)) or hasattr(trace, "__fspath__")
    fh = open(trace, "w", newline="") if own_file else trace
    writer = None
    if fh is not None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "vehicle", "x", "y", "heading", "speed"])
    try:
        return _loop(state, dims, env_w, road, spec, ego, writer)
    finally:
        if own_file:
            fh.close()


def _loop(state, dims, env_w, road, spec, ego, writer):
    m = state.shape[0]
    road_arr = road.as_array()
    nb, pb, mr = spec.n_beams, spec.policy_n_beams, spec.max_range_m
    ranges, rates, hits = np.empty(nb), np.empty(nb), np.empty(nb, dtype=np.int64)
    pr, prr, ph = np.empty(pb), np.empty(pb), np.empty(pb, dtype=np.int64)
    feats = np.empty(feature_dim(pb))
    actions = np.zeros((m, 2))
    nxt = np.empty_like(state)
    angles = beam_angles(nb)
    builtin = isinstance(ego, (IDMEgo, ConstantEgo))
    min_ttc = math.inf
    steps = 0
    for t in range(spec.n_steps + 1):
        if writer is not None:
            for i in range(m):
                writer.writerow([t, i, *(repr(float(v)) for v in state[i])])
        K.cast(0, state, dims, nb, mr, ranges, rates, hits)
        min_ttc = min(min_ttc, K.beam_ttc(ranges, rates))
        row = K.crash_index(state, dims)
        if row >= 0:
            return min_ttc, row, t, steps, False
        if t == spec.n_steps or state[0, 0] >= road_arr[0]:
            break
        for j in range(1, m):
            K.cast(j, state, dims, pb, mr, pr, prr, ph)
            K.features(state[j], pr, prr, road_arr, mr, feats)
            actions[j] = K.clamp_action(*K.linear_action(env_w[j - 1], feats))
        ego_state = VehicleState(*state[0], *dims[0])
        scan = LidarScan(ranges.copy(), rates.copy(), angles, hits.copy())
        if builtin:
            actions[0] = ego.act(ego_state, scan, road, max_range=mr)
        else:
            actions[0] = K.clamp_action(*map(float, ego.act(ego_state, scan, road)))
        K.kinematic_step(state, actions, spec.dt_s, nxt)
        state, nxt = nxt, state
        steps += 1
        if not np.all(np.isfinite(state)):
            return min_ttc, -1, -1, steps, True
    return min_ttc, -1, -1, steps, False
