import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raresim.expfam import sample as draw
from raresim.scenario import base_family
from raresim.sim import (
    TTC_SENTINEL,
    ConstantEgo,
    IDMEgo,
    Road,
    SimulationDiverged,
    VehicleState,
    beam_ttc,
    cast_rays,
    check_crash,
    env_policy_act,
    feature_dim,
    initial_world,
    policy_features,
    rects_overlap,
    rollout,
    step,
)

ROAD = Road()


def car(x, y=0.0, heading=0.0, speed=0.0, length=4.5, width=1.8):
    return VehicleState(x, y, heading, speed, length, width)


def one_lead_spec(spec, **kw):
    """Ego plus one vehicle in the ego lane; one policy beam so d = 16."""
    d = 2 * feature_dim(1)
    base = dict(
        vehicle_count=2, env_lanes=(spec.ego_lane,), env_x_offset_m=(0.0,),
        ego_policy="constant", policy_n_beams=1, policy_dim=d,
        mu0=np.zeros(d), chol=np.eye(d),
    )
    base.update(kw)
    return spec.with_changes(**base)


def point_in_rect(px, py, r: VehicleState):
    c, s = math.cos(r.heading), math.sin(r.heading)
    dx, dy = px - r.x, py - r.y
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * r.length) & (np.abs(v) <= 0.5 * r.width)


def rect_points(r: VehicleState, spacing=0.01):
    # 1 cm grid over the rectangle plus its boundary and corners, in world coordinates.
    hl, hw = 0.5 * r.length, 0.5 * r.width
    us = np.unique(np.r_[np.arange(-hl, hl, spacing), hl])
    vs = np.unique(np.r_[np.arange(-hw, hw, spacing), hw])
    u, v = np.meshgrid(us, vs)
    u, v = u.ravel(), v.ravel()
    c, s = math.cos(r.heading), math.sin(r.heading)
    return r.x + c * u - s * v, r.y + s * u + c * v


def sampled_overlap(a, b):
    if np.any(point_in_rect(*rect_points(a), b)):
        return True
    return bool(np.any(point_in_rect(*rect_points(b), a)))


# -- lidar ------------------------------------------------------------------

def test_forward_beam_range_and_rate():
    ego = car(0.0, speed=5.0)
    scan = cast_rays(ego, [car(22.25)], 8, 100.0)
    assert scan.ranges[0] == 20.0
    assert scan.range_rates[0] == -5.0
    assert scan.hits[0] == 0
    assert np.all(scan.hits[1:] == -1)
    assert np.all(scan.ranges[1:] == 100.0)


def test_head_on_ttc_is_exact():
    ego = car(0.0, speed=5.0)
    other = car(22.25, heading=math.pi, speed=5.0)
    scan = cast_rays(ego, [other], 36, 100.0)
    assert scan.ranges[0] == 20.0
    assert scan.range_rates[0] == -10.0
    assert beam_ttc(scan) == 2.0


@settings(max_examples=200, deadline=None)
@given(gap=st.floats(1.0, 90.0), v1=st.floats(0.0, 40.0), v2=st.floats(0.0, 40.0))
def test_head_on_ttc_matches_gap_over_closing_speed(gap, v1, v2):
    ego = car(0.0, speed=v1)
    other = car(gap + 2.25, heading=math.pi, speed=v2)
    ttc = beam_ttc(cast_rays(ego, [other], 36, 100.0))
    if v1 + v2 == 0:
        assert ttc == math.inf
    else:
        assert ttc == pytest.approx(gap / (v1 + v2), rel=1e-12)


def test_rear_vehicle_is_seen_by_the_backward_beam():
    scan = cast_rays(car(0.0, speed=10.0), [car(-30.0, speed=15.0)], 4, 100.0)
    assert scan.ranges[2] == pytest.approx(27.75, abs=1e-12)
    assert scan.range_rates[2] == pytest.approx(-5.0, abs=1e-12)
    assert beam_ttc(scan) == pytest.approx(27.75 / 5.0)


def test_nearest_vehicle_wins_and_out_of_range_is_a_miss():
    scan = cast_rays(car(0.0), [car(60.0), car(30.0), car(300.0, y=0.5)], 4, 100.0)
    assert scan.hits[0] == 1
    assert scan.ranges[0] == pytest.approx(27.75)
    far = cast_rays(car(0.0), [car(300.0)], 4, 100.0)
    assert far.hits[0] == -1 and far.ranges[0] == 100.0


def test_no_closing_beam_gives_infinite_ttc():
    assert beam_ttc(cast_rays(car(0.0, speed=10.0), [car(30.0, speed=20.0)], 8, 100.0)) == math.inf
    assert beam_ttc(cast_rays(car(0.0), [], 8, 100.0)) == math.inf


def test_range_rates_flip_under_time_reversal():
    rng = np.random.default_rng(4)
    for _ in range(50):
        ego = car(0.0, rng.uniform(-1, 1), rng.uniform(-0.2, 0.2), rng.uniform(0, 30))
        other = car(rng.uniform(8, 60), rng.uniform(-4, 4), rng.uniform(-0.2, 0.2), rng.uniform(0, 30))
        fwd = cast_rays(ego, [other], 36, 100.0)
        # Turning both velocities around: headings + pi, and the scan frame rotates with the ego.
        back = cast_rays(car(ego.x, ego.y, ego.heading + math.pi, ego.speed),
                         [car(other.x, other.y, other.heading + math.pi, other.speed)], 36, 100.0)
        idx = (np.arange(36) + 18) % 36
        np.testing.assert_allclose(back.ranges[idx], fwd.ranges, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(back.range_rates[idx], -fwd.range_rates, rtol=1e-9, atol=1e-9)


def test_cast_rays_rejects_too_few_beams():
    with pytest.raises(ValueError):
        cast_rays(car(0.0), [], 3, 100.0)


# -- crash detection ----------------------------------------------------------

def test_crash_examples():
    assert check_crash(car(0.0), [car(4.4)]) == 0
    assert check_crash(car(0.0), [car(4.5)]) == 0  # touching counts
    assert check_crash(car(0.0), [car(4.51)]) is None
    assert check_crash(car(0.0), [car(20.0), car(0.0, y=1.7)]) == 1
    assert check_crash(car(0.0), [car(0.0, y=1.81)]) is None
    assert check_crash(car(0.0), []) is None
    # Perpendicular car: half-extent along x is half the width.
    assert rects_overlap(car(0.0), car(2.25 + 0.9 - 0.05, heading=math.pi / 2))
    assert not rects_overlap(car(0.0), car(2.25 + 0.9 + 0.05, heading=math.pi / 2))
    # Axis-aligned bounding boxes overlap here, the rectangles do not.
    b = car(4.0, 2.6, heading=math.pi / 4)
    assert abs(b.x) < 2.25 + 2.23 and abs(b.y) < 0.9 + 2.23
    assert not rects_overlap(car(0.0), b) and not sampled_overlap(car(0.0), b)


def test_crash_agrees_with_point_sampling_oracle():
    rng = np.random.default_rng(8)
    for _ in range(150):
        a = car(0.0, 0.0, rng.uniform(-math.pi, math.pi), 0.0, rng.uniform(1, 6), rng.uniform(0.5, 2.5))
        b = car(rng.uniform(-5, 5), rng.uniform(-4, 4), rng.uniform(-math.pi, math.pi), 0.0,
                rng.uniform(1, 6), rng.uniform(0.5, 2.5))
        assert rects_overlap(a, b) == sampled_overlap(a, b)


# -- dynamics -----------------------------------------------------------------

def test_step_examples():
    (v,) = step([car(0.0, speed=10.0)], [(0.0, 0.0)], 0.1)
    assert v.x == 1.0 and v.y == 0.0 and v.speed == 10.0
    (v,) = step([car(0.0, speed=0.5)], [(-8.0, 0.0)], 0.1)
    assert v.speed == 0.0 and v.x == 0.0
    (v,) = step([car(0.0, speed=10.0)], [(2.0, 0.0)], 0.5)
    assert v.speed == 11.0 and v.x == 5.5
    with pytest.raises(ValueError):
        step([car(0.0)], [(0.0, 0.0)], 0.0)


@settings(max_examples=100, deadline=None)
@given(h0=st.floats(-3.0, 3.0), omega=st.floats(0.05, 0.5), v=st.floats(1.0, 30.0),
       n=st.integers(1, 200))
def test_constant_turn_matches_chord_sum(h0, omega, v, n):
    # Heading is updated before the position, so step k uses h0 + k*phi.
    dt = 0.1
    phi = omega * dt
    world = [car(0.0, 0.0, h0, v)]
    for _ in range(n):
        world = step(world, [(0.0, omega)], dt)
    scale = v * dt * math.sin(n * phi / 2) / math.sin(phi / 2)
    mid = h0 + (n + 1) * phi / 2
    assert world[0].x == pytest.approx(scale * math.cos(mid), abs=1e-9)
    assert world[0].y == pytest.approx(scale * math.sin(mid), abs=1e-9)
    assert world[0].heading == pytest.approx(h0 + n * phi, abs=1e-12)


def test_vehicle_state_validation():
    with pytest.raises(ValueError):
        car(0.0, speed=-1.0)
    with pytest.raises(ValueError):
        car(0.0, length=0.0)


# -- surrogate environment policy ------------------------------------------------

def test_features_lie_in_unit_interval():
    rng = np.random.default_rng(2)
    for _ in range(100):
        s = car(0.0, rng.uniform(-5, 30), rng.uniform(-4, 4), rng.uniform(0, 60))
        scan = cast_rays(s, [car(rng.uniform(-50, 50), rng.uniform(-5, 25), speed=rng.uniform(0, 40))], 5, 100.0)
        f = policy_features(s, scan, ROAD, 100.0)
        assert f.shape == (feature_dim(5),)
        assert f[0] == 1.0
        assert np.all((f >= 0) & (f <= 1))


def test_zero_weights_give_zero_action():
    s = car(10.0, ROAD.lane_center(2), 0.0, 20.0)
    scan = cast_rays(s, [], 5, 100.0)
    assert env_policy_act(np.zeros(32), s, scan, ROAD) == (0.0, 0.0)


def test_policy_is_linear_in_weights():
    rng = np.random.default_rng(3)
    s = car(10.0, ROAD.lane_center(2) + 0.3, 0.02, 20.0)
    scan = cast_rays(s, [car(40.0, ROAD.lane_center(2), speed=15.0)], 5, 100.0)
    w1, w2 = rng.normal(size=32), rng.normal(size=32)
    a1 = np.array(env_policy_act(w1, s, scan, ROAD, clamp=False))
    a2 = np.array(env_policy_act(w2, s, scan, ROAD, clamp=False))
    a12 = np.array(env_policy_act(w1 + 2 * w2, s, scan, ROAD, clamp=False))
    np.testing.assert_allclose(a12, a1 + 2 * a2, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        env_policy_act(np.zeros(31), s, scan, ROAD)


def test_base_policy_keeps_its_lane(default_spec):
    lane_y = ROAD.lane_center(3)
    w = default_spec.mu0
    world = [car(0.0, lane_y + 0.25, math.radians(3.0), 15.0)]
    offsets = []
    for _ in range(600):
        scan = cast_rays(world[0], [], default_spec.policy_n_beams, default_spec.max_range_m)
        world = step(world, [env_policy_act(w, world[0], scan, ROAD)], 0.1)
        offsets.append(world[0].y - lane_y)
    assert max(abs(o) for o in offsets) < 0.5 * ROAD.lane_width
    assert max(abs(o) for o in offsets[-100:]) < 0.5


# -- rollouts -----------------------------------------------------------------

def test_stationary_lead_closed_form(default_spec):
    spec = one_lead_spec(default_spec, init_v_mps=(2.0, 2.0, -1.0, 1.0),
                         init_s_m=(2.0, 2.0, 70.0, 90.0))
    # S = 80, T = 0, W = 0, V = 0, all policy weights zero: the lead never moves.
    x = np.r_[80.0, 0.0, 0.0, 0.0, np.zeros(spec.policy_dim)]
    res = rollout(x, spec)
    # Ego starts at x = 50 and covers 2 m per step; contact once the center gap is 4.5 m.
    assert spec.ego_x_m == 50.0 and spec.ego_speed_mps == 20.0
    assert res.crashed and res.crash_step == 13 and res.steps == 13
    assert res.min_ttc == pytest.approx((30.0 - 2.25 - 2.0 * 13) / 20.0, abs=1e-12)


def test_constant_speed_approach_to_stationary_lead(default_spec):
    spec = one_lead_spec(default_spec, ego_speed_mps=10.0, init_v_mps=(2.0, 2.0, -1.0, 1.0))
    # 40 m from the ego center to the lead's rear at 10 m/s.
    x = np.r_[spec.ego_x_m + 40.0 + 2.25, 0.0, 0.0, 0.0, np.zeros(spec.policy_dim)]
    res = rollout(x, spec)
    # Contact after 3.8 s, when 2 m of center-to-boundary gap remain.
    assert res.crash_step == 38
    assert res.min_ttc == pytest.approx(40.0 / 10.0 - 3.8, abs=1e-12)


def test_empty_road_reports_sentinel(default_spec):
    spec = one_lead_spec(default_spec, init_s_m=(2.0, 2.0, 500.0, 600.0), horizon_s=2.0)
    x = np.r_[550.0, 0.0, 0.0, 0.0, np.zeros(spec.policy_dim)]
    res = rollout(x, spec)
    assert res.min_ttc == TTC_SENTINEL and not res.crashed and res.crash_step is None
    assert res.steps == spec.n_steps


def test_rollout_is_deterministic(default_spec):
    fam, th0 = base_family(default_spec)
    for x in draw(fam, th0, 5, 5):
        assert rollout(x, default_spec) == rollout(x, default_spec)


class _PythonEgo:
    # Same control law as the built-in IDM, but routed through the Python loop.
    def __init__(self, inner):
        self.inner = inner

    def act(self, state, scan, road):
        return self.inner.act(state, scan, road, max_range=100.0)


def test_kernel_and_loop_paths_agree(default_spec):
    fam, th0 = base_family(default_spec)
    from raresim.sim.rollout import default_ego
    ego = default_ego(default_spec)
    for x in draw(fam, th0, 11, 6):
        fast = rollout(x, default_spec)
        traced = rollout(x, default_spec, trace=io.StringIO())
        slow = rollout(x, default_spec, ego=_PythonEgo(ego))
        assert fast == traced == slow


def test_trace_has_one_row_per_vehicle_and_step(default_spec):
    fam, th0 = base_family(default_spec)
    x = draw(fam, th0, 1)
    buf = io.StringIO()
    res = rollout(x, default_spec, trace=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,vehicle,x,y,heading,speed"
    assert len(lines) - 1 == (res.steps + 1) * default_spec.vehicle_count


def test_crash_rollouts_have_positive_ttc(default_spec):
    spec = one_lead_spec(default_spec, init_s_m=(2.0, 2.0, 60.0, 100.0),
                         init_v_mps=(2.0, 2.0, 0.0, 10.0), horizon_s=10.0)
    fam, th0 = base_family(spec)
    crashes = 0
    for x in draw(fam, th0, 12, 200):
        res = rollout(x, spec)
        if res.crashed:
            crashes += 1
            assert 0 < res.min_ttc < TTC_SENTINEL
    assert crashes > 100


def test_more_beams_never_raise_min_ttc(default_spec):
    # Environment trajectories do not depend on the ego lidar, and the 2N beams contain the N beams.
    spec = default_spec.with_changes(ego_policy="constant")
    fam, th0 = base_family(spec)
    for x in draw(fam, th0, 13, 20):
        coarse = rollout(x, spec.with_changes(n_beams=18))
        fine = rollout(x, spec.with_changes(n_beams=36))
        assert fine.steps == coarse.steps
        assert fine.min_ttc <= coarse.min_ttc


def test_initial_world_layout(default_spec):
    n = default_spec.n_env
    x = np.r_[np.full(n, 100.0), np.full(n, 0.1), np.full(n, 2.0), np.full(n, 15.0), default_spec.mu0]
    state, dims, env_w = initial_world(x, default_spec)
    assert state.shape == (n + 1, 4) and dims.shape == (n + 1, 2)
    np.testing.assert_allclose(state[1:, 0], 100.0 + np.array(default_spec.env_x_offset_m))
    np.testing.assert_allclose(state[1:, 2], math.radians(2.0))
    assert env_w.shape == (n, 2, feature_dim(default_spec.policy_n_beams))
    with pytest.raises(ValueError):
        initial_world(x[:-1], default_spec)


class _NanEgo:
    def act(self, state, scan, road):
        return math.nan, 0.0


def test_diverging_state_raises(default_spec):
    spec = one_lead_spec(default_spec)
    x = np.r_[80.0, 0.0, 0.0, 0.0, np.zeros(spec.policy_dim)]
    with pytest.raises(SimulationDiverged):
        rollout(x, spec, ego=_NanEgo())


def test_idm_ego_follows_a_slow_lead(default_spec):
    spec = one_lead_spec(default_spec, ego_policy="idm", init_s_m=(2.0, 2.0, 30.0, 60.0),
                         init_v_mps=(2.0, 2.0, 5.0, 15.0), horizon_s=30.0)
    x = np.r_[45.0, 0.0, 0.0, 10.0, np.zeros(spec.policy_dim)]
    res = rollout(x, spec)
    assert not res.crashed
    assert isinstance(IDMEgo(lane_y=0.0).params(), np.ndarray)
    assert ConstantEgo().act(None, None, None) == (0.0, 0.0)
