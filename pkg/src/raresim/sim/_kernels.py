"""Jitted kernels shared by the step-by-step API and the fast rollout path.

World arrays:

* ``state`` -- ``(M, 4)`` rows ``(x, y, heading, speed)``; row 0 is the ego.
* ``dims`` -- ``(M, 2)`` rows ``(length, width)``.
* ``road`` -- ``(length, lane_count, lane_width)``.
"""

import math

import numpy as np
from numba import njit

V_SCALE = 40.0
RATE_SCALE = 20.0
HEADING_SCALE = math.pi / 2.0
ACCEL_MIN = -8.0
ACCEL_MAX = 3.0
STEER_MAX = 0.5
N_STATE_FEATURES = 6

EGO_CONSTANT = 0
EGO_IDM = 1


@njit(cache=True)
def wrap_angle(a):
    return math.atan2(math.sin(a), math.cos(a))


@njit(cache=True)
def ray_rect(ox, oy, dx, dy, cx, cy, ch, length, width):
    """Distance along a unit ray to an oriented rectangle's boundary, ``inf`` on a miss.

    From inside the rectangle the exit distance is returned.
    """
    c = math.cos(ch)
    s = math.sin(ch)
    rx = ox - cx
    ry = oy - cy
    px = c * rx + s * ry
    py = -s * rx + c * ry
    ux = c * dx + s * dy
    uy = -s * dx + c * dy
    tmin = -math.inf
    tmax = math.inf
    hl = 0.5 * length
    hw = 0.5 * width
    if ux == 0.0:
        if abs(px) > hl:
            return math.inf
    else:
        t1 = (-hl - px) / ux
        t2 = (hl - px) / ux
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    if uy == 0.0:
        if abs(py) > hw:
            return math.inf
    else:
        t1 = (-hw - py) / uy
        t2 = (hw - py) / uy
        if t1 > t2:
            t1, t2 = t2, t1
        tmin = max(tmin, t1)
        tmax = min(tmax, t2)
    if tmax < tmin or tmax <= 0.0:
        return math.inf
    if tmin > 0.0:
        return tmin
    return tmax


@njit(cache=True)
def cast(obs, state, dims, n_beams, max_range, ranges, rates, hits):
    """Fill ``ranges``, ``rates`` and ``hits`` for observer row ``obs``."""
    ox = state[obs, 0]
    oy = state[obs, 1]
    oh = state[obs, 2]
    ovx = state[obs, 3] * math.cos(oh)
    ovy = state[obs, 3] * math.sin(oh)
    m = state.shape[0]
    for i in range(n_beams):
        ang = oh + 2.0 * math.pi * i / n_beams
        dx = math.cos(ang)
        dy = math.sin(ang)
        best = max_range
        who = -1
        for j in range(m):
            if j == obs:
                continue
            t = ray_rect(ox, oy, dx, dy, state[j, 0], state[j, 1], state[j, 2], dims[j, 0], dims[j, 1])
            if t <= best and t < math.inf:
                if t < best or who == -1:
                    best = t
                    who = j
        ranges[i] = best
        hits[i] = who
        if who >= 0:
            vx = state[who, 3] * math.cos(state[who, 2]) - ovx
            vy = state[who, 3] * math.sin(state[who, 2]) - ovy
            rates[i] = vx * dx + vy * dy
        else:
            rates[i] = 0.0


@njit(cache=True)
def beam_ttc(ranges, rates):
    best = math.inf
    for i in range(ranges.shape[0]):
        if rates[i] < 0.0:
            t = -ranges[i] / rates[i]
            if t < best:
                best = t
    return best


@njit(cache=True)
def _project(cx, cy, c, s, hl, hw, ax, ay):
    # Half-extent of a rectangle along axis a, and its center's coordinate.
    r = hl * abs(c * ax + s * ay) + hw * abs(-s * ax + c * ay)
    p = cx * ax + cy * ay
    return p - r, p + r


@njit(cache=True)
def rects_overlap(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2):
    """Separating-axis test for two oriented rectangles; touching counts as overlap."""
    c1 = math.cos(h1)
    s1 = math.sin(h1)
    c2 = math.cos(h2)
    s2 = math.sin(h2)
    axes = ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2))
    for k in range(4):
        ax, ay = axes[k]
        lo1, hi1 = _project(x1, y1, c1, s1, 0.5 * l1, 0.5 * w1, ax, ay)
        lo2, hi2 = _project(x2, y2, c2, s2, 0.5 * l2, 0.5 * w2, ax, ay)
        if hi1 < lo2 or hi2 < lo1:
            return False
    return True


@njit(cache=True)
def crash_index(state, dims):
    """Lowest row ``j >= 1`` overlapping the ego (row 0), or -1."""
    for j in range(1, state.shape[0]):
        if rects_overlap(state[0, 0], state[0, 1], state[0, 2], dims[0, 0], dims[0, 1],
                         state[j, 0], state[j, 1], state[j, 2], dims[j, 0], dims[j, 1]):
            return j
    return -1


@njit(cache=True)
def kinematic_step(state, actions, dt, out):
    for i in range(state.shape[0]):
        h = state[i, 2] + actions[i, 1] * dt
        v = state[i, 3] + actions[i, 0] * dt
        if v < 0.0:
            v = 0.0
        out[i, 0] = state[i, 0] + v * math.cos(h) * dt
        out[i, 1] = state[i, 1] + v * math.sin(h) * dt
        out[i, 2] = h
        out[i, 3] = v


@njit(cache=True)
def lane_offset(y, road):
    w = road[2]
    idx = math.floor(y / w)
    if idx < 0:
        idx = 0
    if idx > road[1] - 1:
        idx = road[1] - 1
    return y - (idx + 0.5) * w


@njit(cache=True)
def _unit(v):
    if v < 0.0:
        return 0.0
    if v > 1.0:
        return 1.0
    return v


@njit(cache=True)
def features(x_state, ranges, rates, road, max_range, out):
    """Policy input: bias, speed, lane offset, heading error, lane-boundary gaps, beams.

    Every entry lies in [0, 1]. Layout: ``out[0] = 1``; ``out[1..5]`` state
    features; then ``n`` scaled ranges and ``n`` scaled range rates.
    """
    w = road[2]
    off = lane_offset(x_state[1], road)
    n = ranges.shape[0]
    out[0] = 1.0
    out[1] = _unit(x_state[3] / V_SCALE)
    out[2] = _unit(off / w + 0.5)
    out[3] = _unit(wrap_angle(x_state[2]) / HEADING_SCALE + 0.5)
    out[4] = _unit((0.5 * w - off) / w)
    out[5] = _unit((0.5 * w + off) / w)
    for i in range(n):
        out[N_STATE_FEATURES + i] = _unit(ranges[i] / max_range)
        out[N_STATE_FEATURES + n + i] = _unit(0.5 * rates[i] / RATE_SCALE + 0.5)


@njit(cache=True)
def clamp_action(a, s):
    return min(max(a, ACCEL_MIN), ACCEL_MAX), min(max(s, -STEER_MAX), STEER_MAX)


@njit(cache=True)
def linear_action(weights, feats):
    """``weights`` is ``(2, F)``: acceleration row, steering-rate row (pre-clamp)."""
    a = 0.0
    s = 0.0
    for k in range(feats.shape[0]):
        a += weights[0, k] * feats[k]
        s += weights[1, k] * feats[k]
    return a, s


@njit(cache=True)
def idm_action(x_state, ranges, rates, n_beams, max_range, params, ego_length):
    """Intelligent-driver longitudinal control plus lane keeping.

    ``params``: target speed, time headway, min gap, max accel, comfortable
    decel, lane-center y, lateral gain, heading gain, cone half-angle (rad).
    """
    v0 = params[0]
    headway = params[1]
    s0 = params[2]
    amax = params[3]
    bdec = params[4]
    y_ref = params[5]
    k_y = params[6]
    k_h = params[7]
    cone = params[8]
    v = x_state[3]
    gap = math.inf
    closing = 0.0
    for i in range(n_beams):
        ang = wrap_angle(2.0 * math.pi * i / n_beams)
        if abs(ang) <= cone and ranges[i] < max_range:
            g = ranges[i] * math.cos(ang) - 0.5 * ego_length
            if g < gap:
                gap = g
                closing = -rates[i]
    free = 1.0 - (v / v0) ** 4
    acc = amax * free
    if gap < math.inf:
        g = max(gap, 0.1)
        s_star = s0 + max(0.0, v * headway + v * closing / (2.0 * math.sqrt(amax * bdec)))
        acc = amax * (free - (s_star / g) ** 2)
    steer = -k_y * (x_state[1] - y_ref) - k_h * wrap_angle(x_state[2])
    return clamp_action(acc, steer)


@njit(cache=True)
def rollout_kernel(state0, dims, env_w, road, n_beams, pol_beams, max_range, dt, n_steps,
                   ego_kind, ego_params):
    """Whole rollout for a built-in ego policy.

    ``env_w`` is ``(M - 1, 2, F)``. Returns ``(min_ttc, crash_row, crash_step,
    steps, diverged)``; ``crash_row`` is -1 without a crash.
    """
    m = state0.shape[0]
    n_feat = N_STATE_FEATURES + 2 * pol_beams
    state = state0.copy()
    nxt = np.empty_like(state)
    actions = np.zeros((m, 2))
    ranges = np.empty(n_beams)
    rates = np.empty(n_beams)
    hits = np.empty(n_beams, dtype=np.int64)
    pr = np.empty(pol_beams)
    prr = np.empty(pol_beams)
    ph = np.empty(pol_beams, dtype=np.int64)
    feats = np.empty(n_feat)
    min_ttc = math.inf
    steps = 0
    for t in range(n_steps + 1):
        cast(0, state, dims, n_beams, max_range, ranges, rates, hits)
        ttc = beam_ttc(ranges, rates)
        if ttc < min_ttc:
            min_ttc = ttc
        row = crash_index(state, dims)
        if row >= 0:
            return min_ttc, row, t, steps, False
        if t == n_steps or state[0, 0] >= road[0]:
            break
        for j in range(1, m):
            cast(j, state, dims, pol_beams, max_range, pr, prr, ph)
            features(state[j], pr, prr, road, max_range, feats)
            a, s = linear_action(env_w[j - 1], feats)
            actions[j, 0], actions[j, 1] = clamp_action(a, s)
        if ego_kind == EGO_IDM:
            a, s = idm_action(state[0], ranges, rates, n_beams, max_range, ego_params, dims[0, 0])
        else:
            a, s = clamp_action(ego_params[0], ego_params[1])
        actions[0, 0] = a
        actions[0, 1] = s
        kinematic_step(state, actions, dt, nxt)
        state, nxt = nxt, state
        steps += 1
        for i in range(m):
            for k in range(4):
                if not math.isfinite(state[i, k]):
                    return min_ttc, -1, -1, steps, True
    return min_ttc, -1, -1, steps, False
