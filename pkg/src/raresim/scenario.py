"""Scenario files and the base distribution they define.

A scenario is a flat ``key = value`` text file (``#`` starts a comment). Keys
carry their units. ``docs/scenario-format.md`` lists every key; the summary:

============================  ========  =========================================
key                           default   meaning
============================  ========  =========================================
vehicle_count                 required  m, ego included (>= 2)
format_version                1         schema version
road.length_m                 required  straight road length
road.lane_count               required  number of lanes
road.lane_width_m             required  lane width
vehicle.length_m              4.5       every vehicle's length
vehicle.width_m               1.8       every vehicle's width
ego.lane                      required  ego lane index (0 = rightmost)
ego.x_m                       required  ego start along the road
ego.offset_m                  0         ego lateral offset from lane center
ego.heading_deg               0         ego start heading
ego.speed_mps                 required  ego start speed
ego.policy                    idm       ``idm`` or ``constant``
ego.target_speed_mps          25        IDM desired speed
env.lanes                     required  m - 1 lane indices
env.x_offset_m                zeros     m - 1 offsets added to the sampled S
init.<q>.alpha/beta/lo/hi     Beta(2,2) scaled Beta for q in s_m, t_m, w_deg, v_mps
policy.dim                    required  d, length of the policy weight vector
policy.n_beams                5         lidar beams seen by environment drivers
policy.mu0_path               required  binary mean vector (relative to this file)
policy.sigma0_path            required  binary Cholesky factor of the covariance
policy.box                    0.01      sup-norm radius of the mean search box
policy.per_vehicle            false     independent weights per environment vehicle
measure.n_beams               required  ego lidar beams used for TTC
measure.max_range_m           required  lidar range
measure.gamma_s               0.14      default rare-event threshold
sim.dt_s                      0.1       time step
sim.horizon_s                 60        rollout horizon
search.shape_min/shape_max    1.5 / 7   Beta shape box for search iterates
seed_base                     0         base seed for commands using this file
============================  ========  =========================================
"""

from __future__ import annotations

import functools
import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .expfam import BetaBlock, Family, GaussianBlock, ParamPoint

FORMAT_VERSION = 1
MU0_MAGIC = b"RSMU0v01"
CHOL_MAGIC = b"RSCHLv01"

QUANTITIES = ("s_m", "t_m", "w_deg", "v_mps")
# Base distribution: S ~ 40 Beta(2,2) + 80, T ~ 0.5 Beta(2,2) - 0.25,
# W ~ 7.2 Beta(2,2) - 3.6, V ~ 10 Beta(2,2) + 10.
DEFAULT_INIT = {
    "s_m": (2.0, 2.0, 80.0, 120.0),
    "t_m": (2.0, 2.0, -0.25, 0.25),
    "w_deg": (2.0, 2.0, -3.6, 3.6),
    "v_mps": (2.0, 2.0, 10.0, 20.0),
}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    vehicle_count: int
    road_length_m: float
    lane_count: int
    lane_width_m: float
    ego_lane: int
    ego_x_m: float
    ego_speed_mps: float
    env_lanes: tuple
    policy_dim: int
    mu0_path: str
    sigma0_path: str
    n_beams: int
    max_range_m: float
    mu0: np.ndarray
    chol: np.ndarray
    format_version: int = FORMAT_VERSION
    vehicle_length_m: float = 4.5
    vehicle_width_m: float = 1.8
    ego_offset_m: float = 0.0
    ego_heading_deg: float = 0.0
    ego_policy: str = "idm"
    ego_target_speed_mps: float = 25.0
    env_x_offset_m: tuple = ()
    init_s_m: tuple = DEFAULT_INIT["s_m"]
    init_t_m: tuple = DEFAULT_INIT["t_m"]
    init_w_deg: tuple = DEFAULT_INIT["w_deg"]
    init_v_mps: tuple = DEFAULT_INIT["v_mps"]
    policy_n_beams: int = 5
    policy_box: float = 0.01
    policy_per_vehicle: bool = False
    gamma_s: float = 0.14
    dt_s: float = 0.1
    horizon_s: float = 60.0
    shape_min: float = 1.5
    shape_max: float = 7.0
    seed_base: int = 0

    @property
    def n_env(self):
        return self.vehicle_count - 1

    @property
    def n_steps(self):
        return int(round(self.horizon_s / self.dt_s))

    def init_dist(self, q):
        return getattr(self, "init_" + q)

    def with_changes(self, **kw):
        spec = replace(self, **kw)
        validate(spec)
        return spec


# key, attribute, kind, required
_KEYS = [
    ("vehicle_count", "vehicle_count", "int", True),
    ("format_version", "format_version", "int", False),
    ("road.length_m", "road_length_m", "float", True),
    ("road.lane_count", "lane_count", "int", True),
    ("road.lane_width_m", "lane_width_m", "float", True),
    ("vehicle.length_m", "vehicle_length_m", "float", False),
    ("vehicle.width_m", "vehicle_width_m", "float", False),
    ("ego.lane", "ego_lane", "int", True),
    ("ego.x_m", "ego_x_m", "float", True),
    ("ego.offset_m", "ego_offset_m", "float", False),
    ("ego.heading_deg", "ego_heading_deg", "float", False),
    ("ego.speed_mps", "ego_speed_mps", "float", True),
    ("ego.policy", "ego_policy", "str", False),
    ("ego.target_speed_mps", "ego_target_speed_mps", "float", False),
    ("env.lanes", "env_lanes", "ints", True),
    ("env.x_offset_m", "env_x_offset_m", "floats", False),
    *[(f"init.{q}.{p}", f"init_{q}", "init", False) for q in QUANTITIES for p in ("alpha", "beta", "lo", "hi")],
    ("policy.dim", "policy_dim", "int", True),
    ("policy.n_beams", "policy_n_beams", "int", False),
    ("policy.mu0_path", "mu0_path", "str", True),
    ("policy.sigma0_path", "sigma0_path", "str", True),
    ("policy.box", "policy_box", "float", False),
    ("policy.per_vehicle", "policy_per_vehicle", "bool", False),
    ("measure.n_beams", "n_beams", "int", True),
    ("measure.max_range_m", "max_range_m", "float", True),
    ("measure.gamma_s", "gamma_s", "float", False),
    ("sim.dt_s", "dt_s", "float", False),
    ("sim.horizon_s", "horizon_s", "float", False),
    ("search.shape_min", "shape_min", "float", False),
    ("search.shape_max", "shape_max", "float", False),
    ("seed_base", "seed_base", "int", False),
]
_KEY_INDEX = {k: (attr, kind, req) for k, attr, kind, req in _KEYS}
_INIT_FIELDS = ("alpha", "beta", "lo", "hi")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key, kind, raw, lineno):
    try:
        if kind == "int":
            return int(raw)
        if kind in ("float", "init"):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if kind == "ints":
            return tuple(int(t) for t in raw.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(t) for t in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ScenarioError(f"line {lineno}: invalid value for {key}: {raw!r}") from None


def read_vector(path):
    data = Path(path).read_bytes()
    if data[:8] != MU0_MAGIC or len(data) < 16:
        raise ScenarioError(f"{path}: not a mean-vector file")
    (n,) = struct.unpack_from("<Q", data, 8)
    if len(data) != 16 + 8 * n:
        raise ScenarioError(f"{path}: truncated mean-vector file")
    return np.frombuffer(data, dtype="<f8", count=n, offset=16).astype(float)


def write_vector(path, vec):
    vec = np.ascontiguousarray(vec, dtype="<f8").ravel()
    Path(path).write_bytes(MU0_MAGIC + struct.pack("<Q", vec.size) + vec.tobytes())


def read_cholesky(path):
    data = Path(path).read_bytes()
    if data[:8] != CHOL_MAGIC or len(data) < 16:
        raise ScenarioError(f"{path}: not a Cholesky-factor file")
    (d,) = struct.unpack_from("<Q", data, 8)
    count = d * (d + 1) // 2
    if len(data) != 16 + 8 * count:
        raise ScenarioError(f"{path}: truncated Cholesky-factor file")
    tri = np.frombuffer(data, dtype="<f8", count=count, offset=16)
    chol = np.zeros((d, d))
    chol[np.tril_indices(d)] = tri
    return chol


def write_cholesky(path, chol):
    chol = np.asarray(chol, dtype=float)
    d = chol.shape[0]
    tri = np.ascontiguousarray(chol[np.tril_indices(d)], dtype="<f8")
    Path(path).write_bytes(CHOL_MAGIC + struct.pack("<Q", d) + tri.tobytes())


def parse_text(text, base_dir="."):
    """Parse scenario text; relative binary paths resolve against ``base_dir``."""
    values, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
        key, raw = (t.strip() for t in line.split("=", 1))
        if key not in _KEY_INDEX:
            raise ScenarioError(f"line {lineno}: unknown key: {key}")
        if key in values:
            raise ScenarioError(f"line {lineno}: duplicate key: {key}")
        values[key] = _convert(key, _KEY_INDEX[key][1], raw, lineno)
        lines[key] = lineno
    for key, _, _, required in _KEYS:
        if required and key not in values:
            raise ScenarioError(f"missing key: {key}")

    kw = {}
    for key, attr, kind, _ in _KEYS:
        if kind == "init" or key not in values:
            continue
        kw[attr] = values[key]
    for q in QUANTITIES:
        default = DEFAULT_INIT[q]
        kw[f"init_{q}"] = tuple(
            values.get(f"init.{q}.{p}", default[i]) for i, p in enumerate(_INIT_FIELDS)
        )

    base = Path(base_dir)
    try:
        mu0 = read_vector(base / kw["mu0_path"])
        chol = read_cholesky(base / kw["sigma0_path"])
    except OSError as exc:
        raise ScenarioError(f"line {lines['policy.mu0_path']}: cannot read policy files: {exc}") from None
    spec = ScenarioSpec(mu0=mu0, chol=chol, **kw)
    validate(spec, lines)
    return spec


def parse(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return parse_text(text, path.parent)


def validate(spec: ScenarioSpec, lines=None):
    lines = lines or {}

    def fail(key, msg):
        where = f"line {lines[key]}: " if key in lines else ""
        raise ScenarioError(f"{where}{key}: {msg}")

    if spec.format_version != FORMAT_VERSION:
        fail("format_version", f"unsupported version {spec.format_version}")
    if spec.vehicle_count < 2:
        fail("vehicle_count", "need the ego and at least one environment vehicle")
    for key, v in (("road.length_m", spec.road_length_m), ("road.lane_width_m", spec.lane_width_m),
                   ("vehicle.length_m", spec.vehicle_length_m), ("vehicle.width_m", spec.vehicle_width_m),
                   ("measure.max_range_m", spec.max_range_m), ("sim.dt_s", spec.dt_s),
                   ("sim.horizon_s", spec.horizon_s)):
        if not v > 0:
            fail(key, "must be > 0")
    if spec.lane_count < 1:
        fail("road.lane_count", "must be >= 1")
    if not 0 <= spec.ego_lane < spec.lane_count:
        fail("ego.lane", "lane index out of range")
    if spec.ego_speed_mps < 0:
        fail("ego.speed_mps", "must be >= 0")
    if spec.ego_policy not in ("idm", "constant"):
        fail("ego.policy", "must be 'idm' or 'constant'")
    if len(spec.env_lanes) != spec.n_env:
        fail("env.lanes", f"expected {spec.n_env} lane indices, got {len(spec.env_lanes)}")
    if any(not 0 <= lane < spec.lane_count for lane in spec.env_lanes):
        fail("env.lanes", "lane index out of range")
    if spec.env_x_offset_m and len(spec.env_x_offset_m) != spec.n_env:
        fail("env.x_offset_m", f"expected {spec.n_env} offsets, got {len(spec.env_x_offset_m)}")
    for q in QUANTITIES:
        a, b, lo, hi = spec.init_dist(q)
        if not (a > 0 and b > 0):
            fail(f"init.{q}.alpha", "Beta shapes must be > 0")
        if not hi > lo:
            fail(f"init.{q}.hi", "hi must exceed lo")
    if spec.n_beams < 4:
        fail("measure.n_beams", "must be >= 4")
    if spec.policy_n_beams < 1:
        fail("policy.n_beams", "must be >= 1")
    expected_d = 2 * (6 + 2 * spec.policy_n_beams)
    if spec.policy_dim != expected_d:
        fail("policy.dim", f"policy with {spec.policy_n_beams} beams needs {expected_d} weights")
    if spec.mu0.shape != (spec.policy_dim,):
        fail("policy.mu0_path", f"dimension mismatch: policy.dim = {spec.policy_dim} but mean vector has {spec.mu0.size}")
    if spec.chol.shape != (spec.policy_dim, spec.policy_dim):
        fail("policy.sigma0_path", f"dimension mismatch: policy.dim = {spec.policy_dim} but factor is {spec.chol.shape[0]}x{spec.chol.shape[0]}")
    if not np.all(np.diag(spec.chol) > 0):
        fail("policy.sigma0_path", "covariance factor must have a positive diagonal")
    if not spec.policy_box >= 0:
        fail("policy.box", "must be >= 0")
    if not 0 < spec.shape_min <= spec.shape_max:
        fail("search.shape_min", "need 0 < shape_min <= shape_max")
    for q in QUANTITIES:
        a, b, _, _ = spec.init_dist(q)
        if not (spec.shape_min <= a <= spec.shape_max and spec.shape_min <= b <= spec.shape_max):
            fail(f"init.{q}.alpha", "base shapes must lie inside the search box")


def serialize(spec: ScenarioSpec, include_paths=True) -> str:
    out = []
    for key, attr, kind, _ in _KEYS:
        if kind == "init":
            q, p = key.split(".")[1:]
            v = spec.init_dist(q)[_INIT_FIELDS.index(p)]
        else:
            v = getattr(spec, attr)
        if key.endswith("_path") and not include_paths:
            continue
        if kind in ("ints", "floats"):
            if not v:
                continue
            v = ", ".join(_fmt(float(t) if kind == "floats" else int(t)) for t in v)
        elif kind in ("float", "init"):
            v = float(v)
        out.append(f"{key} = {_fmt(v)}")
    return "\n".join(out) + "\n"


def scenario_hash(spec: ScenarioSpec) -> bytes:
    """32-byte digest of everything a rollout depends on (paths excluded)."""
    h = hashlib.sha256()
    h.update(serialize(spec, include_paths=False).encode())
    h.update(np.ascontiguousarray(spec.mu0, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(spec.chol, dtype="<f8").tobytes())
    return h.digest()


@functools.lru_cache(maxsize=32)
def base_family(spec: ScenarioSpec):
    """Family and base parameters ``theta0`` for a scenario.

    Block order: S, T, W, V (one Beta block each, one coordinate per
    environment vehicle), then the policy-weight Gaussian block.
    """
    n = spec.n_env
    bounds = (spec.shape_min, spec.shape_max)
    blocks, values = [], []
    for q in QUANTITIES:
        a, b, lo, hi = spec.init_dist(q)
        blocks.append(BetaBlock(np.full(n, lo), np.full(n, hi), bounds, name=q))
        values.append(np.array([np.full(n, a), np.full(n, b)]))
    copies = n if spec.policy_per_vehicle else 1
    mu0 = np.tile(spec.mu0, copies)
    chol = np.kron(np.eye(copies), spec.chol)
    blocks.append(GaussianBlock(mu0, chol, spec.policy_box, name="xi"))
    values.append(mu0)
    return Family(blocks), ParamPoint(tuple(values))


def data_path(name=""):
    return Path(__file__).parent / "data" / name


def default_scenario_path():
    return data_path("i80.scn")


def load_default():
    return parse(default_scenario_path())
