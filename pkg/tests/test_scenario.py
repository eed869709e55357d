import dataclasses
import math

import numpy as np
import pytest

from raresim.expfam import BetaBlock, GaussianBlock, log_density, sample
from raresim.scenario import (
    ScenarioError,
    base_family,
    data_path,
    default_scenario_path,
    parse,
    parse_text,
    read_cholesky,
    read_vector,
    scenario_hash,
    serialize,
    write_cholesky,
    write_vector,
)
from raresim.sim import rollout
from raresim.sim.rollout import initial_world

DEFAULT_TEXT = default_scenario_path().read_text()


def with_line(text, key, value):
    lines = [ln for ln in text.splitlines() if not ln.startswith(key + " ")]
    if value is not None:
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def same_spec(a, b):
    for f in dataclasses.fields(a):
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, np.ndarray):
            assert np.array_equal(x, y), f.name
        else:
            assert x == y, f.name


def test_default_file(default_spec):
    assert default_spec.vehicle_count == 6
    assert default_spec.init_s_m == (2.0, 2.0, 80.0, 120.0)
    assert default_spec.init_t_m == (2.0, 2.0, -0.25, 0.25)
    assert default_spec.init_w_deg == (2.0, 2.0, -3.6, 3.6)
    assert default_spec.init_v_mps == (2.0, 2.0, 10.0, 20.0)
    assert default_spec.policy_dim == 32 and default_spec.mu0.shape == (32,)
    assert default_spec.policy_box == 0.01
    assert (default_spec.shape_min, default_spec.shape_max) == (1.5, 7.0)


def test_empty_file():
    with pytest.raises(ScenarioError, match="^missing key: vehicle_count$"):
        parse_text("")


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError, match="cannot read scenario"):
        parse(tmp_path / "nope.scn")


def test_dimension_mismatch_names_key_and_line(tmp_path):
    write_vector(tmp_path / "mu.bin", np.zeros(400))
    write_cholesky(tmp_path / "chol.bin", np.eye(404))
    text = DEFAULT_TEXT
    for key, value in (("policy.dim", 404), ("policy.n_beams", 98),
                       ("policy.mu0_path", "mu.bin"), ("policy.sigma0_path", "chol.bin")):
        text = with_line(text, key, value)
    (tmp_path / "s.scn").write_text(text)
    with pytest.raises(ScenarioError, match=r"line \d+: policy.mu0_path: dimension mismatch.*404.*400"):
        parse(tmp_path / "s.scn")


@pytest.mark.parametrize("key,value,pattern", [
    ("road.lane_width_m", "0", "road.lane_width_m: must be > 0"),
    ("road.lane_width_m", "-3", "road.lane_width_m: must be > 0"),
    ("vehicle_count", "1", "vehicle_count"),
    ("ego.lane", "6", "ego.lane: lane index out of range"),
    ("env.lanes", "2, 3, 1", "env.lanes: expected 5"),
    ("ego.policy", "robot", "ego.policy"),
    ("init.s_m.hi", "70", "init.s_m.hi: hi must exceed lo"),
    ("init.v_mps.alpha", "9", "inside the search box"),
    ("measure.n_beams", "3", "measure.n_beams"),
    ("policy.dim", "30", "policy.dim"),
    ("format_version", "2", "unsupported version"),
    ("sim.dt_s", "nan", "invalid value for sim.dt_s"),
    ("vehicle_count", "six", "invalid value for vehicle_count"),
])
def test_bad_values(key, value, pattern):
    text = with_line(DEFAULT_TEXT, key, value)
    with pytest.raises(ScenarioError, match=pattern):
        parse_text(text, data_path())


def test_error_carries_line_number():
    text = with_line(DEFAULT_TEXT, "road.lane_width_m", "0")
    lineno = text.splitlines().index("road.lane_width_m = 0") + 1
    with pytest.raises(ScenarioError, match=f"^line {lineno}: road.lane_width_m"):
        parse_text(text, data_path())


def test_unknown_and_duplicate_keys():
    with pytest.raises(ScenarioError, match="unknown key: road.speed_limit"):
        parse_text(DEFAULT_TEXT + "road.speed_limit = 30\n", data_path())
    with pytest.raises(ScenarioError, match="duplicate key: vehicle_count"):
        parse_text(DEFAULT_TEXT + "vehicle_count = 6\n", data_path())
    with pytest.raises(ScenarioError, match="expected 'key = value'"):
        parse_text(DEFAULT_TEXT + "vehicle_count 6\n", data_path())


def test_missing_policy_file():
    text = with_line(DEFAULT_TEXT, "policy.mu0_path", "absent.bin")
    with pytest.raises(ScenarioError, match="cannot read policy files"):
        parse_text(text, data_path())


def test_round_trip(default_spec):
    again = parse_text(serialize(default_spec), data_path())
    same_spec(default_spec, again)
    assert scenario_hash(again) == scenario_hash(default_spec)


def test_round_trip_with_non_defaults(default_spec, tmp_path):
    spec = default_spec.with_changes(ego_offset_m=0.3, ego_heading_deg=-1.5, ego_policy="constant",
                                     init_v_mps=(3.0, 1.5, 12.5, 22.25), horizon_s=12.0,
                                     gamma_s=0.2, seed_base=11)
    write_vector(tmp_path / spec.mu0_path, spec.mu0)
    write_cholesky(tmp_path / spec.sigma0_path, spec.chol)
    (tmp_path / "x.scn").write_text(serialize(spec))
    same_spec(spec, parse(tmp_path / "x.scn"))


def test_hash_tracks_content_not_paths(default_spec):
    h = scenario_hash(default_spec)
    assert len(h) == 32
    assert scenario_hash(dataclasses.replace(default_spec, mu0_path="elsewhere.bin")) == h
    assert scenario_hash(default_spec.with_changes(horizon_s=30.0)) != h
    assert scenario_hash(dataclasses.replace(default_spec, mu0=default_spec.mu0 + 1e-12)) != h


def test_binary_files_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=7)
    write_vector(tmp_path / "v.bin", v)
    assert np.array_equal(read_vector(tmp_path / "v.bin"), v)
    L = np.tril(rng.normal(size=(5, 5)))
    write_cholesky(tmp_path / "l.bin", L)
    assert np.array_equal(read_cholesky(tmp_path / "l.bin"), L)
    (tmp_path / "bad.bin").write_bytes(b"garbage")
    with pytest.raises(ScenarioError):
        read_vector(tmp_path / "bad.bin")
    with pytest.raises(ScenarioError):
        read_cholesky(tmp_path / "bad.bin")


def test_default_family_layout(default_spec):
    fam, th0 = base_family(default_spec)
    n = default_spec.n_env
    assert fam.dim == 4 * n + default_spec.policy_dim == 52
    assert [b.name for b in fam.blocks] == ["s_m", "t_m", "w_deg", "v_mps", "xi"]
    for blk, p in zip(fam.blocks[:4], th0.values[:4]):
        assert isinstance(blk, BetaBlock) and blk.dim == n
        assert np.array_equal(p, np.full((2, n), 2.0))
        assert tuple(blk.shape_bounds) == (1.5, 7.0)
    g = fam.blocks[4]
    assert isinstance(g, GaussianBlock) and g.box == 0.01
    assert np.array_equal(th0.values[4], default_spec.mu0)


def test_smallest_family():
    # Structural check only: a 4-weight policy does not fit the simulator's linear driver.
    spec = dataclasses.replace(parse(default_scenario_path()), vehicle_count=2, env_lanes=(2,),
                               env_x_offset_m=(0.0,), policy_dim=4, mu0=np.zeros(4), chol=np.eye(4))
    fam, th0 = base_family(spec)
    assert len(fam.blocks) == 5
    assert all(isinstance(b, BetaBlock) and b.dim == 1 for b in fam.blocks[:4])
    assert isinstance(fam.blocks[4], GaussianBlock) and fam.blocks[4].dim == 4
    assert fam.dim == 8


def test_per_vehicle_policy_weights(default_spec):
    spec = default_spec.with_changes(policy_per_vehicle=True)
    fam, th0 = base_family(spec)
    assert fam.dim == 4 * 5 + 5 * 32
    x = sample(fam, th0, 0)
    _, _, env_w = initial_world(x, spec)
    assert env_w.shape == (5, 2, 16)
    assert not np.array_equal(env_w[0], env_w[1])


def test_theta0_density_finite_and_supports(default_spec):
    fam, th0 = base_family(default_spec)
    xs = sample(fam, th0, 99, 1000)
    assert np.all(np.isfinite(log_density(fam, th0, xs)))
    n = default_spec.n_env
    s, t, w, v = (xs[:, i * n:(i + 1) * n] for i in range(4))
    assert s.min() >= 80 and s.max() <= 120
    assert t.min() >= -0.25 and t.max() <= 0.25
    assert w.min() >= -3.6 and w.max() <= 3.6
    assert v.min() >= 10 and v.max() <= 20
    # Initial world takes them over unchanged (W converted once to radians).
    state, _, _ = initial_world(xs[0], default_spec)
    np.testing.assert_allclose(state[1:, 2], np.radians(w[0]))
    np.testing.assert_array_equal(state[1:, 3], v[0])


def test_rollouts_from_theta0_run(default_spec):
    fam, th0 = base_family(default_spec)
    for x in sample(fam, th0, 5, 5):
        res = rollout(x, default_spec)
        assert res.min_ttc > 0 and math.isfinite(res.log_p0)
