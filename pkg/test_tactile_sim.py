import json

import numpy as np
import pytest

from config import EnvConfig, StiffnessConfig
from errors import ConfigError, ContractError, DatasetParseError
from tactile_sim import (
    Action,
    HiddenState,
    Observation,
    TactileEnv,
    WorldState,
    compute_wrench,
    effective_stiffness,
    load_replay,
    replay_episode,
    rotation,
    save_replay,
)

NOMINAL = HiddenState(0.0, 0.0, 0.0)


def test_no_penetration_gives_zero_wrench():
    np.testing.assert_array_equal(compute_wrench([0.0, 0.0], StiffnessConfig(), [1.0, 0.0]), np.zeros(3))


def test_series_stiffness_worked_example():
    cfg = StiffnessConfig(k_env=100.0, k_ctrl=300.0, torque_arm=0.0)
    wrench = compute_wrench([0.01, 0.0], cfg, [1.0, 0.0])
    assert wrench[0] == pytest.approx(0.75)
    assert wrench[1] == 0.0
    assert wrench[2] == 0.0


def test_wrench_matches_matrix_form():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k_env, k_ctrl = rng.uniform(10.0, 1e4, size=2)
        cfg = StiffnessConfig(k_env=k_env, k_ctrl=k_ctrl, torque_arm=0.0)
        normal = rng.standard_normal(2)
        normal /= np.linalg.norm(normal)
        dp = normal * rng.uniform(0.0, 0.01)
        K_e, K_p = np.eye(2) * k_env, np.eye(2) * k_ctrl
        expected = np.linalg.solve(K_e + K_p, K_e @ K_p @ dp)
        np.testing.assert_allclose(compute_wrench(dp, cfg, normal)[:2], expected, rtol=1e-12, atol=1e-12)


def test_wrench_is_linear_and_lipschitz_in_depth():
    cfg = StiffnessConfig()
    lipschitz = effective_stiffness(cfg)
    rng = np.random.default_rng(1)
    for depth, other in rng.uniform(0.0, 0.01, size=(1000, 2)):
        f = compute_wrench([depth, 0.0], cfg, [1.0, 0.0])
        assert compute_wrench([2.0 * depth, 0.0], cfg, [1.0, 0.0])[0] == pytest.approx(2.0 * f[0])
        g = compute_wrench([other, 0.0], cfg, [1.0, 0.0])
        assert abs(f[0] - g[0]) <= lipschitz * abs(depth - other) + 1e-12


def test_torque_uses_lever_arm_and_offset():
    cfg = StiffnessConfig(k_env=100.0, k_ctrl=300.0, torque_arm=0.1)
    wrench = compute_wrench([0.0, 0.01], cfg, [0.0, 1.0], tangential_offset=-0.5)
    assert wrench[2] == pytest.approx(0.1 * -0.5 * 0.75)


@pytest.mark.parametrize("stiffness", [{"k_env": 0.0}, {"k_ctrl": -1.0}])
def test_non_positive_stiffness_is_config_error(stiffness):
    cfg = StiffnessConfig(**stiffness)
    with pytest.raises(ConfigError):
        compute_wrench([0.01, 0.0], cfg, [1.0, 0.0])
    with pytest.raises(ConfigError):
        TactileEnv(EnvConfig(stiffness=cfg))


def test_reset_is_deterministic(env):
    assert env.reset(3) == env.reset(3)
    assert env.reset(3)[0].hidden != env.reset(4)[0].hidden


def test_nominal_reset(quiet_env):
    state, obs = quiet_env.reset(11, randomize=False)
    assert quiet_env.hidden_state(state) == NOMINAL
    assert state.ee_pose == quiet_env.config.start_pose
    assert not state.latched
    assert not obs.in_contact
    assert not quiet_env.success(state)


def test_randomized_resets_stay_in_box(quiet_env):
    cfg = quiet_env.config
    hidden = np.array([quiet_env.reset(seed)[0].hidden.as_array() for seed in range(10_000)])
    assert np.all(np.abs(hidden[:, :2]) <= cfg.workspace_half_extent)
    assert np.all(np.abs(hidden[:, 2]) <= cfg.theta_max)
    # the draws actually cover the box
    assert hidden[:, 0].max() > 0.9 * cfg.workspace_half_extent
    assert hidden[:, 2].min() < -0.9 * cfg.theta_max


def test_free_space_step(quiet_env):
    state, _ = quiet_env.reset(0, randomize=False)
    new_state, obs = quiet_env.step(state, Action(0.01, -0.01, 0.02))
    np.testing.assert_allclose(new_state.ee_pose, (-0.16, 0.16, 0.02))
    np.testing.assert_allclose(new_state.ee_velocity, (0.1, -0.1, 0.2))
    assert obs.wrench == (0.0, 0.0, 0.0)
    assert obs.ee_pose == new_state.ee_pose


def test_step_clips_oversized_actions(quiet_env):
    state, _ = quiet_env.reset(0, randomize=False)
    new_state, _ = quiet_env.step(state, [1.0, -1.0, 1.0])
    np.testing.assert_allclose(new_state.ee_pose, (-0.16, 0.16, 0.05))


def test_step_rejects_nan(quiet_env):
    state, _ = quiet_env.reset(0)
    with pytest.raises(ContractError):
        quiet_env.step(state, [np.nan, 0.0, 0.0])


def test_step_is_pure(env):
    state, _ = env.reset(5)
    action = Action(0.004, -0.007, 0.01)
    assert env.step(state, action) == env.step(state, action)
    assert env.hidden_state(env.step(state, action)[0]) == env.hidden_state(state)


def test_wall_contact_is_compliant(quiet_env):
    state = WorldState(hidden=NOMINAL, ee_pose=(-0.004, 0.05, 0.0))
    new_state, obs = quiet_env.step(state, Action(0.01, 0.0, 0.0))
    depth = 0.006
    follow = 5000.0 / 5500.0
    # the tip passes the face and settles with a small residual inside it
    assert new_state.ee_pose[0] == pytest.approx(depth * (1.0 - follow), abs=1e-12)
    assert new_state.ee_pose[0] > 0.0
    expected = compute_wrench([-depth, 0.0], quiet_env.config.stiffness, [-1.0, 0.0], tangential_offset=-1.0)
    np.testing.assert_allclose(obs.wrench, expected, atol=1e-9)
    assert obs.in_contact


def test_single_contact_cannot_tell_poses_apart(quiet_env):
    start = (-0.005, 0.03, 0.0)
    first = WorldState(hidden=NOMINAL, ee_pose=start)
    second = WorldState(hidden=HiddenState(0.0, -0.05, 0.0), ee_pose=start)

    def rollout(state):
        observations = []
        for action in [(0.01, 0.0, 0.0)] + [(0.0, -0.01, 0.0)] * 4:
            state, obs = quiet_env.step(state, action)
            observations.append(obs.as_array())
        return np.array(observations)

    a, b = rollout(first), rollout(second)
    np.testing.assert_allclose(a[0], b[0], atol=1e-12)
    assert np.abs(a[0, :2]).max() > 0.0
    # sliding down the wall eventually finds the floor of one rail only
    assert np.abs(a - b).max() > 1e-3


def test_latch_point_succeeds(quiet_env):
    latch = quiet_env.latch_point(NOMINAL)
    np.testing.assert_allclose(latch, (-0.04, -0.02))
    assert quiet_env.success(WorldState(hidden=NOMINAL, ee_pose=(latch[0], latch[1], 0.0)))
    assert not quiet_env.success(WorldState(hidden=NOMINAL, ee_pose=(latch[0], latch[1] + 0.004, 0.0)))
    assert not quiet_env.success(WorldState(hidden=NOMINAL, ee_pose=(latch[0], latch[1], 0.05)))


def test_latch_point_of_rotated_target(quiet_env):
    hidden = HiddenState(0.05, -0.03, 0.2)
    x, y = quiet_env.latch_point(hidden)
    assert quiet_env.success(WorldState(hidden=hidden, ee_pose=(x, y, 0.2)))


def test_latched_stays_latched(quiet_env):
    latch = quiet_env.latch_point(NOMINAL)
    state = WorldState(hidden=NOMINAL, ee_pose=(latch[0], latch[1], 0.0))
    state, obs = quiet_env.step(state, (0.0, 0.0, 0.0))
    assert state.latched
    assert not obs.in_contact
    state, _ = quiet_env.step(state, (0.0, 0.01, 0.0))
    assert state.latched
    assert quiet_env.success(state)


def test_wrench_is_zero_outside_the_rail(quiet_env):
    rng = np.random.default_rng(2)
    contacts = 0
    for seed in range(20):
        state, _ = quiet_env.reset(seed)
        for _ in range(40):
            action = rng.uniform(-0.01, 0.01, size=3) + np.array([0.004, -0.006, 0.0])
            state, obs = quiet_env.step(state, action)
            assert np.all(np.abs(state.ee_pose[:2]) <= quiet_env.bound + 1e-12)
            tip = state.hidden.to_target(np.array(state.ee_pose[:2]))
            if not quiet_env.geometry.contains(tip):
                assert obs.wrench == (0.0, 0.0, 0.0)
            else:
                contacts += 1
    assert contacts > 0


def test_follow_via_points_respects_step_cap(quiet_env):
    state, _ = quiet_env.reset(0, randomize=False)
    plan = np.array([[0.1, -0.1, 0.0], [0.1, 0.1, 0.0]])
    result = quiet_env.follow_via_points(state, plan, max_steps=3)
    assert result.steps == 3
    assert len(result.observations) == len(result.actions) == 3
    assert result.last_observation == result.observations[-1]
    assert not result.success


def test_replay_reproduces_noisy_episode(env, tmp_path):
    state, _ = env.reset(7)
    rng = np.random.default_rng(7)
    actions, observations = [], []
    for _ in range(25):
        action = rng.uniform(-0.01, 0.01, size=3)
        state, obs = env.step(state, action)
        actions.append(action)
        observations.append(obs)
    path = save_replay(tmp_path / "episode.jsonl", 7, True, actions, observations, noise=True)

    result = replay_episode(env, path)
    assert result.matches
    assert result.steps == 25
    assert result.observations == observations
    assert env.reset(7)[0].hidden == state.hidden

    tampered = list(observations)
    tampered[4] = Observation((1.0, 0.0, 0.0), tampered[4].ee_pose, tampered[4].ee_velocity)
    save_replay(path, 7, True, actions, tampered, noise=True)
    result = replay_episode(env, path)
    assert not result.matches
    assert result.first_mismatch == 4


def test_replay_parse_error_has_line_number(tmp_path):
    path = tmp_path / "broken.jsonl"
    header = {"kind": "episode-replay", "format_version": 1, "seed": 0, "randomize": False, "noise": False}
    path.write_text(json.dumps(header) + "\n" + '{"action": [0, 0, 0], "observation": [1, 2]}\n')
    with pytest.raises(DatasetParseError) as info:
        load_replay(path)
    assert info.value.line_number == 2


def _surface_crossing(env, hidden, start, end, samples=10_001):
    """Last point of the segment still outside the rail, by exhaustive scan."""
    previous = start
    for lam in np.linspace(0.0, 1.0, samples):
        point = start + lam * (end - start)
        if env.geometry.contains(hidden.to_target(point)):
            return previous
        previous = point
    return None


@pytest.mark.parametrize("hidden,start_target,direction_target", [
    (NOMINAL, (-0.004, 0.05), (1.0, 0.0)),
    (NOMINAL, (-0.1, 0.004), (0.0, -1.0)),
    (HiddenState(0.02, -0.01, 0.1), (-0.1, 0.004), (0.0, -1.0)),
])
def test_contact_matches_segment_line_search(quiet_env, hidden, start_target, direction_target):
    start = hidden.to_world(np.array(start_target))
    move = rotation(hidden.theta) @ np.array(direction_target) * 0.01
    end = start + move
    crossing = _surface_crossing(quiet_env, hidden, start, end)
    assert crossing is not None
    overshoot = float(np.linalg.norm(end - crossing))
    follow = 5000.0 / 5500.0
    k_series = effective_stiffness(quiet_env.config.stiffness)

    state = WorldState(hidden=hidden, ee_pose=(float(start[0]), float(start[1]), hidden.theta))
    new_state, obs = quiet_env.step(state, Action(float(move[0]), float(move[1]), 0.0))

    # the tip stops at the surface plus the compliant residual of the overshoot
    expected = crossing + (end - crossing) * (1.0 - follow)
    np.testing.assert_allclose(new_state.ee_pose[:2], expected, atol=2e-6)
    force = np.array(obs.wrench[:2])
    assert np.linalg.norm(force) == pytest.approx(k_series * overshoot, abs=1e-3)
    residual = float(np.linalg.norm(np.array(new_state.ee_pose[:2]) - crossing))
    assert np.linalg.norm(force) == pytest.approx(5000.0 * residual, abs=1e-2)
    assert float(np.dot(force, move)) < 0.0


def test_pressing_on_the_floor_beside_the_mouth_never_latches(quiet_env):
    # the notch is reachable only through its mouth; the floor keeps the tip near its surface
    geometry = quiet_env.config.geometry
    x = geometry.notch_center + geometry.mouth_half_width + 0.018
    state = WorldState(hidden=NOMINAL, ee_pose=(x, 0.003, 0.0))
    for _ in range(40):
        state, obs = quiet_env.step(state, Action(0.0, -0.01, 0.0))
        assert not state.latched
        assert state.ee_pose[1] > -0.002
        assert state.ee_pose[0] == pytest.approx(x, abs=1e-12)
    assert obs.in_contact
    assert not quiet_env.success(state)
