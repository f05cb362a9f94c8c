import math

import numpy as np
import pytest

from dagger_pipeline import OraclePolicy, run_episode
from errors import ContractError, DatasetParseError
from experts import (
    SkillTrajectory,
    canonical_latch_plan,
    collect_exploration_templates,
    contact_directions,
    direction_spread,
    execute_exploration,
    is_informative,
    load_templates,
    oracle_skill,
    save_templates,
)
from tactile_sim import HiddenState, Observation, WorldState, rotation


def test_five_informative_templates(quiet_env, templates):
    assert [t.id for t in templates] == [0, 1, 2, 3, 4]
    assert len({t.style for t in templates}) == 5
    for template in templates:
        assert len(template.via_points) == 40
        assert template.respects_clip(quiet_env.config)
        assert is_informative(quiet_env, template)


def test_informative_replay_touches_two_faces(quiet_env, templates):
    state, _ = quiet_env.reset(0, randomize=False)
    trajectory, _ = execute_exploration(quiet_env, state, templates[0])
    angles = contact_directions([Observation.from_array(o) for o in trajectory.observations])
    assert len(angles) >= 2
    assert direction_spread(angles) >= 0.2


def test_template_collection_is_seeded(quiet_env):
    first = collect_exploration_templates(2, np.random.default_rng(3), quiet_env, length=30)
    second = collect_exploration_templates(2, np.random.default_rng(3), quiet_env, length=30)
    assert first == second
    assert len(first[0].via_points) == 30


def test_template_count_must_be_positive(quiet_env):
    with pytest.raises(ContractError):
        collect_exploration_templates(0, np.random.default_rng(0), quiet_env)


def test_direction_spread_wraps_angles():
    assert direction_spread([0.0]) == 0.0
    assert direction_spread([math.pi - 0.05, -math.pi + 0.05]) == pytest.approx(0.1)


def test_exploration_length_and_determinism(env, templates):
    state, _ = env.reset(3)
    first, end_a = execute_exploration(env, state, templates[1])
    second, end_b = execute_exploration(env, state, templates[1])
    assert len(first) == len(templates[1].via_points)
    assert first.tokens().shape == (40, 12)
    np.testing.assert_array_equal(first.observations, second.observations)
    assert end_a == end_b
    assert first.template_id == templates[1].id


def test_exploration_is_open_loop(env, templates):
    a, _ = execute_exploration(env, env.reset(1)[0], templates[2])
    b, _ = execute_exploration(env, env.reset(2)[0], templates[2])
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_allclose(a.actions, templates[2].actions(), atol=1e-15)


def test_templates_save_and_load(templates, tmp_path):
    path = save_templates(templates, tmp_path / "templates.json")
    assert load_templates(path) == templates


def test_malformed_template_file(tmp_path):
    path = tmp_path / "templates.json"
    path.write_text('[{"id": 0, "via_points": [[0, 0]]}]')
    with pytest.raises(DatasetParseError):
        load_templates(path)


def test_nominal_oracle_is_canonical_plan(quiet_env):
    state, _ = quiet_env.reset(0, randomize=False)
    plan = oracle_skill(quiet_env, state)
    assert plan.valid_length == 12
    np.testing.assert_allclose(plan.poses, canonical_latch_plan(quiet_env.config.geometry), atol=1e-15)


def test_canonical_plan_ends_below_the_latch(quiet_env):
    plan = canonical_latch_plan(quiet_env.config.geometry, length=8)
    assert plan.shape == (8, 3)
    assert plan[-1, 0] == pytest.approx(quiet_env.config.geometry.notch_center)
    assert plan[-1, 1] < -quiet_env.config.geometry.notch_depth
    with pytest.raises(ContractError):
        canonical_latch_plan(quiet_env.config.geometry, length=2)


@pytest.mark.parametrize("hidden,angle,shift", [
    (HiddenState(0.0, 0.0, 0.0), 0.2, (0.0, 0.0)),
    (HiddenState(0.02, -0.01, 0.05), 0.1, (0.01, 0.02)),
    (HiddenState(-0.05, 0.04, -0.1), -0.12, (0.03, -0.06)),
])
def test_oracle_is_equivariant(quiet_env, hidden, angle, shift):
    R = rotation(angle)
    moved_xy = R @ np.array([hidden.x, hidden.y]) + np.array(shift)
    moved = HiddenState(float(moved_xy[0]), float(moved_xy[1]), hidden.theta + angle)
    start = quiet_env.config.start_pose

    base = oracle_skill(quiet_env, WorldState(hidden=hidden, ee_pose=start)).poses
    transformed = oracle_skill(quiet_env, WorldState(hidden=moved, ee_pose=start)).poses
    expected_xy = base[:, :2] @ R.T + np.array(shift)
    np.testing.assert_allclose(transformed[:, :2], expected_xy, atol=1e-12)
    np.testing.assert_allclose(transformed[:, 2], base[:, 2] + angle, atol=1e-12)


def test_oracle_rejects_out_of_box_target(quiet_env):
    state = WorldState(hidden=HiddenState(0.3, 0.0, 0.0), ee_pose=quiet_env.config.start_pose)
    with pytest.raises(ContractError):
        oracle_skill(quiet_env, state)


def test_skill_trajectory_padding():
    plan = SkillTrajectory(np.arange(9.0).reshape(3, 3), 2)
    padded = plan.padded(4)
    assert padded.poses.shape == (4, 3)
    np.testing.assert_array_equal(padded.poses[2:], np.tile([3.0, 4.0, 5.0], (2, 1)))
    with pytest.raises(ContractError):
        plan.padded(1)


def test_oracle_success_rate(env, templates):
    policy = OraclePolicy(max_M=12)
    successes = sum(run_episode(env, templates, policy, seed).success for seed in range(200))
    assert successes / 200 >= 0.95
