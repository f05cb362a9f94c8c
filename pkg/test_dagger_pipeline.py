import json
from dataclasses import replace

import numpy as np
import pytest

from config import DaggerConfig, TrainConfig
from dagger_pipeline import (
    Dataset,
    DemoRecord,
    ModelPolicy,
    OraclePolicy,
    RunLogger,
    SkillOutcome,
    TrainingHistory,
    choose_template,
    dagger_run,
    fine_tune,
    load_dataset,
    load_run_log,
    make_batch,
    make_bc_batch,
    record_from_episode,
    replay_record,
    run_episode,
    save_dataset,
    train_model,
)
from errors import ContractError, DatasetParseError, DatasetVersionError
from experts import SkillTrajectory
from seq2seq_models import build_model
from tactile_sim import ExecutionResult, HiddenState


class LatchingPolicy:
    """Snaps the tip into the latch in two steps."""

    name = "latching"
    max_M = 3

    def run_skill(self, env, state, exploration, seed):
        hidden = env.hidden_state(state)
        x, y = env.latch_point(hidden)
        latched = replace(env.state_at(state, (x, y, hidden.theta)), latched=True)
        via = np.tile(env.observe(latched).as_array(), (self.max_M, 1))
        plan = SkillTrajectory(np.tile([x, y, hidden.theta], (self.max_M, 1)), self.max_M)
        return SkillOutcome(plan, ExecutionResult(state=latched, steps=2), via)


class RetractingPolicy:
    """Backs off to the start pose, so every episode needs an oracle correction."""

    name = "retracting"
    max_M = 3

    def run_skill(self, env, state, exploration, seed):
        start = env.config.start_pose
        retracted = replace(env.state_at(state, start), latched=False)
        via = np.tile(env.observe(retracted).as_array(), (self.max_M, 1))
        plan = SkillTrajectory(np.tile(start, (self.max_M, 1)), self.max_M)
        return SkillOutcome(plan, ExecutionResult(state=retracted, steps=1), via)


def _oracle_records(env, templates, n, start=0):
    policy = OraclePolicy(12)
    records = []
    for seed in range(start, start + n):
        outcome = run_episode(env, templates, policy, seed)
        records.append(record_from_episode(outcome, outcome.skill, "expert"))
    return records


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def test_dataset_round_trip(quiet_env, templates, tmp_path):
    dataset = Dataset(_oracle_records(quiet_env, templates, 3))
    path = save_dataset(dataset, tmp_path / "demos.jsonl")
    loaded = load_dataset(path)
    assert loaded == dataset
    assert loaded[0].hidden == dataset[0].hidden
    assert loaded.count("expert") == 3


def test_dataset_is_append_only(quiet_env, templates):
    records = _oracle_records(quiet_env, templates, 2)
    dataset = Dataset(records[:1])
    snapshot = list(dataset)
    dataset.append(records[1])
    assert list(dataset)[:1] == snapshot
    assert len(dataset.subset([1])) == 1
    assert dataset.subset([1])[0] == records[1]


def test_dataset_version_mismatch(tmp_path):
    path = tmp_path / "old.jsonl"
    path.write_text(json.dumps({"kind": "demo-dataset", "format_version": 2, "count": 0}) + "\n")
    with pytest.raises(DatasetVersionError):
        load_dataset(path)


def test_dataset_parse_error_reports_line(quiet_env, templates, tmp_path):
    record = _oracle_records(quiet_env, templates, 1)[0]
    path = tmp_path / "broken.jsonl"
    lines = [
        json.dumps({"kind": "demo-dataset", "format_version": 1, "count": 2}),
        json.dumps(record.model_dump()),
        '{"exploration_observations": [[1.0',
    ]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetParseError) as info:
        load_dataset(path)
    assert info.value.line_number == 3


def test_dataset_count_and_missing_file(quiet_env, templates, tmp_path):
    record = _oracle_records(quiet_env, templates, 1)[0]
    path = tmp_path / "short.jsonl"
    path.write_text(json.dumps({"kind": "demo-dataset", "format_version": 1, "count": 5}) + "\n"
                    + json.dumps(record.model_dump()) + "\n")
    with pytest.raises(DatasetParseError):
        load_dataset(path)
    with pytest.raises(DatasetParseError):
        load_dataset(tmp_path / "missing.jsonl")


def test_record_rejects_bad_shapes(quiet_env, templates):
    data = _oracle_records(quiet_env, templates, 1)[0].model_dump()
    with pytest.raises(ValueError):
        DemoRecord.model_validate({**data, "valid_length": 0})
    with pytest.raises(ValueError):
        DemoRecord.model_validate({**data, "exploration_actions": data["exploration_actions"][:-1]})
    with pytest.raises(ValueError):
        DemoRecord.model_validate({**data, "success_source": "human"})


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def test_feature_scaler_bounds(scaler, quiet_env):
    cfg = quiet_env.config
    corner = (cfg.workspace_half_extent, -cfg.workspace_half_extent, cfg.theta_max)
    np.testing.assert_allclose(scaler.hidden(corner), (1.0, -1.0, 1.0))
    pose = np.array([0.1, -0.05, 0.2])
    np.testing.assert_allclose(scaler.world_poses(scaler.poses(pose)), pose)
    assert scaler.token_scale.shape == (12,)


def test_make_batch_shapes(quiet_env, templates, scaler, small_config):
    records = _oracle_records(quiet_env, templates, 3)
    batch = make_batch(records, scaler, small_config)
    assert batch.tokens.shape == (3, 40, 12)
    assert batch.poses.shape == (3, 12, 3)
    np.testing.assert_array_equal(batch.lengths, [40, 40, 40])
    np.testing.assert_array_equal(batch.mask.sum(axis=1), [r.valid_length for r in records])
    assert np.all(np.abs(batch.hidden) <= 1.0)


def test_make_batch_rejects_long_exploration(quiet_env, templates, scaler, tiny_config):
    records = _oracle_records(quiet_env, templates, 1)
    with pytest.raises(ContractError):
        make_batch(records, scaler, tiny_config)
    with pytest.raises(ContractError):
        make_batch([], scaler, tiny_config)


def test_make_bc_batch_targets_follow_exploration(quiet_env, templates, scaler, small_config):
    records = _oracle_records(quiet_env, templates, 2)
    history, targets, mask = make_bc_batch(records, scaler, small_config)
    assert history.shape == (2, 40 + 12 - 1, 12)
    assert targets.shape == (2, 51, 3)
    assert mask[:, :39].sum() == 0.0
    np.testing.assert_allclose(targets[0, 39], scaler.poses(np.asarray(records[0].skill_poses[0])))
    np.testing.assert_array_equal(mask.sum(axis=1), [r.valid_length for r in records])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_fine_tune_zero_epochs_is_identity(quiet_env, templates, scaler, small_config):
    model = build_model(small_config)
    before = model.state_dict()
    history = fine_tune(model, Dataset(_oracle_records(quiet_env, templates, 2)), scaler, TrainConfig(),
                        np.random.default_rng(0), epochs=0)
    assert history.epoch_losses == []
    assert history.final_loss is None
    for name, value in model.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_fine_tune_contracts(scaler, small_config):
    model = build_model(small_config)
    with pytest.raises(ContractError):
        fine_tune(model, Dataset(), scaler, TrainConfig(), np.random.default_rng(0))


def test_fine_tune_rejects_negative_epochs(quiet_env, templates, scaler, small_config):
    model = build_model(small_config)
    dataset = Dataset(_oracle_records(quiet_env, templates, 1))
    with pytest.raises(ContractError):
        fine_tune(model, dataset, scaler, TrainConfig(), np.random.default_rng(0), epochs=-1)


def test_fine_tune_lowers_the_loss(quiet_env, templates, scaler, small_config):
    model = build_model(small_config)
    dataset = Dataset(_oracle_records(quiet_env, templates, 4))
    history = fine_tune(model, dataset, scaler, TrainConfig(lr=1e-2), np.random.default_rng(0), epochs=10)
    assert len(history.epoch_losses) == 10
    assert len(history.grad_norms) == 10
    assert np.all(np.isfinite(history.epoch_losses))
    assert history.final_loss < history.epoch_losses[0]
    assert not model.latent_supervised


def test_oracle_training_marks_the_latent(quiet_env, templates, scaler, small_config):
    dataset = Dataset(_oracle_records(quiet_env, templates, 2))
    model, history = train_model(small_config, dataset, scaler, TrainConfig(oracle=True), seed=3, epochs=2)
    assert model.latent_supervised
    assert model.config.seed == 3
    assert len(history.epoch_losses) == 2


def test_bc_lstm_trains_on_records(quiet_env, templates, scaler, small_config):
    config = small_config.model_copy(update={"arch": "bc_lstm"})
    dataset = Dataset(_oracle_records(quiet_env, templates, 2))
    model, history = train_model(config, dataset, scaler, TrainConfig(oracle=True), seed=0, epochs=1)
    assert not model.latent_supervised
    assert np.isfinite(history.final_loss)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def test_choose_template_is_seeded(templates):
    assert choose_template(templates, 7) == choose_template(templates, 7)
    assert len({choose_template(templates, s).id for s in range(50)}) > 1
    with pytest.raises(ContractError):
        choose_template([], 0)


def test_episode_interaction_accounting(quiet_env, templates):
    outcome = run_episode(quiet_env, templates, OraclePolicy(12), seed=4)
    assert len(outcome.exploration) == 40
    assert outcome.interactions == 40 + outcome.skill.steps
    assert outcome.skill.steps <= 36
    assert outcome.success == quiet_env.success(outcome.skill.execution.state)


def test_episode_at_fixed_pose(quiet_env, templates):
    hidden = HiddenState(0.05, 0.05, 0.1)
    outcome = run_episode(quiet_env, templates, OraclePolicy(12), seed=1, hidden=hidden)
    assert outcome.hidden == hidden
    assert outcome.post_exploration.hidden == hidden


@pytest.mark.parametrize("arch", ["transformer", "bc_lstm"])
def test_model_policy_runs_an_episode(quiet_env, templates, scaler, small_config, arch):
    model = build_model(small_config.model_copy(update={"arch": arch}))
    policy = ModelPolicy(model, scaler)
    assert policy.name == arch
    outcome = run_episode(quiet_env, templates, policy, seed=2)
    assert 1 <= outcome.skill.plan.valid_length <= 12
    assert outcome.skill.steps <= 36
    record = record_from_episode(outcome, outcome.skill, "robot")
    assert len(record.skill_observations) == record.valid_length


def test_replay_record_matches(env, templates):
    outcome = run_episode(env, templates, OraclePolicy(12), seed=21)
    record = record_from_episode(outcome, outcome.skill, "expert")
    replay = replay_record(env, record, templates)
    assert replay.matches and replay.hidden_matches
    assert replay.first_mismatch is None

    tampered = record.model_copy(update={"hidden": (0.0, 0.0, 0.0)})
    assert not replay_record(env, tampered, templates).hidden_matches
    with pytest.raises(ContractError):
        replay_record(env, record.model_copy(update={"template_id": 99}), templates)


# ---------------------------------------------------------------------------
# DAgger loop
# ---------------------------------------------------------------------------

def test_dagger_stops_after_consecutive_successes(quiet_env, templates):
    result = dagger_run(quiet_env, LatchingPolicy(), templates, DaggerConfig(budget=50), seed=0)
    assert result.stopped_by == "consecutive_successes"
    assert result.episodes == 10
    assert len(result.dataset) == 10
    assert result.dataset.count("expert") == 0
    assert result.interactions == 10 * (40 + 2)
    assert [e["streak"] for e in result.log] == list(range(1, 11))


def test_dagger_corrects_every_failure(quiet_env, templates):
    result = dagger_run(quiet_env, RetractingPolicy(), templates, DaggerConfig(budget=4), seed=1)
    assert result.stopped_by == "budget"
    assert len(result.dataset) == 4
    assert result.dataset.count("expert") == 4
    assert all(e["streak"] == 0 and e["source"] == "expert" for e in result.log)
    expected = sum(40 + 1 + e["expert_steps"] for e in result.log)
    assert result.interactions == expected == result.log[-1]["interactions"]
    counts = [e["interactions"] for e in result.log]
    assert counts == sorted(counts)


def test_dagger_budget_must_be_positive(quiet_env, templates):
    with pytest.raises(ContractError):
        dagger_run(quiet_env, LatchingPolicy(), templates, DaggerConfig(budget=0), seed=0)


def test_dagger_extends_an_existing_dataset(quiet_env, templates):
    seed_records = _oracle_records(quiet_env, templates, 2)
    dataset = Dataset(seed_records)
    result = dagger_run(quiet_env, RetractingPolicy(), templates, DaggerConfig(budget=2), seed=2, dataset=dataset)
    assert len(result.dataset) == 4
    assert list(result.dataset)[:2] == seed_records


def test_dagger_hooks_and_run_log(quiet_env, templates, tmp_path):
    updates, checkpoints = [], []

    def update(dataset):
        updates.append(len(dataset))
        return TrainingHistory(epoch_losses=[1.0 / len(dataset)])

    run_logger = RunLogger(tmp_path / "run_log.jsonl")
    config = DaggerConfig(budget=4, eval_every=2, checkpoint_every=3)
    result = dagger_run(quiet_env, RetractingPolicy(), templates, config, seed=3, update=update,
                        evaluate=lambda iteration: 0.5, checkpoint=checkpoints.append, run_logger=run_logger)
    assert updates == [1, 2, 3, 4]
    assert checkpoints == [3]
    assert [("eval_success_rate" in e) for e in result.log] == [False, True, False, True]
    assert result.log[-1]["final_loss"] == pytest.approx(0.25)

    iterations = load_run_log(run_logger.path, "iteration")
    assert [e["data"]["iteration"] for e in iterations] == [1, 2, 3, 4]
    summary = load_run_log(run_logger.path, "summary")
    assert summary[0]["data"]["stopped_by"] == "budget"


def test_dagger_is_reproducible(quiet_env, templates):
    a = dagger_run(quiet_env, RetractingPolicy(), templates, DaggerConfig(budget=3), seed=5)
    b = dagger_run(quiet_env, RetractingPolicy(), templates, DaggerConfig(budget=3), seed=5)
    assert a.dataset == b.dataset
    assert [e["seed"] for e in a.log] == [e["seed"] for e in b.log]


def _learned_dagger(env, templates, scaler, config):
    model = build_model(config)
    train_cfg = TrainConfig(finetune_epochs=1, lr=1e-2)
    tune_rng = np.random.default_rng([0, 5])
    result = dagger_run(
        env, ModelPolicy(model, scaler), templates, DaggerConfig(budget=3), seed=2,
        update=lambda ds: fine_tune(model, ds, scaler, train_cfg, tune_rng),
    )
    return result, model


def test_dagger_with_learned_policy_is_reproducible(quiet_env, templates, scaler, small_config):
    config = small_config.model_copy(update={"d_model": 8})
    first, model_a = _learned_dagger(quiet_env, templates, scaler, config)
    second, model_b = _learned_dagger(quiet_env, templates, scaler, config)

    assert len(first.dataset) == 3
    assert first.dataset == second.dataset
    assert [e["interactions"] for e in first.log] == [e["interactions"] for e in second.log]
    state_a, state_b = model_a.state_dict(), model_b.state_dict()
    assert list(state_a) == list(state_b)
    for name in state_a:
        np.testing.assert_array_equal(state_a[name], state_b[name])
    # fine-tuning moved the weights away from their initialization
    initial = build_model(config).state_dict()
    assert any(not np.array_equal(initial[n], state_a[n]) for n in initial)
