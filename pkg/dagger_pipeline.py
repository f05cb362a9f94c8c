"""
Demonstration datasets and the DAgger-style training loop.

Every iteration resets to a random target pose, explores with a sampled
template and lets the learner plan the skill. A success appends the
learner's own plan; a failure resets to the post-exploration state and
appends the oracle's correction instead. The model is fine-tuned on the
whole dataset after each new record until enough consecutive episodes
succeed or the demonstration budget is spent.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from tqdm import tqdm
from typing_extensions import Self

from autodiff import Adam, Tensor, backward, no_grad
from config import DaggerConfig, EnvConfig, ModelConfig, TrainConfig
from errors import ContractError, DatasetParseError, DatasetVersionError
from experts import (
    ExplorationTemplate,
    ExplorationTrajectory,
    SkillTrajectory,
    execute_exploration,
    oracle_skill,
)
from seq2seq_models import (
    BCLSTM,
    Batch,
    SkillModel,
    bc_forward,
    bc_loss,
    build_model,
    generate,
    select_pose,
    seq2seq_loss,
    skill_tokens,
    supervised_loss,
)
from tactile_sim import ExecutionResult, HiddenState, TactileEnv, WorldState, effective_stiffness

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DATASET_KIND = "demo-dataset"


# ---------------------------------------------------------------------------
# Feature scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureScaler:
    """Fixed per-feature divisors derived from the environment config.

    Forces are scaled by the force at 1 cm penetration, poses by the workspace
    bound and velocities by one clipped step per control period. Hidden poses
    use the sampling box so every component lies in [-1, 1].
    """

    token_scale: np.ndarray
    pose_scale: np.ndarray
    hidden_scale: np.ndarray

    @classmethod
    def from_env(cls, cfg: EnvConfig) -> "FeatureScaler":
        force = effective_stiffness(cfg.stiffness) * 0.01
        torque = max(cfg.stiffness.torque_arm, 1e-3) * force
        bound = cfg.workspace_half_extent + cfg.workspace_margin
        pose = np.array([bound, bound, cfg.theta_max])
        velocity = np.array([cfg.max_translation_step, cfg.max_translation_step, cfg.max_rotation_step]) / cfg.dt
        action = np.array([cfg.max_translation_step, cfg.max_translation_step, cfg.max_rotation_step])
        token = np.concatenate([[force, force, torque], pose, velocity, action])
        hidden = np.array([cfg.workspace_half_extent, cfg.workspace_half_extent, cfg.theta_max])
        return cls(token, pose, hidden)

    def tokens(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / self.token_scale

    def poses(self, raw: np.ndarray) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / self.pose_scale

    def world_poses(self, normalized: np.ndarray) -> np.ndarray:
        return np.asarray(normalized, dtype=np.float64) * self.pose_scale

    def hidden(self, raw) -> np.ndarray:
        return np.asarray(raw, dtype=np.float64) / self.hidden_scale


# ---------------------------------------------------------------------------
# Records and dataset
# ---------------------------------------------------------------------------

class DemoRecord(BaseModel):
    """One exploration/skill pair with the hidden pose it was collected under."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    exploration_observations: List[List[float]]
    exploration_actions: List[List[float]]
    skill_poses: List[List[float]]
    skill_observations: List[List[float]] = []
    valid_length: int
    hidden: Tuple[float, float, float]
    success_source: Literal["robot", "expert"]
    seed: int
    template_id: int = -1

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if not self.exploration_observations:
            raise ValueError("exploration must be non-empty")
        if len(self.exploration_observations) != len(self.exploration_actions):
            raise ValueError("exploration observations and actions differ in length")
        if any(len(o) != 9 for o in self.exploration_observations + self.skill_observations):
            raise ValueError("observations must have 9 values")
        if any(len(a) != 3 for a in self.exploration_actions + self.skill_poses):
            raise ValueError("actions and poses must have 3 values")
        if not 0 < self.valid_length <= len(self.skill_poses):
            raise ValueError(f"valid_length {self.valid_length} outside 1..{len(self.skill_poses)}")
        if self.skill_observations and len(self.skill_observations) != self.valid_length:
            raise ValueError("skill_observations must cover exactly the valid via-points")
        return self

    def exploration(self) -> ExplorationTrajectory:
        return ExplorationTrajectory(
            observations=np.asarray(self.exploration_observations, dtype=np.float64),
            actions=np.asarray(self.exploration_actions, dtype=np.float64),
            template_id=self.template_id,
        )

    def skill(self) -> SkillTrajectory:
        return SkillTrajectory(np.asarray(self.skill_poses, dtype=np.float64), self.valid_length)

    def hidden_state(self) -> HiddenState:
        return HiddenState(*self.hidden)


class Dataset:
    """Ordered, append-only collection of demonstration records."""

    format_version = DATASET_FORMAT_VERSION

    def __init__(self, records: Optional[Sequence[DemoRecord]] = None):
        self._records: List[DemoRecord] = list(records or [])

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[DemoRecord]:
        return iter(tuple(self._records))

    def __getitem__(self, index: int) -> DemoRecord:
        return self._records[index]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Dataset) and self._records == other._records

    def append(self, record: DemoRecord) -> None:
        self._records.append(record)

    def count(self, source: str) -> int:
        return sum(1 for r in self._records if r.success_source == source)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self._records[int(i)] for i in indices])

    def save(self, path: Union[str, Path]) -> Path:
        """JSON-lines: a header line, then one record per line (floats round-trip exactly)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            header = {"kind": DATASET_KIND, "format_version": self.format_version, "count": len(self)}
            f.write(json.dumps(header) + "\n")
            for record in self._records:
                f.write(json.dumps(record.model_dump()) + "\n")
        logger.info(f"Saved {len(self)} demonstrations to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        path = Path(path)
        if not path.exists():
            raise DatasetParseError("dataset file not found", 1, str(path))
        header: Optional[Dict[str, Any]] = None
        records: List[DemoRecord] = []
        with open(path) as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetParseError(f"malformed JSON: {exc.msg}", line_number, str(path)) from exc
                if header is None:
                    if not isinstance(entry, dict) or entry.get("kind") != DATASET_KIND:
                        raise DatasetParseError("missing dataset header", line_number, str(path))
                    if entry.get("format_version") != DATASET_FORMAT_VERSION:
                        raise DatasetVersionError(
                            f"{path}: format_version {entry.get('format_version')!r}, "
                            f"expected {DATASET_FORMAT_VERSION}"
                        )
                    header = entry
                    continue
                try:
                    records.append(DemoRecord.model_validate(entry))
                except ValueError as exc:
                    raise DatasetParseError(f"invalid record: {exc}", line_number, str(path)) from exc
        if header is None:
            raise DatasetParseError("empty dataset file", 1, str(path))
        if header.get("count") != len(records):
            raise DatasetParseError(
                f"header announces {header.get('count')} records, found {len(records)}",
                line_number, str(path),
            )
        return cls(records)


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    return dataset.save(path)


def load_dataset(path: Union[str, Path]) -> Dataset:
    return Dataset.load(path)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def make_batch(records: Sequence[DemoRecord], scaler: FeatureScaler, config: ModelConfig) -> Batch:
    """Normalize and right-pad records into a Seq2Seq training batch."""
    if not records:
        raise ContractError("cannot batch zero records")
    t_max = max(len(r.exploration_actions) for r in records)
    if t_max > config.max_T:
        raise ContractError(f"exploration length {t_max} exceeds max_T={config.max_T}")
    b, m = len(records), config.max_M
    tokens = np.zeros((b, t_max, config.token_dim))
    lengths = np.zeros(b, dtype=int)
    poses = np.zeros((b, m, config.pose_dim))
    mask = np.zeros((b, m))
    hidden = np.zeros((b, 3))
    for i, record in enumerate(records):
        raw = record.exploration().tokens()
        tokens[i, : len(raw)] = scaler.tokens(raw)
        lengths[i] = len(raw)
        skill = record.skill().padded(m)
        poses[i] = scaler.poses(skill.poses)
        mask[i, : skill.valid_length] = 1.0
        hidden[i] = scaler.hidden(record.hidden)
    return Batch(tokens=tokens, lengths=lengths, poses=poses, mask=mask, hidden=hidden)


def bc_history(
    exploration_tokens: np.ndarray,
    executed_tokens: np.ndarray,
    scaler: FeatureScaler,
    max_T: int,
) -> np.ndarray:
    """Normalized BC input: exploration left-padded to max_T, then executed via-point tokens."""
    exploration_tokens = np.asarray(exploration_tokens, dtype=np.float64).reshape(-1, 12)
    if len(exploration_tokens) > max_T:
        raise ContractError(f"exploration length {len(exploration_tokens)} exceeds max_T={max_T}")
    pad = np.zeros((max_T - len(exploration_tokens), 12))
    executed = np.asarray(executed_tokens, dtype=np.float64).reshape(-1, 12)
    return np.vstack([pad, scaler.tokens(exploration_tokens), scaler.tokens(executed)])


def make_bc_batch(
    records: Sequence[DemoRecord], scaler: FeatureScaler, config: ModelConfig
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """History, next-pose targets and mask for BC-LSTM training.

    The target after the last exploration token is the first via-point; the
    target after executed via-point i is via-point i + 1.
    """
    if not records:
        raise ContractError("cannot batch zero records")
    t, m = config.max_T, config.max_M
    length = t + m - 1
    history = np.zeros((len(records), length, config.token_dim))
    targets = np.zeros((len(records), length, config.pose_dim))
    mask = np.zeros((len(records), length))
    for i, record in enumerate(records):
        exploration = record.exploration()
        skill = record.skill()
        if skill.valid_length > m:
            raise ContractError(f"plan of {skill.valid_length} poses does not fit max_M={m}")
        poses = skill.valid_poses
        observed = np.asarray(record.skill_observations) if record.skill_observations else None
        executed = skill_tokens(poses, exploration.observations[-1, 3:6], observed)
        seq = bc_history(exploration.tokens(), executed[:-1], scaler, t)
        history[i, : len(seq)] = seq
        targets[i, t - 1: t - 1 + len(poses)] = scaler.poses(poses)
        mask[i, t - 1: t - 1 + len(poses)] = 1.0
    return history, targets, mask


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainingHistory:
    epoch_losses: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        return self.epoch_losses[-1] if self.epoch_losses else None


def model_loss(model: SkillModel, records: Sequence[DemoRecord], scaler: FeatureScaler, oracle: bool) -> Tensor:
    if isinstance(model, BCLSTM):
        history, targets, mask = make_bc_batch(records, scaler, model.config)
        return bc_loss(model, history, targets, mask)
    batch = make_batch(records, scaler, model.config)
    return supervised_loss(model, batch) if oracle else seq2seq_loss(model, batch)


def fine_tune(
    model: SkillModel,
    dataset: Dataset,
    scaler: FeatureScaler,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    progress: bool = False,
) -> TrainingHistory:
    """Adam passes over the whole dataset with a fresh optimizer.

    With ``train_cfg.oracle`` the latent penalty against the normalized hidden
    pose is added (ignored for the BC-LSTM, which has no latent).

    Raises:
        ContractError: on an empty dataset or a negative epoch count
    """
    if len(dataset) == 0:
        raise ContractError("cannot fine-tune on an empty dataset")
    epochs = train_cfg.finetune_epochs if epochs is None else epochs
    if epochs < 0:
        raise ContractError(f"epochs must be >= 0, got {epochs}")
    optimizer = Adam(
        model.parameters(),
        lr=train_cfg.lr if lr is None else lr,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.adam_eps,
        grad_clip=train_cfg.grad_clip,
    )
    oracle = train_cfg.oracle and not isinstance(model, BCLSTM)
    records = list(dataset)
    history = TrainingHistory()
    for epoch in tqdm(range(epochs), desc="fine-tune", disable=not progress, leave=False):
        order = rng.permutation(len(records))
        total = 0.0
        for start in range(0, len(records), train_cfg.batch_size):
            chunk = [records[i] for i in order[start:start + train_cfg.batch_size]]
            optimizer.zero_grad()
            loss = model_loss(model, chunk, scaler, oracle)
            backward(loss, optimizer.params)
            history.grad_norms.append(optimizer.step())
            total += loss.item() * len(chunk)
        history.epoch_losses.append(total / len(records))
        logger.debug(f"epoch {epoch + 1}/{epochs}: loss={history.epoch_losses[-1]:.4f}")
    if oracle:
        model.latent_supervised = True
    return history


def train_model(
    config: ModelConfig,
    dataset: Dataset,
    scaler: FeatureScaler,
    train_cfg: TrainConfig,
    seed: int,
    epochs: Optional[int] = None,
    progress: bool = False,
) -> Tuple[SkillModel, TrainingHistory]:
    """Train a freshly initialized model from scratch."""
    model = build_model(config.model_copy(update={"seed": seed}))
    epochs = train_cfg.train_epochs if epochs is None else epochs
    history = fine_tune(model, dataset, scaler, train_cfg, np.random.default_rng([seed, 1]), epochs,
                        progress=progress)
    if history.epoch_losses:
        logger.info(f"Trained {config.arch} on {len(dataset)} demos: "
                    f"loss {history.epoch_losses[0]:.3f} -> {history.final_loss:.3f}")
    return model, history


# ---------------------------------------------------------------------------
# Policies and episodes
# ---------------------------------------------------------------------------

@dataclass
class SkillOutcome:
    plan: SkillTrajectory
    execution: ExecutionResult
    via_observations: np.ndarray

    @property
    def steps(self) -> int:
        return self.execution.steps


def _advance(env: TactileEnv, result: ExecutionResult, pose: np.ndarray, max_steps: int) -> np.ndarray:
    """Track one via-point, folding the steps into ``result``; returns the observation there."""
    part = env.follow_via_points(result.state, np.asarray(pose)[None, :], max_steps - result.steps)
    result.state = part.state
    result.steps += part.steps
    result.observations.extend(part.observations)
    result.actions.extend(part.actions)
    last = part.last_observation or env.observe(part.state)
    return last.as_array()


def execute_plan(
    env: TactileEnv, state: WorldState, poses: np.ndarray, max_steps: int
) -> Tuple[ExecutionResult, np.ndarray]:
    """Execute a world-frame plan, recording the observation after each reached via-point."""
    result = ExecutionResult(state=state, steps=0)
    via = []
    for pose in np.asarray(poses, dtype=np.float64):
        if result.steps >= max_steps or result.state.latched:
            break
        via.append(_advance(env, result, pose, max_steps))
    return result, np.asarray(via).reshape(-1, 9)


class OraclePolicy:
    """Skill oracle that reads the hidden pose."""

    name = "expert"

    def __init__(self, max_M: int = 12):
        self.max_M = max_M

    def run_skill(self, env: TactileEnv, state: WorldState, exploration: ExplorationTrajectory,
                  seed: int) -> SkillOutcome:
        plan = oracle_skill(env, state, self.max_M)
        execution, via = execute_plan(env, state, plan.valid_poses, 3 * self.max_M)
        return SkillOutcome(plan, execution, via)


class ModelPolicy:
    """Learned skill policy: open-loop Seq2Seq plan, or closed-loop BC-LSTM."""

    def __init__(self, model: SkillModel, scaler: FeatureScaler, mode: str = "deterministic"):
        self.model = model
        self.scaler = scaler
        self.mode = mode
        self.max_M = model.config.max_M
        self.name = model.config.arch

    def _rng(self, seed: int) -> Optional[np.random.Generator]:
        return np.random.default_rng([seed, 2]) if self.mode == "sample" else None

    def run_skill(self, env: TactileEnv, state: WorldState, exploration: ExplorationTrajectory,
                  seed: int) -> SkillOutcome:
        if isinstance(self.model, BCLSTM):
            return self._closed_loop(env, state, exploration, seed)
        tokens = self.scaler.tokens(exploration.tokens())[None]
        poses = self.scaler.world_poses(generate(self.model, tokens, self.mode, self._rng(seed))[0])
        execution, via = execute_plan(env, state, poses, 3 * self.max_M)
        return SkillOutcome(SkillTrajectory(poses, len(poses)), execution, via)

    def _closed_loop(self, env: TactileEnv, state: WorldState, exploration: ExplorationTrajectory,
                     seed: int) -> SkillOutcome:
        rng = self._rng(seed)
        max_steps = 3 * self.max_M
        result = ExecutionResult(state=state, steps=0)
        executed = np.zeros((0, 12))
        previous = exploration.observations[-1, 3:6]
        poses, via = [], []
        for _ in range(self.max_M):
            if result.steps >= max_steps or result.state.latched:
                break
            history = bc_history(exploration.tokens(), executed, self.scaler, self.model.config.max_T)
            with no_grad():
                mixture = bc_forward(self.model, history[None]).at(-1)
            pose = self.scaler.world_poses(select_pose(mixture, self.mode, rng)[0])
            observation = _advance(env, result, pose, max_steps)
            executed = np.vstack([executed, skill_tokens(pose[None], previous, observation[None])])
            poses.append(pose)
            via.append(observation)
            previous = pose
        plan = np.asarray(poses).reshape(-1, 3)
        return SkillOutcome(SkillTrajectory(plan, len(plan)), result, np.asarray(via).reshape(-1, 9))


@dataclass
class EpisodeOutcome:
    seed: int
    hidden: HiddenState
    template_id: int
    exploration: ExplorationTrajectory
    post_exploration: WorldState
    skill: SkillOutcome
    success: bool

    @property
    def interactions(self) -> int:
        return len(self.exploration) + self.skill.steps


def choose_template(templates: Sequence[ExplorationTemplate], seed: int) -> ExplorationTemplate:
    if not templates:
        raise ContractError("no exploration templates available")
    return templates[int(np.random.default_rng([seed, 1]).integers(len(templates)))]


def run_episode(
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    policy,
    seed: int,
    hidden: Optional[HiddenState] = None,
) -> EpisodeOutcome:
    """Reset to a random pose (or ``hidden``), explore with the seed's template, then run the skill policy."""
    if hidden is None:
        state, _ = env.reset(seed, randomize=True)
    else:
        state, _ = env.reset(seed, randomize=False)
        state = replace(state, hidden=hidden)
    template = choose_template(templates, seed)
    exploration, post = execute_exploration(env, state, template)
    skill = policy.run_skill(env, post, exploration, seed)
    return EpisodeOutcome(
        seed=seed,
        hidden=env.hidden_state(state),
        template_id=template.id,
        exploration=exploration,
        post_exploration=post,
        skill=skill,
        success=env.success(skill.execution.state),
    )


def record_from_episode(outcome: EpisodeOutcome, skill: SkillOutcome, source: str) -> DemoRecord:
    valid = skill.plan.valid_length
    via = skill.via_observations
    if 0 < len(via) < valid:
        via = np.vstack([via, np.repeat(via[-1:], valid - len(via), axis=0)])
    return DemoRecord(
        exploration_observations=outcome.exploration.observations.tolist(),
        exploration_actions=outcome.exploration.actions.tolist(),
        skill_poses=skill.plan.poses.tolist(),
        skill_observations=via[:valid].tolist() if len(via) else [],
        valid_length=valid,
        hidden=tuple(outcome.hidden.as_array().tolist()),
        success_source=source,
        seed=outcome.seed,
        template_id=outcome.template_id,
    )


@dataclass
class RecordReplay:
    matches: bool
    hidden_matches: bool
    first_mismatch: Optional[int] = None


def replay_record(env: TactileEnv, record: DemoRecord, templates: Sequence[ExplorationTemplate]) -> RecordReplay:
    """Re-derive a record's exploration from its seed and compare it exactly."""
    by_id = {t.id: t for t in templates}
    if record.template_id not in by_id:
        raise ContractError(f"record references unknown template {record.template_id}")
    state, _ = env.reset(record.seed, randomize=True)
    hidden_matches = env.hidden_state(state).as_array().tolist() == list(record.hidden)
    trajectory, _ = execute_exploration(env, state, by_id[record.template_id])
    stored = record.exploration()
    first = None
    for i in range(max(len(trajectory), len(stored))):
        if i >= len(trajectory) or i >= len(stored) \
                or not np.array_equal(trajectory.observations[i], stored.observations[i]) \
                or not np.array_equal(trajectory.actions[i], stored.actions[i]):
            first = i
            break
    return RecordReplay(matches=first is None and hidden_matches, hidden_matches=hidden_matches,
                        first_mismatch=first)


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

class RunLogger:
    """Append-only JSON-lines log; every entry is written and flushed immediately."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def log(self, kind: str, data: Dict[str, Any]) -> None:
        entry = {"type": kind, "timestamp": datetime.now().isoformat(), "data": data}
        with open(self.path, "a") as f:
            f.write(json.dumps(entry) + "\n")
            f.flush()


def load_run_log(path: Union[str, Path], kind: Optional[str] = None) -> List[Dict[str, Any]]:
    """Read a run log, optionally keeping only entries of one type."""
    path = Path(path)
    entries = []
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"malformed run log entry: {exc.msg}", line_number, str(path)) from exc
            if kind is None or entry.get("type") == kind:
                entries.append(entry)
    return entries


# ---------------------------------------------------------------------------
# DAgger loop
# ---------------------------------------------------------------------------

@dataclass
class DaggerResult:
    dataset: Dataset
    log: List[Dict[str, Any]]
    stopped_by: str
    interactions: int

    @property
    def episodes(self) -> int:
        return len(self.log)


def dagger_run(
    env: TactileEnv,
    policy,
    templates: Sequence[ExplorationTemplate],
    config: DaggerConfig,
    seed: int,
    dataset: Optional[Dataset] = None,
    update: Optional[Callable[[Dataset], Optional[TrainingHistory]]] = None,
    evaluate: Optional[Callable[[int], float]] = None,
    checkpoint: Optional[Callable[[int], Any]] = None,
    run_logger: Optional[RunLogger] = None,
    progress: bool = False,
) -> DaggerResult:
    """Incrementally collect demonstrations with oracle corrections on failures.

    Args:
        env: Environment episodes run in
        policy: Learner with ``run_skill``; its model is updated in place by ``update``
        templates: Exploration templates to sample from
        config: Budget, stop rule and periodic evaluation/checkpoint intervals
        seed: Master seed; episode seeds are drawn from it
        dataset: Records to extend (a new dataset if omitted)
        update: Fine-tunes the learner on the grown dataset after each record
        evaluate: Returns a success rate, called every ``eval_every`` iterations
        checkpoint: Called every ``checkpoint_every`` iterations
        run_logger: JSON-lines sink for per-iteration metrics
        progress: Show a progress bar

    Returns:
        The grown dataset, per-iteration log entries and the stop reason

    Raises:
        ContractError: if the budget is smaller than one
    """
    if config.budget < 1:
        raise ContractError(f"DAgger budget must be >= 1, got {config.budget}")
    if config.consecutive_successes < 1:
        raise ContractError("consecutive_successes must be >= 1")
    dataset = dataset if dataset is not None else Dataset()
    master = np.random.default_rng(seed)
    expert = OraclePolicy(policy.max_M)
    log: List[Dict[str, Any]] = []
    streak, interactions, added = 0, 0, 0
    stopped_by = "budget"

    bar = tqdm(total=config.budget, desc="dagger", disable=not progress)
    while added < config.budget:
        iteration = added + 1
        episode_seed = int(master.integers(0, 2 ** 31 - 1))
        outcome = run_episode(env, templates, policy, episode_seed)
        interactions += outcome.interactions
        expert_steps = 0
        if outcome.success:
            streak += 1
            record = record_from_episode(outcome, outcome.skill, "robot")
        else:
            streak = 0
            correction = expert.run_skill(env, outcome.post_exploration, outcome.exploration, episode_seed)
            expert_steps = correction.steps
            interactions += expert_steps
            if not correction.execution.state.latched:
                logger.warning(f"Oracle correction failed for episode seed {episode_seed}")
            record = record_from_episode(outcome, correction, "expert")
        dataset.append(record)
        added += 1
        bar.update(1)

        entry: Dict[str, Any] = {
            "iteration": iteration,
            "seed": episode_seed,
            "template_id": outcome.template_id,
            "success": outcome.success,
            "source": record.success_source,
            "skill_steps": outcome.skill.steps,
            "expert_steps": expert_steps,
            "interactions": interactions,
            "dataset_size": len(dataset),
            "streak": streak,
        }
        if update is not None:
            history = update(dataset)
            if history is not None:
                entry["loss_curve"] = history.epoch_losses
                entry["final_loss"] = history.final_loss
        if evaluate is not None and config.eval_every > 0 and iteration % config.eval_every == 0:
            entry["eval_success_rate"] = evaluate(iteration)
        if checkpoint is not None and config.checkpoint_every > 0 and iteration % config.checkpoint_every == 0:
            checkpoint(iteration)
        log.append(entry)
        if run_logger is not None:
            run_logger.log("iteration", entry)
        bar.set_postfix(streak=streak, experts=dataset.count("expert"))

        if streak >= config.consecutive_successes:
            stopped_by = "consecutive_successes"
            break
    bar.close()

    logger.info(f"DAgger stopped by {stopped_by} after {len(log)} episodes: "
                f"{dataset.count('robot')} robot / {dataset.count('expert')} expert records, "
                f"{interactions} interactions")
    if run_logger is not None:
        run_logger.log("summary", {"stopped_by": stopped_by, "episodes": len(log),
                                   "interactions": interactions, "dataset_size": len(dataset)})
    return DaggerResult(dataset=dataset, log=log, stopped_by=stopped_by, interactions=interactions)
