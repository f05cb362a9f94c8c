"""
Experiment harness for trained skill policies.

All comparisons draw their episode seeds from ``evaluation_seeds`` so every
method is tested on the same target poses.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel
from tqdm import tqdm

from config import RunConfig
from errors import ContractError
from experts import ExplorationTemplate, execute_exploration
from dagger_pipeline import (
    Dataset,
    FeatureScaler,
    ModelPolicy,
    OraclePolicy,
    choose_template,
    run_episode,
    train_model,
)
from seq2seq_models import BCLSTM, SkillModel, encode_prefixes
from tactile_sim import HiddenState, TactileEnv

logger = logging.getLogger(__name__)

# Success rates reported for the simulated door-opening task, carried as
# non-comparable reference columns.
REFERENCE_SUCCESS = {
    "Expert": 0.95,
    "BC-LSTM": 0.11,
    "Seq2Seq-LSTM": 0.56,
    "Seq2Seq": 0.76,
    "Seq2Seq-Oracle": 0.89,
}

BASELINES = (
    ("Seq2Seq", "transformer", False),
    ("Seq2Seq-Oracle", "transformer", True),
    ("Seq2Seq-LSTM", "lstm", False),
    ("BC-LSTM", "bc_lstm", False),
)


class EpisodeResult(BaseModel):
    seed: int
    success: bool
    steps: int
    skill_steps: int
    template_id: int


class EvalReport(BaseModel):
    policy: str
    n_episodes: int
    successes: int
    success_rate: float
    interaction_steps_total: int
    per_episode: List[EpisodeResult]

    @classmethod
    def from_episodes(cls, policy: str, episodes: Sequence[EpisodeResult]) -> "EvalReport":
        if not episodes:
            raise ContractError("an evaluation report needs at least one episode")
        successes = sum(1 for e in episodes if e.success)
        return cls(
            policy=policy,
            n_episodes=len(episodes),
            successes=successes,
            success_rate=successes / len(episodes),
            interaction_steps_total=sum(e.steps for e in episodes),
            per_episode=list(episodes),
        )

    def regenerated(self) -> "EvalReport":
        """Rebuild the summary fields from the per-episode records."""
        return EvalReport.from_episodes(self.policy, self.per_episode)


def evaluation_seeds(seed: int, n_episodes: int) -> List[int]:
    """Episode seeds shared by every method evaluated under ``seed``."""
    return [int(s) for s in np.random.default_rng([seed, 99]).integers(0, 2 ** 31 - 1, size=n_episodes)]


def evaluate(
    policy,
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    n_episodes: int,
    seed: int,
    workers: int = 1,
    progress: bool = False,
) -> EvalReport:
    """Success rate over ``n_episodes`` fresh random poses.

    Episodes are independent given their seed, so ``workers > 1`` runs them in
    a thread pool without changing the result.
    """
    if n_episodes < 1:
        raise ContractError(f"n_episodes must be >= 1, got {n_episodes}")
    seeds = evaluation_seeds(seed, n_episodes)

    def _one(episode_seed: int) -> EpisodeResult:
        outcome = run_episode(env, templates, policy, episode_seed)
        return EpisodeResult(
            seed=episode_seed,
            success=outcome.success,
            steps=outcome.interactions,
            skill_steps=outcome.skill.steps,
            template_id=outcome.template_id,
        )

    name = getattr(policy, "name", type(policy).__name__)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(tqdm(pool.map(_one, seeds), total=n_episodes, desc=f"eval {name}",
                                 disable=not progress))
    else:
        episodes = [_one(s) for s in tqdm(seeds, desc=f"eval {name}", disable=not progress)]
    report = EvalReport.from_episodes(name, episodes)
    logger.info(f"{name}: {report.successes}/{report.n_episodes} successes ({report.success_rate:.1%})")
    return report


# ---------------------------------------------------------------------------
# Demonstration-count ablation
# ---------------------------------------------------------------------------

class AblationRow(BaseModel):
    demo_count: int
    training_seed: int
    trials: int
    successes: int
    success_rate: float


def demo_ablation(
    pool: Dataset,
    demo_counts: Sequence[int],
    trials_per_count: int,
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    config: RunConfig,
    scaler: FeatureScaler,
    seed: int,
    epochs: Optional[int] = None,
    progress: bool = False,
) -> List[AblationRow]:
    """Train from scratch on random subsets of the pool and test each model.

    Raises:
        ContractError: if the pool holds fewer records than the largest count
    """
    if not demo_counts:
        raise ContractError("demo_counts must not be empty")
    if max(demo_counts) > len(pool):
        raise ContractError(f"pool has {len(pool)} demonstrations, ablation needs {max(demo_counts)}")
    if min(demo_counts) < 1:
        raise ContractError("demo counts must be >= 1")
    rng = np.random.default_rng([seed, 3])
    rows = []
    for count in demo_counts:
        subset = pool.subset(rng.choice(len(pool), size=count, replace=False))
        for training_seed in config.evaluation.training_seeds:
            model, _ = train_model(config.model, subset, scaler, config.train, training_seed, epochs, progress)
            report = evaluate(ModelPolicy(model, scaler, config.dagger.generate_mode), env, templates,
                              trials_per_count, seed, config.evaluation.workers)
            rows.append(AblationRow(demo_count=count, training_seed=training_seed, trials=report.n_episodes,
                                    successes=report.successes, success_rate=report.success_rate))
    return rows


# ---------------------------------------------------------------------------
# Online state estimation
# ---------------------------------------------------------------------------

class EstimationCurve(BaseModel):
    mse: List[float]
    n_episodes: int
    latent_supervised: bool
    warning: Optional[str] = None

    def ratio(self, step: int) -> float:
        """MSE after ``step`` exploration steps relative to the first step."""
        step = min(step, len(self.mse))
        return self.mse[step - 1] / self.mse[0] if self.mse[0] > 0 else float("nan")


def state_estimation_curve(
    model: SkillModel,
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    scaler: FeatureScaler,
    n_episodes: int,
    seed: int,
) -> EstimationCurve:
    """Mean squared error between z and the normalized hidden pose after each exploration step."""
    if isinstance(model, BCLSTM):
        raise ContractError("bc_lstm has no latent state to read out")
    if n_episodes < 1:
        raise ContractError(f"n_episodes must be >= 1, got {n_episodes}")
    warning = None
    if not model.latent_supervised:
        warning = "model was trained without latent supervision; z is not calibrated to the hidden pose"
        logger.warning(warning)

    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for episode_seed in evaluation_seeds(seed, n_episodes):
        state, _ = env.reset(episode_seed, randomize=True)
        trajectory, _ = execute_exploration(env, state, choose_template(templates, episode_seed))
        latents = encode_prefixes(model, scaler.tokens(trajectory.tokens())[None])[0]
        target = scaler.hidden(env.hidden_state(state).as_array())
        errors = np.mean((latents - target) ** 2, axis=1)
        for step, err in enumerate(errors):
            sums[step] = sums.get(step, 0.0) + float(err)
            counts[step] = counts.get(step, 0) + 1
    mse = [sums[s] / counts[s] for s in sorted(sums)]
    return EstimationCurve(mse=mse, n_episodes=n_episodes, latent_supervised=model.latent_supervised,
                           warning=warning)


# ---------------------------------------------------------------------------
# Sample efficiency
# ---------------------------------------------------------------------------

class EfficiencyRow(BaseModel):
    iteration: int
    interactions: int
    dataset_size: int
    success: bool
    eval_success_rate: Optional[float] = None


def sample_efficiency_report(run_log: Iterable[Dict[str, Any]]) -> List[EfficiencyRow]:
    """Cumulative interaction steps per DAgger iteration with periodic success rates.

    Accepts the in-memory DAgger log or entries read back with ``load_run_log``.
    """
    rows = []
    for entry in run_log:
        if "type" in entry:
            if entry["type"] != "iteration":
                continue
            entry = entry["data"]
        rows.append(EfficiencyRow(
            iteration=entry["iteration"],
            interactions=entry["interactions"],
            dataset_size=entry["dataset_size"],
            success=entry["success"],
            eval_success_rate=entry.get("eval_success_rate"),
        ))
    for previous, current in zip(rows, rows[1:]):
        if current.interactions < previous.interactions:
            raise ContractError(f"interaction count decreases at iteration {current.iteration}")
    return rows


# ---------------------------------------------------------------------------
# Baselines and repeatability
# ---------------------------------------------------------------------------

class BaselineRow(BaseModel):
    method: str
    arch: str
    oracle: bool
    success_rate: float
    per_seed: List[float]
    n_episodes: int
    interaction_steps_total: int
    reference_success_rate: Optional[float] = None


def baseline_comparison(
    dataset: Dataset,
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    config: RunConfig,
    scaler: FeatureScaler,
    n_episodes: int,
    seed: int,
    epochs: Optional[int] = None,
    progress: bool = False,
) -> List[BaselineRow]:
    """Train every architecture on the same data and test on the same poses."""
    if len(dataset) == 0:
        raise ContractError("baseline comparison needs a non-empty dataset")
    rows = []
    for method, arch, oracle in BASELINES:
        model_cfg = config.model.model_copy(update={"arch": arch})
        train_cfg = config.train.model_copy(update={"oracle": oracle})
        reports = []
        for training_seed in config.evaluation.training_seeds:
            model, _ = train_model(model_cfg, dataset, scaler, train_cfg, training_seed, epochs, progress)
            policy = ModelPolicy(model, scaler, config.dagger.generate_mode)
            reports.append(evaluate(policy, env, templates, n_episodes, seed, config.evaluation.workers))
        rows.append(BaselineRow(
            method=method,
            arch=arch,
            oracle=oracle,
            success_rate=float(np.mean([r.success_rate for r in reports])),
            per_seed=[r.success_rate for r in reports],
            n_episodes=n_episodes,
            interaction_steps_total=sum(r.interaction_steps_total for r in reports),
            reference_success_rate=REFERENCE_SUCCESS.get(method),
        ))
    expert = evaluate(OraclePolicy(config.model.max_M), env, templates, n_episodes, seed,
                      config.evaluation.workers)
    rows.append(BaselineRow(method="Expert", arch="oracle", oracle=True, success_rate=expert.success_rate,
                            per_seed=[expert.success_rate], n_episodes=n_episodes,
                            interaction_steps_total=expert.interaction_steps_total,
                            reference_success_rate=REFERENCE_SUCCESS["Expert"]))
    return rows


class RepeatabilityRow(BaseModel):
    pose: str
    runs: int
    successes: int
    success_rate: float
    mean_skill_steps: float


def repeatability(
    policy,
    env: TactileEnv,
    templates: Sequence[ExplorationTemplate],
    poses: Sequence[Tuple[float, float, float]],
    runs_per_pose: int,
    seed: int,
) -> List[RepeatabilityRow]:
    """Repeated runs at fixed target poses, plus one row of randomized poses."""
    if runs_per_pose < 1:
        raise ContractError(f"runs_per_pose must be >= 1, got {runs_per_pose}")
    seeds = evaluation_seeds(seed, runs_per_pose)
    rows = []
    for pose in poses:
        hidden = HiddenState(*(float(v) for v in pose))
        if not hidden.in_bounds(env.config):
            raise ContractError(f"repeatability pose {pose} outside the workspace box")
        outcomes = [run_episode(env, templates, policy, s, hidden=hidden) for s in seeds]
        successes = sum(1 for o in outcomes if o.success)
        rows.append(RepeatabilityRow(
            pose=f"({hidden.x:+.3f}, {hidden.y:+.3f}, {hidden.theta:+.3f})",
            runs=runs_per_pose,
            successes=successes,
            success_rate=successes / runs_per_pose,
            mean_skill_steps=float(np.mean([o.skill.steps for o in outcomes])),
        ))
    randomized = evaluate(policy, env, templates, runs_per_pose, seed)
    rows.append(RepeatabilityRow(
        pose="random",
        runs=randomized.n_episodes,
        successes=randomized.successes,
        success_rate=randomized.success_rate,
        mean_skill_steps=float(np.mean([e.skill_steps for e in randomized.per_episode])),
    ))
    return rows


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report(
    name: str,
    payload: Union[BaseModel, Dict[str, Any], List[Any]],
    rows: Sequence[Union[BaseModel, Dict[str, Any]]],
    out_dir: Union[str, Path],
) -> Tuple[Path, Path]:
    """Write ``<name>.json`` with the full payload and ``<name>.csv`` with one row per data point."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def _plain(value):
        if isinstance(value, BaseModel):
            return value.model_dump()
        if isinstance(value, list):
            return [_plain(v) for v in value]
        return value

    json_path = out_dir / f"{name}.json"
    json_path.write_text(json.dumps(_plain(payload), indent=2) + "\n")
    csv_path = out_dir / f"{name}.csv"
    pd.DataFrame([_plain(r) for r in rows]).to_csv(csv_path, index=False)
    logger.info(f"Wrote {json_path} and {csv_path}")
    return json_path, csv_path
