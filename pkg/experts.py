"""
Scripted experts: open-loop exploration templates and the skill oracle.

The oracle reads the hidden target pose and returns the canonical latch plan
expressed in the world frame. Exploration templates are fixed via-point
sequences relative to the start pose; executing one never looks at the
observations it produces.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from config import EnvConfig, GeometryConfig
from errors import ContractError, DatasetParseError
from tactile_sim import Observation, TactileEnv, WorldState, clip_action, wrap_angle

logger = logging.getLogger(__name__)

TEMPLATE_STYLES = ("straight", "dither", "axis_sweep", "tap", "bent")
MIN_DIRECTION_SPREAD = 0.2  # rad between two contact force directions
MAX_TEMPLATE_ATTEMPTS = 50


class ExplorationTemplate(BaseModel):
    """Open-loop via-points relative to the start pose, one per exploration step."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    id: int
    via_points: List[Tuple[float, float, float]]
    style: str = "straight"

    def actions(self) -> np.ndarray:
        points = np.vstack([np.zeros(3), np.asarray(self.via_points, dtype=np.float64)])
        return np.diff(points, axis=0)

    def respects_clip(self, cfg: EnvConfig, tol: float = 1e-12) -> bool:
        a = self.actions()
        return bool(
            np.all(np.abs(a[:, :2]) <= cfg.max_translation_step + tol)
            and np.all(np.abs(a[:, 2]) <= cfg.max_rotation_step + tol)
        )


@dataclass
class ExplorationTrajectory:
    """Observation/action pairs of one exploration; ``observations[t]`` follows ``actions[t]``."""

    observations: np.ndarray
    actions: np.ndarray
    template_id: int = -1

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    def tokens(self) -> np.ndarray:
        return np.concatenate([self.observations, self.actions], axis=1)


@dataclass
class SkillTrajectory:
    """World-frame via-point plan; rows past ``valid_length`` are padding."""

    poses: np.ndarray
    valid_length: int

    def __post_init__(self) -> None:
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if not 0 <= self.valid_length <= len(self.poses):
            raise ContractError(f"valid_length {self.valid_length} outside 0..{len(self.poses)}")

    @property
    def valid_poses(self) -> np.ndarray:
        return self.poses[: self.valid_length]

    def padded(self, length: int) -> "SkillTrajectory":
        if self.valid_length > length:
            raise ContractError(f"plan of {self.valid_length} poses does not fit max_M={length}")
        if self.valid_length == 0:
            return SkillTrajectory(np.zeros((length, 3)), 0)
        poses = self.valid_poses
        pad = np.repeat(poses[-1:], length - len(poses), axis=0)
        return SkillTrajectory(np.vstack([poses, pad]), self.valid_length)


# ---------------------------------------------------------------------------
# Exploration templates
# ---------------------------------------------------------------------------

def _template_steps(style: str, length: int, cfg: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-step displacements of one template."""
    t_max, r_max = cfg.max_translation_step, cfg.max_rotation_step
    alpha = math.radians(rng.uniform(-52.0, -38.0))
    direction = np.array([math.cos(alpha), math.sin(alpha)])
    base = t_max * direction / np.max(np.abs(direction))
    steps = np.zeros((length, 3))
    steps[:, :2] = base

    if style == "dither":
        period = rng.uniform(8.0, 16.0)
        amplitude = min(rng.uniform(0.05, 0.15), 0.95 * r_max * period / (2.0 * math.pi))
        phi = amplitude * np.sin(2.0 * math.pi * np.arange(1, length + 1) / period)
        steps[:, 2] = np.diff(np.concatenate([[0.0], phi]))
    elif style == "axis_sweep":
        n_sweep = min(8, length // 3)
        for i in range(n_sweep):
            steps[length - n_sweep + i, :2] = (t_max, 0.0) if i % 2 == 0 else (0.0, -t_max)
    elif style == "tap":
        n_tap = min(6, length // 4)
        for i in range(n_tap):
            steps[length - n_tap + i, :2] = -0.5 * base if i % 2 == 0 else base
    elif style == "bent":
        bend = math.radians(rng.uniform(6.0, 12.0))
        for half, sign in ((slice(0, length // 2), -1.0), (slice(length // 2, length), 1.0)):
            d = np.array([math.cos(alpha + sign * bend), math.sin(alpha + sign * bend)])
            steps[half, :2] = t_max * d / np.max(np.abs(d))
    return steps


def contact_directions(observations: Sequence[Observation]) -> List[float]:
    """Angles of the contact force for every observation in contact."""
    return [math.atan2(o.wrench[1], o.wrench[0]) for o in observations if o.in_contact]


def direction_spread(angles: Sequence[float]) -> float:
    if len(angles) < 2:
        return 0.0
    return max(abs(wrap_angle(a - b)) for i, a in enumerate(angles) for b in angles[i + 1:])


def is_informative(env: TactileEnv, template: ExplorationTemplate) -> bool:
    """Template touches at least two non-parallel faces at the nominal pose (noise off)."""
    quiet = TactileEnv(env.config.model_copy(update={"noise": False}))
    state, _ = quiet.reset(seed=0, randomize=False)
    trajectory, _ = execute_exploration(quiet, state, template)
    observations = [Observation.from_array(o) for o in trajectory.observations]
    angles = contact_directions(observations)
    return len(angles) >= 2 and direction_spread(angles) >= MIN_DIRECTION_SPREAD


def collect_exploration_templates(
    n: int,
    rng: np.random.Generator,
    env: Optional[TactileEnv] = None,
    length: int = 40,
) -> List[ExplorationTemplate]:
    """Generate ``n`` informative open-loop exploration templates.

    Args:
        n: Number of templates (five by default in the pipeline)
        rng: Source of the template parameters
        env: Environment whose config bounds the steps; a default one if omitted
        length: Exploration length T

    Returns:
        Templates whose nominal-pose replay contacts two non-parallel faces
    """
    if n < 1:
        raise ContractError(f"need at least one exploration template, got n={n}")
    if length < 1:
        raise ContractError(f"exploration length must be >= 1, got {length}")
    env = env or TactileEnv()
    templates: List[ExplorationTemplate] = []
    for template_id in range(n):
        style = TEMPLATE_STYLES[template_id % len(TEMPLATE_STYLES)]
        for attempt in range(MAX_TEMPLATE_ATTEMPTS):
            steps = _template_steps(style, length, env.config, rng)
            via_points = [tuple(float(v) for v in p) for p in np.cumsum(steps, axis=0)]
            candidate = ExplorationTemplate(id=template_id, via_points=via_points, style=style)
            if is_informative(env, candidate):
                templates.append(candidate)
                logger.debug(f"Template {template_id} ({style}) accepted after {attempt + 1} draws")
                break
        else:
            raise ContractError(f"could not build an informative {style!r} template of length {length}")
    logger.info(f"Collected {len(templates)} exploration templates of length {length}")
    return templates


def execute_exploration(
    env: TactileEnv, state: WorldState, template: ExplorationTemplate
) -> Tuple[ExplorationTrajectory, WorldState]:
    """Replay a template open-loop from a freshly reset state."""
    observations, actions = [], []
    for action in template.actions():
        action = clip_action(action, env.config)
        state, obs = env.step(state, action)
        observations.append(obs.as_array())
        actions.append(action)
    trajectory = ExplorationTrajectory(
        observations=np.asarray(observations).reshape(-1, 9),
        actions=np.asarray(actions).reshape(-1, 3),
        template_id=template.id,
    )
    return trajectory, state


def save_templates(templates: Sequence[ExplorationTemplate], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([t.model_dump() for t in templates], indent=1) + "\n")
    return path


def load_templates(path: Union[str, Path]) -> List[ExplorationTemplate]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
        return [ExplorationTemplate.model_validate(e) for e in entries]
    except (json.JSONDecodeError, ValueError) as exc:
        line = getattr(exc, "lineno", 1)
        raise DatasetParseError(f"invalid template file: {exc}", line, str(path)) from exc


# ---------------------------------------------------------------------------
# Skill oracle
# ---------------------------------------------------------------------------

def canonical_latch_plan(geometry: GeometryConfig, length: int = 12) -> np.ndarray:
    """Approach, alignment and insertion via-points in the target frame."""
    if length < 3:
        raise ContractError(f"latch plan needs at least 3 via-points, got {length}")
    c, depth = geometry.notch_center, geometry.notch_depth
    hover = 0.025
    n_approach = max(1, length // 4)
    n_insert = max(1, length // 4)
    n_descent = length - n_approach - n_insert

    approach_x = np.linspace(0.4 * c, c, n_approach) if n_approach > 1 else np.array([c])
    approach = np.column_stack([approach_x, np.full(n_approach, hover)])
    descent_y = np.linspace(0.6 * hover, -depth + 0.002, n_descent)
    descent = np.column_stack([np.full(n_descent, c), descent_y])
    insert = np.tile([c, -depth - 0.004], (n_insert, 1))

    xy = np.vstack([approach, descent, insert])
    return np.column_stack([xy, np.zeros(length)])


def oracle_skill(env: TactileEnv, state: WorldState, length: int = 12) -> SkillTrajectory:
    """World-frame latch plan computed from the hidden target pose.

    Raises:
        ContractError: if the hidden pose lies outside the workspace box
    """
    hidden = env.hidden_state(state)
    if not hidden.in_bounds(env.config):
        raise ContractError(f"hidden pose {hidden} outside the workspace box")
    canonical = canonical_latch_plan(env.config.geometry, length)
    xy = hidden.to_world(canonical[:, :2])
    phi = canonical[:, 2] + hidden.theta
    return SkillTrajectory(np.column_stack([xy, phi]), length)
