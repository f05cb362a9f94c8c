"""
Planar tactile contact environment with a hidden target pose.

The target is an L-shaped rail (floor + wall) with a chamfered latch notch cut
into the floor. Its pose e = (x, y, theta) is hidden; the robot only observes
the contact wrench and its own kinematics. Contact is quasi-static and
compliant: commanding the tip into the rail leaves it slightly inside the
surface and produces a stiffness-based restoring force.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import EnvConfig, GeometryConfig, StiffnessConfig
from errors import ConfigError, ContractError, DatasetParseError

logger = logging.getLogger(__name__)

REPLAY_FORMAT_VERSION = 1

Vec3 = Tuple[float, float, float]


def wrap_angle(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HiddenState:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def in_bounds(self, cfg: EnvConfig) -> bool:
        half = cfg.workspace_half_extent
        return abs(self.x) <= half and abs(self.y) <= half and abs(self.theta) <= cfg.theta_max

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Map target-frame points (..., 2) to world coordinates."""
        return points @ rotation(self.theta).T + np.array([self.x, self.y])

    def to_target(self, points: np.ndarray) -> np.ndarray:
        return (points - np.array([self.x, self.y])) @ rotation(self.theta)


@dataclass(frozen=True)
class WorldState:
    hidden: HiddenState
    ee_pose: Vec3
    ee_velocity: Vec3 = (0.0, 0.0, 0.0)
    latched: bool = False
    step_index: int = 0
    noise_seed: int = 0


@dataclass(frozen=True)
class Observation:
    wrench: Vec3
    ee_pose: Vec3
    ee_velocity: Vec3

    def as_array(self) -> np.ndarray:
        return np.array(self.wrench + self.ee_pose + self.ee_velocity)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Observation":
        v = [float(x) for x in values]
        if len(v) != 9:
            raise ContractError(f"observation needs 9 values, got {len(v)}")
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]))

    @property
    def in_contact(self) -> bool:
        return any(f != 0.0 for f in self.wrench)


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    dphi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dphi])

    def clipped(self, cfg: EnvConfig) -> "Action":
        t, r = cfg.max_translation_step, cfg.max_rotation_step
        return Action(
            float(np.clip(self.dx, -t, t)),
            float(np.clip(self.dy, -t, t)),
            float(np.clip(self.dphi, -r, r)),
        )


def clip_action(values: Sequence[float], cfg: EnvConfig) -> np.ndarray:
    t, r = cfg.max_translation_step, cfg.max_rotation_step
    a = np.asarray(values, dtype=np.float64)
    return np.array([np.clip(a[0], -t, t), np.clip(a[1], -t, t), np.clip(a[2], -r, r)])


# ---------------------------------------------------------------------------
# Contact model
# ---------------------------------------------------------------------------

def check_stiffness(cfg: StiffnessConfig) -> None:
    if not (cfg.k_env > 0.0 and cfg.k_ctrl > 0.0):
        raise ConfigError(f"stiffness must be positive (k_env={cfg.k_env}, k_ctrl={cfg.k_ctrl})")
    if cfg.torque_arm < 0.0:
        raise ConfigError(f"torque_arm must be non-negative, got {cfg.torque_arm}")


def effective_stiffness(cfg: StiffnessConfig) -> float:
    """Series combination of environment and controller stiffness."""
    return cfg.k_env * cfg.k_ctrl / (cfg.k_env + cfg.k_ctrl)


def compute_wrench(
    dp: Sequence[float],
    cfg: StiffnessConfig,
    contact_normal: Sequence[float],
    tangential_offset: float = 0.0,
) -> np.ndarray:
    """Planar external wrench (fx, fy, tau) of a compliant contact.

    Args:
        dp: Task-frame displacement relative to the target frame; only its
            component along the normal counts, and only when positive
        cfg: Stiffness values
        contact_normal: Outward surface normal (direction of the force on the tool)
        tangential_offset: Signed tangential component of the unit tool axis
            at the contact; the lever arm is ``torque_arm * tangential_offset``

    Returns:
        Array ``[fx, fy, tau]``
    """
    check_stiffness(cfg)
    normal = np.asarray(contact_normal, dtype=np.float64)
    length = float(np.linalg.norm(normal))
    if length == 0.0:
        return np.zeros(3)
    normal = normal / length
    depth = max(float(np.dot(np.asarray(dp, dtype=np.float64), normal)), 0.0)
    force = effective_stiffness(cfg) * depth * normal
    tau = cfg.torque_arm * tangential_offset * float(np.linalg.norm(force))
    return np.array([force[0], force[1], tau])


class RailGeometry:
    """Closed polygon of the rail in the target frame (counter-clockwise)."""

    def __init__(self, cfg: GeometryConfig):
        c, w, m = cfg.notch_center, cfg.notch_half_width, cfg.mouth_half_width
        k, d = cfg.chamfer_depth, cfg.notch_depth
        floor, wall, thick = cfg.floor_length, cfg.wall_height, cfg.thickness
        self.vertices = np.array([
            (-floor, -thick), (thick, -thick), (thick, wall), (0.0, wall), (0.0, 0.0),
            (c + m, 0.0), (c + w, -k), (c + w, -d), (c - w, -d), (c - w, -k),
            (c - m, 0.0), (-floor, 0.0),
        ])
        self._starts = self.vertices
        self._ends = np.roll(self.vertices, -1, axis=0)
        self.latch_point = np.array([c, -d])

    def contains(self, point: np.ndarray) -> bool:
        x, y = float(point[0]), float(point[1])
        y1, y2 = self._starts[:, 1], self._ends[:, 1]
        x1, x2 = self._starts[:, 0], self._ends[:, 0]
        straddles = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        return bool(np.count_nonzero(straddles & (x < x_cross)) % 2)

    def closest_boundary_point(self, point: np.ndarray) -> Tuple[np.ndarray, float]:
        ab = self._ends - self._starts
        t = np.einsum("ij,ij->i", point - self._starts, ab) / np.einsum("ij,ij->i", ab, ab)
        proj = self._starts + np.clip(t, 0.0, 1.0)[:, None] * ab
        dist = np.linalg.norm(proj - point, axis=1)
        i = int(np.argmin(dist))
        return proj[i], float(dist[i])

    def penetration(self, point: np.ndarray) -> Optional[Tuple[float, np.ndarray]]:
        """Depth and outward normal if ``point`` is strictly inside, else ``None``."""
        if not self.contains(point):
            return None
        surface, depth = self.closest_boundary_point(point)
        if depth == 0.0:
            return None
        return depth, (surface - point) / depth


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

@dataclass
class ExecutionResult:
    state: WorldState
    steps: int
    observations: List[Observation] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.state.latched

    @property
    def last_observation(self) -> Optional[Observation]:
        return self.observations[-1] if self.observations else None


class TactileEnv:
    """Functional environment: ``step`` is pure in (state, action, config)."""

    def __init__(self, config: Optional[EnvConfig] = None):
        self.config = config or EnvConfig()
        check_stiffness(self.config.stiffness)
        self.geometry = RailGeometry(self.config.geometry)
        k_env, k_ctrl = self.config.stiffness.k_env, self.config.stiffness.k_ctrl
        self._follow_fraction = k_env / (k_env + k_ctrl)
        self.bound = self.config.workspace_half_extent + self.config.workspace_margin

    # POMDP interface ----------------------------------------------------------
    def reset(self, seed: int, randomize: bool = True) -> Tuple[WorldState, Observation]:
        rng = np.random.default_rng(seed)
        cfg = self.config
        if randomize:
            half = cfg.workspace_half_extent
            x, y = rng.uniform(-half, half, size=2)
            theta = rng.uniform(-cfg.theta_max, cfg.theta_max)
            hidden = HiddenState(float(x), float(y), float(theta))
        else:
            hidden = HiddenState(0.0, 0.0, 0.0)
        state = WorldState(hidden=hidden, ee_pose=tuple(float(v) for v in cfg.start_pose),
                           noise_seed=int(seed))
        return state, self._noisy(state, np.zeros(3))

    def step(self, state: WorldState, action: Union[Action, Sequence[float]]) -> Tuple[WorldState, Observation]:
        raw = action.as_array() if isinstance(action, Action) else np.asarray(action, dtype=np.float64)
        if raw.shape != (3,) or not np.all(np.isfinite(raw)):
            raise ContractError(f"action must be 3 finite values, got {raw!r}")
        a = clip_action(raw, self.config)
        pose = np.asarray(state.ee_pose)
        target = np.clip(pose[:2] + a[:2], -self.bound, self.bound)
        phi = pose[2] + a[2]

        wrench = np.zeros(3)
        contact = self.geometry.penetration(state.hidden.to_target(target))
        if contact is not None:
            depth, normal_t = contact
            normal = rotation(state.hidden.theta) @ normal_t
            tool_axis = np.array([math.sin(phi), -math.cos(phi)])
            tangential = float(tool_axis[0] * normal[1] - tool_axis[1] * normal[0])
            wrench = compute_wrench(depth * normal, self.config.stiffness, normal, tangential)
            target = np.clip(target + normal * depth * self._follow_fraction, -self.bound, self.bound)

        new_pose = (float(target[0]), float(target[1]), float(phi))
        velocity = (
            (new_pose[0] - pose[0]) / self.config.dt,
            (new_pose[1] - pose[1]) / self.config.dt,
            (new_pose[2] - pose[2]) / self.config.dt,
        )
        new_state = WorldState(
            hidden=state.hidden,
            ee_pose=new_pose,
            ee_velocity=velocity,
            latched=state.latched or self._latch_condition(new_pose, state.hidden),
            step_index=state.step_index + 1,
            noise_seed=state.noise_seed,
        )
        return new_state, self._noisy(new_state, wrench)

    def success(self, state: WorldState) -> bool:
        return state.latched or self._latch_condition(state.ee_pose, state.hidden)

    def hidden_state(self, state: WorldState) -> HiddenState:
        return state.hidden

    def observe(self, state: WorldState, wrench: Sequence[float] = (0.0, 0.0, 0.0)) -> Observation:
        """Noise-free observation of ``state`` with the given wrench."""
        return Observation(tuple(float(v) for v in wrench), state.ee_pose, state.ee_velocity)

    # geometry helpers ---------------------------------------------------------
    def latch_point(self, hidden: HiddenState) -> np.ndarray:
        return hidden.to_world(self.geometry.latch_point)

    def state_at(self, state: WorldState, ee_pose: Sequence[float]) -> WorldState:
        """Copy of ``state`` with the end effector placed at ``ee_pose`` and at rest."""
        return replace(state, ee_pose=tuple(float(v) for v in ee_pose), ee_velocity=(0.0, 0.0, 0.0))

    def _latch_condition(self, pose: Sequence[float], hidden: HiddenState) -> bool:
        cfg = self.config
        tip = hidden.to_target(np.array(pose[:2]))
        distance = float(np.linalg.norm(tip - self.geometry.latch_point))
        angle_error = abs(wrap_angle(pose[2] - hidden.theta))
        return distance < cfg.eps_pos and angle_error < cfg.eps_ang

    def _noisy(self, state: WorldState, wrench: np.ndarray) -> Observation:
        cfg = self.config
        pose = np.asarray(state.ee_pose)
        velocity = np.asarray(state.ee_velocity)
        if cfg.noise:
            rng = np.random.default_rng([state.noise_seed, state.step_index])
            pose = pose + rng.normal(0.0, cfg.sigma_pose, size=3)
            velocity = velocity + rng.normal(0.0, cfg.sigma_pose / cfg.dt, size=3)
            force_noise = rng.normal(0.0, cfg.sigma_force, size=3)
            if np.any(wrench != 0.0):
                force_noise[2] *= cfg.stiffness.torque_arm
                wrench = wrench + force_noise
        return Observation(
            tuple(float(v) for v in wrench),
            tuple(float(v) for v in pose),
            tuple(float(v) for v in velocity),
        )

    # low-level controller -----------------------------------------------------
    def follow_via_points(
        self,
        state: WorldState,
        plan: np.ndarray,
        max_steps: int,
        per_point_cap: int = 6,
        reach_tol: float = 5e-4,
        angle_tol: float = 1e-3,
        stall_tol: float = 1e-4,
    ) -> ExecutionResult:
        """Track world-frame via-points with clipped displacement actions.

        Moves on to the next via-point once the current one is reached, the
        tip stalls against contact, or ``per_point_cap`` steps were spent.
        Stops as soon as the latch engages or ``max_steps`` are used.
        """
        result = ExecutionResult(state=state, steps=0)
        for target in np.asarray(plan, dtype=np.float64):
            if result.steps >= max_steps or result.state.latched:
                break
            for _ in range(per_point_cap):
                if result.steps >= max_steps or result.state.latched:
                    break
                pose = np.asarray(result.state.ee_pose)
                delta = target - pose
                delta[2] = wrap_angle(delta[2])
                if np.linalg.norm(delta[:2]) < reach_tol and abs(delta[2]) < angle_tol:
                    break
                action = clip_action(delta, self.config)
                result.state, obs = self.step(result.state, action)
                result.steps += 1
                result.actions.append(action)
                result.observations.append(obs)
                moved = np.linalg.norm(np.asarray(result.state.ee_pose[:2]) - pose[:2])
                if moved < stall_tol and abs(delta[2] - action[2]) < angle_tol:
                    break
        return result


# ---------------------------------------------------------------------------
# Episode replay files
# ---------------------------------------------------------------------------

@dataclass
class ReplayResult:
    matches: bool
    steps: int
    first_mismatch: Optional[int] = None
    observations: List[Observation] = field(default_factory=list)


def save_replay(
    path: Union[str, Path],
    seed: int,
    randomize: bool,
    actions: Iterable[Sequence[float]],
    observations: Iterable[Observation],
    noise: bool,
) -> Path:
    """Write an episode as JSON-lines: header, then one (action, observation) per step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        header = {"kind": "episode-replay", "format_version": REPLAY_FORMAT_VERSION,
                  "seed": int(seed), "randomize": bool(randomize), "noise": bool(noise)}
        f.write(json.dumps(header) + "\n")
        for i, (action, obs) in enumerate(zip(actions, observations)):
            entry = {"step": i, "action": [float(v) for v in action],
                     "observation": [float(v) for v in obs.as_array()]}
            f.write(json.dumps(entry) + "\n")
    return path


def load_replay(path: Union[str, Path]) -> Tuple[dict, List[np.ndarray], List[Observation]]:
    path = Path(path)
    actions: List[np.ndarray] = []
    observations: List[Observation] = []
    header: Optional[dict] = None
    with open(path) as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                if header is None:
                    if entry.get("kind") != "episode-replay":
                        raise ValueError("first line is not an episode-replay header")
                    header = entry
                    continue
                actions.append(np.asarray(entry["action"], dtype=np.float64))
                observations.append(Observation.from_array(entry["observation"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(str(exc), line_number, str(path)) from exc
    if header is None:
        raise DatasetParseError("empty replay file", 1, str(path))
    return header, actions, observations


def replay_episode(env: TactileEnv, path: Union[str, Path]) -> ReplayResult:
    """Re-execute a stored episode and compare observations exactly."""
    header, actions, stored = load_replay(path)
    state, _ = env.reset(header["seed"], header["randomize"])
    result = ReplayResult(matches=True, steps=0)
    for i, (action, expected) in enumerate(zip(actions, stored)):
        state, obs = env.step(state, action)
        result.observations.append(obs)
        result.steps += 1
        if result.matches and obs != expected:
            result.matches = False
            result.first_mismatch = i
    if not result.matches:
        logger.warning(f"Replay of {path} diverged at step {result.first_mismatch}")
    return result
