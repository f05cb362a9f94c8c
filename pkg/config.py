"""
Configuration models for the tactile Seq2Seq stack.

Every section is a pydantic model that rejects unknown keys. JSON files are
the source of truth; CLI flags override file values and the fully resolved
``RunConfig`` is persisted into each run directory.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from typing_extensions import Self

from errors import ConfigError

load_dotenv()

logger = logging.getLogger(__name__)

RUNS_DIR = os.getenv("SEQ2SEQ_RUNS_DIR", "runs")
LOG_LEVEL = os.getenv("SEQ2SEQ_LOG_LEVEL", "INFO")

Pose = Tuple[float, float, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class StiffnessConfig(StrictModel):
    """Diagonal planar stiffness of the contact model (checked when used)."""

    k_env: float = 5000.0
    k_ctrl: float = 500.0
    torque_arm: float = 0.1


class GeometryConfig(StrictModel):
    """L-shaped rail with a chamfered latch notch, in the target frame.

    The inner corner of the L sits at the target origin: the floor top is the
    line y = 0 for x < 0 and the wall face is the line x = 0 for y > 0. The
    notch is cut into the floor at ``notch_center``.
    """

    notch_center: float = -0.04
    notch_half_width: float = 0.0025
    mouth_half_width: float = 0.012
    chamfer_depth: float = 0.008
    notch_depth: float = 0.02
    floor_length: float = 0.5
    wall_height: float = 0.5
    thickness: float = 0.1

    @model_validator(mode="after")
    def _check_notch(self) -> Self:
        if not 0.0 < self.notch_half_width < self.mouth_half_width:
            raise ValueError("need 0 < notch_half_width < mouth_half_width")
        if not 0.0 < self.chamfer_depth < self.notch_depth < self.thickness:
            raise ValueError("need 0 < chamfer_depth < notch_depth < thickness")
        if self.notch_center + self.mouth_half_width >= 0.0:
            raise ValueError("notch must lie on the floor, left of the corner")
        return self


class EnvConfig(StrictModel):
    workspace_half_extent: float = 0.15
    theta_max: float = 0.26
    workspace_margin: float = 0.05
    start_pose: Pose = (-0.17, 0.17, 0.0)
    stiffness: StiffnessConfig = Field(default_factory=StiffnessConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    noise: bool = True
    sigma_force: float = 0.01
    sigma_pose: float = 1e-4
    eps_pos: float = 0.003
    eps_ang: float = 0.03
    dt: float = 0.1
    max_translation_step: float = 0.01
    max_rotation_step: float = 0.05

    @field_validator("dt", "eps_pos", "eps_ang", "max_translation_step", "max_rotation_step",
                     "workspace_half_extent", "theta_max")
    @classmethod
    def _positive(cls, value: float) -> float:
        if value <= 0.0:
            raise ValueError("must be positive")
        return value


class ModelConfig(StrictModel):
    arch: Literal["transformer", "lstm", "bc_lstm"] = "transformer"
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ff_mult: int = 2
    z_dim: int = 3
    n_components: int = 5
    max_T: int = 40
    max_M: int = 12
    obs_dim: int = 9
    act_dim: int = 3
    pose_dim: int = 3
    latent_weight: float = 1.0
    init_sigma: float = 0.1
    seed: int = 0

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.z_dim != 3:
            raise ValueError("z_dim must be 3 (one latent per hidden pose coordinate)")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_T < 1 or self.max_M < 1:
            raise ValueError("max_T and max_M must be >= 1")
        if self.init_sigma <= 0.0:
            raise ValueError("init_sigma must be positive")
        return self

    @property
    def token_dim(self) -> int:
        return self.obs_dim + self.act_dim


class TrainConfig(StrictModel):
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    finetune_epochs: int = 50
    train_epochs: int = 300
    batch_size: int = 32
    grad_clip: Optional[float] = 1.0
    oracle: bool = False


class DaggerConfig(StrictModel):
    budget: int = 50
    consecutive_successes: int = 10
    n_templates: int = 5
    explore_length: int = 40
    generate_mode: Literal["deterministic", "sample"] = "deterministic"
    eval_every: int = 0
    eval_episodes: int = 20
    checkpoint_every: int = 10


class EvalConfig(StrictModel):
    n_episodes: int = 100
    demo_counts: List[int] = Field(default_factory=lambda: [5, 10, 25, 50, 100])
    trials_per_count: int = 45
    workers: int = 1
    training_seeds: List[int] = Field(default_factory=lambda: [0])
    repeatability_runs: int = 20
    repeatability_poses: List[Pose] = Field(
        default_factory=lambda: [(0.05, 0.05, 0.1), (-0.08, 0.02, -0.15), (0.1, -0.1, 0.2)]
    )


class RunConfig(StrictModel):
    """Resolved configuration of one CLI invocation."""

    seed: int = 0
    env_config_path: Optional[Path] = None
    model_config_path: Optional[Path] = None
    out_dir: Path = Path(RUNS_DIR)
    env: EnvConfig = Field(default_factory=EnvConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dagger: DaggerConfig = Field(default_factory=DaggerConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    def resolved(self) -> "RunConfig":
        """Load referenced env/model files into their sections and absolutize paths."""
        data = self.model_dump()
        if self.env_config_path is not None:
            path = self.env_config_path.expanduser().resolve()
            data["env_config_path"] = path
            data["env"] = read_json_config(path, EnvConfig).model_dump()
        if self.model_config_path is not None:
            path = self.model_config_path.expanduser().resolve()
            data["model_config_path"] = path
            data["model"] = read_json_config(path, ModelConfig).model_dump()
        data["out_dir"] = self.out_dir.expanduser().resolve()
        return validate_config(RunConfig, data)


def validate_config(model_cls: type, data: Dict[str, Any], source: str = "<config>"):
    """Validate a dict against a config model, converting failures to ``ConfigError``."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"{source}: {problems}") from exc


def read_json_config(path: Union[str, Path], model_cls: type = RunConfig):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return validate_config(model_cls, data, str(path))


def write_json_config(config: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.model_dump_json(indent=2) + "\n")
    return path


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (``"dagger.budget": 50``); ``None`` values are skipped."""
    data = config.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section in override {dotted!r}")
            node = node[key]
        if leaf not in node:
            raise ConfigError(f"unknown config key in override {dotted!r}")
        node[leaf] = value
    return validate_config(RunConfig, data, "overrides")
