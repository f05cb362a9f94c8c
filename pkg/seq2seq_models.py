"""
Seq2Seq skill policies with a mixture density head.

- TransformerSeq2Seq: causal transformer encoder over exploration tokens, a
  3-dim latent bottleneck, and a causal transformer decoder that cross-attends
  to the latent at every layer.
- LSTMSeq2Seq: the same contract with recurrent encoder and decoder.
- BCLSTM: behavior-cloning baseline that maps the raw token history straight
  to a next-pose mixture, without the exploration/skill split.

All models work on normalized tokens and poses; see ``FeatureScaler`` in
``dagger_pipeline`` for the scaling.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from autodiff import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    exp,
    expand,
    gelu,
    load_checkpoint,
    log,
    log_softmax,
    logsumexp,
    matmul,
    no_grad,
    reshape,
    save_checkpoint,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)
from config import ModelConfig
from errors import CheckpointError, ContractError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
LOG_2PI = math.log(2.0 * math.pi)
MASK_VALUE = -1e9


# ---------------------------------------------------------------------------
# Mixture density head
# ---------------------------------------------------------------------------

@dataclass
class MixtureParams:
    """Diagonal Gaussian mixture over the next pose, per position."""

    log_weights: Tensor  # (..., K)
    means: Tensor        # (..., K, P)
    variances: Tensor    # (..., K, P)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.data)

    def at(self, position: int) -> "MixtureParams":
        """Mixture of one sequence position (second axis)."""
        return MixtureParams(
            self.log_weights[:, position],
            self.means[:, position],
            self.variances[:, position],
        )


class MDNHead(Module):
    def __init__(self, d_model: int, n_components: int, pose_dim: int, init_sigma: float,
                 rng: np.random.Generator):
        self.n_components = n_components
        self.pose_dim = pose_dim
        k, p = n_components, pose_dim
        self.proj = Linear(d_model, k + 2 * k * p, rng)
        # exp(bias) + floor == init_sigma**2 at start
        self.proj.bias.data[k + k * p:] = math.log(max(init_sigma ** 2 - VARIANCE_FLOOR, VARIANCE_FLOOR))

    def __call__(self, h: Tensor) -> MixtureParams:
        k, p = self.n_components, self.pose_dim
        out = self.proj(h)
        lead = out.shape[:-1]
        logits = out[..., :k]
        means = reshape(out[..., k:k + k * p], lead + (k, p))
        raw_var = reshape(out[..., k + k * p:], lead + (k, p))
        return MixtureParams(log_softmax(logits, axis=-1), means, exp(raw_var) + VARIANCE_FLOOR)


def mdn_log_prob(params: MixtureParams, pose) -> Tensor:
    """Log-density of ``pose`` (..., P) under the mixture, with log-sum-exp.

    Raises:
        ContractError: if the pose holds NaN or infinite values
    """
    target = np.asarray(pose.data if isinstance(pose, Tensor) else pose, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise ContractError("mdn_log_prob: pose must be finite")
    target = np.broadcast_to(target[..., None, :], params.means.shape).copy()
    diff = params.means - target
    sq = diff * diff / params.variances
    component = (sq + log(params.variances) + LOG_2PI).sum(axis=-1) * -0.5
    return logsumexp(params.log_weights + component, axis=-1)


def select_pose(params: MixtureParams, mode: str, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Pick one pose per batch row from (B, K, P) mixture parameters."""
    weights = params.weights
    means = params.means.data
    rows = np.arange(weights.shape[0])
    if mode == "deterministic":
        return means[rows, np.argmax(weights, axis=-1)]
    if mode != "sample":
        raise ContractError(f"unknown generation mode {mode!r}")
    if rng is None:
        raise ContractError("sample mode needs an rng")
    chosen = np.array([rng.choice(weights.shape[-1], p=w / w.sum()) for w in weights])
    std = np.sqrt(params.variances.data[rows, chosen])
    return means[rows, chosen] + std * rng.standard_normal((weights.shape[0], means.shape[-1]))


# ---------------------------------------------------------------------------
# Transformer blocks
# ---------------------------------------------------------------------------

def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    position = np.arange(length)[:, None]
    div_term = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(position * div_term)
    pe[:, 1::2] = np.cos(position * div_term[: d_model // 2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return transpose(reshape(x, (b, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, memory: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        b, length, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(memory)), self._split(self.value(memory))
        scores = matmul(q, k.transpose()) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = scores + mask
        context = matmul(softmax(scores, axis=-1), v)
        return self.out(reshape(transpose(context, (0, 2, 1, 3)), (b, length, d)))


class FeedForward(Module):
    def __init__(self, d_model: int, mult: int, rng: np.random.Generator):
        self.inner = Linear(d_model, mult * d_model, rng)
        self.outer = Linear(mult * d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(gelu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn_norm = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ff_norm = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_mult, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        normed = self.attn_norm(x)
        x = x + self.attn(normed, normed, mask)
        return x + self.ff(self.ff_norm(x))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_norm = LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.cross_norm = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng)
        self.ff_norm = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.ff_mult, rng)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray) -> Tensor:
        normed = self.self_norm(x)
        x = x + self.self_attn(normed, normed, mask)
        x = x + self.cross_attn(self.cross_norm(x), memory)
        return x + self.ff(self.ff_norm(x))


class LSTMCell(Module):
    def __init__(self, input_dim: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.input_map = Linear(input_dim, 4 * hidden, rng)
        self.hidden_map = Linear(hidden, 4 * hidden, rng, bias=False)
        self.input_map.bias.data[hidden:2 * hidden] = 1.0  # forget gate

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        n = self.hidden
        gates = self.input_map(x) + self.hidden_map(h)
        i = sigmoid(gates[:, :n])
        f = sigmoid(gates[:, n:2 * n])
        g = tanh(gates[:, 2 * n:3 * n])
        o = sigmoid(gates[:, 3 * n:])
        c = f * c + i * g
        return o * tanh(c), c


def run_lstm(cells: List[LSTMCell], inputs: List[Tensor], batch: int) -> List[Tensor]:
    """Run stacked cells over a list of (B, in) inputs; returns top-layer outputs."""
    states = [(Tensor(np.zeros((batch, c.hidden))), Tensor(np.zeros((batch, c.hidden)))) for c in cells]
    outputs = []
    for x in inputs:
        for layer, cell in enumerate(cells):
            h, c = cell(x, *states[layer])
            states[layer] = (h, c)
            x = h
        outputs.append(x)
    return outputs


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class SkillModel(Module):
    """Common contract of the Seq2Seq policies."""

    config: ModelConfig
    latent_supervised: bool = False

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.token_dim:
            raise ContractError(f"tokens must be (B, T, {self.config.token_dim}), got {tokens.shape}")
        if tokens.shape[1] == 0:
            raise ContractError("exploration trajectory is empty")
        if tokens.shape[1] > self.config.max_T:
            raise ContractError(f"exploration length {tokens.shape[1]} exceeds max_T={self.config.max_T}")
        return tokens

    def encode_all(self, tokens: np.ndarray) -> Tensor:
        """Latent after every prefix length, shape (B, T, z_dim)."""
        raise NotImplementedError

    def encode(self, tokens: np.ndarray, lengths: Optional[np.ndarray] = None) -> Tensor:
        """Latent z of each (possibly right-padded) exploration, shape (B, z_dim)."""
        tokens = self._check_tokens(tokens)
        b, t, _ = tokens.shape
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths, dtype=int)
        if lengths.shape != (b,) or np.any(lengths < 1) or np.any(lengths > t):
            raise ContractError(f"lengths must lie in 1..{t}, got {lengths}")
        return self.encode_all(tokens)[np.arange(b), lengths - 1]

    def decode_inputs(self, z: Tensor, prefix: np.ndarray) -> MixtureParams:
        """Mixtures after the start token and each prefix pose, (B, L+1, ...)."""
        raise NotImplementedError

    def decode(self, z: Tensor, poses: np.ndarray) -> MixtureParams:
        """Teacher-forced mixtures for every target position of ``poses`` (B, M, P)."""
        poses = np.asarray(poses, dtype=np.float64)
        return self.decode_inputs(z, poses[:, :-1])

    def decode_step(self, z: Tensor, prefix: np.ndarray) -> MixtureParams:
        """Mixture of the next pose given the poses emitted so far (B, L, P)."""
        prefix = np.asarray(prefix, dtype=np.float64)
        if prefix.shape[1] >= self.config.max_M:
            raise ContractError(f"prefix length {prefix.shape[1]} must be < max_M={self.config.max_M}")
        return self.decode_inputs(z, prefix).at(-1)

    def _start(self, batch: int) -> Tensor:
        return expand(reshape(self.start_token, (1, 1, self.config.pose_dim)), (batch, 1, self.config.pose_dim))


class TransformerSeq2Seq(SkillModel):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.token_in = Linear(config.token_dim, d, rng)
        self.encoder_layers = [EncoderLayer(config, rng) for _ in range(config.n_enc_layers)]
        self.encoder_norm = LayerNorm(d)
        self.to_latent = Linear(d, config.z_dim, rng)
        self.start_token = Parameter(np.zeros(config.pose_dim))
        self.pose_in = Linear(config.pose_dim, d, rng)
        self.latent_in = Linear(config.z_dim, d, rng)
        self.decoder_layers = [DecoderLayer(config, rng) for _ in range(config.n_dec_layers)]
        self.decoder_norm = LayerNorm(d)
        self.head = MDNHead(d, config.n_components, config.pose_dim, config.init_sigma, rng)

    def encode_all(self, tokens: np.ndarray) -> Tensor:
        tokens = self._check_tokens(tokens)
        t = tokens.shape[1]
        x = self.token_in(Tensor(tokens)) + sinusoidal_encoding(t, self.config.d_model)
        mask = causal_mask(t)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return self.to_latent(self.encoder_norm(x))

    def decode_inputs(self, z: Tensor, prefix: np.ndarray) -> MixtureParams:
        b = z.shape[0]
        inputs = self._start(b)
        if prefix.shape[1] > 0:
            inputs = concat([inputs, Tensor(prefix)], axis=1)
        length = inputs.shape[1]
        x = self.pose_in(inputs) + sinusoidal_encoding(length, self.config.d_model)
        memory = reshape(self.latent_in(z), (b, 1, self.config.d_model))
        mask = causal_mask(length)
        for layer in self.decoder_layers:
            x = layer(x, memory, mask)
        return self.head(self.decoder_norm(x))


class LSTMSeq2Seq(SkillModel):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.encoder_cells = [
            LSTMCell(config.token_dim if i == 0 else d, d, rng) for i in range(config.n_enc_layers)
        ]
        self.to_latent = Linear(d, config.z_dim, rng)
        self.start_token = Parameter(np.zeros(config.pose_dim))
        self.pose_in = Linear(config.pose_dim, d, rng)
        self.latent_in = Linear(config.z_dim, d, rng)
        self.decoder_cells = [LSTMCell(2 * d if i == 0 else d, d, rng) for i in range(config.n_dec_layers)]
        self.head = MDNHead(d, config.n_components, config.pose_dim, config.init_sigma, rng)

    def encode_all(self, tokens: np.ndarray) -> Tensor:
        tokens = self._check_tokens(tokens)
        b, t, _ = tokens.shape
        x = Tensor(tokens)
        hidden = run_lstm(self.encoder_cells, [x[:, i, :] for i in range(t)], b)
        return self.to_latent(stack(hidden, axis=1))

    def decode_inputs(self, z: Tensor, prefix: np.ndarray) -> MixtureParams:
        b = z.shape[0]
        inputs = self._start(b)
        if prefix.shape[1] > 0:
            inputs = concat([inputs, Tensor(prefix)], axis=1)
        embedded = self.pose_in(inputs)
        context = self.latent_in(z)
        steps = [concat([embedded[:, i, :], context], axis=-1) for i in range(inputs.shape[1])]
        hidden = run_lstm(self.decoder_cells, steps, b)
        return self.head(stack(hidden, axis=1))


class BCLSTM(SkillModel):
    """Recurrent behavior cloning over the merged token stream."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.cells = [LSTMCell(config.token_dim if i == 0 else d, d, rng) for i in range(config.n_enc_layers)]
        self.head = MDNHead(d, config.n_components, config.pose_dim, config.init_sigma, rng)

    def encode_all(self, tokens: np.ndarray) -> Tensor:
        raise ContractError("bc_lstm has no exploration encoder")

    def decode_inputs(self, z: Tensor, prefix: np.ndarray) -> MixtureParams:
        raise ContractError("bc_lstm has no skill decoder; use bc_forward")

    def forward(self, history: np.ndarray) -> MixtureParams:
        history = np.asarray(history, dtype=np.float64)
        if history.ndim != 3 or history.shape[-1] != self.config.token_dim or history.shape[1] == 0:
            raise ContractError(f"history must be (B, L>0, {self.config.token_dim}), got {history.shape}")
        x = Tensor(history)
        hidden = run_lstm(self.cells, [x[:, i, :] for i in range(history.shape[1])], history.shape[0])
        return self.head(stack(hidden, axis=1))


ARCHITECTURES = {"transformer": TransformerSeq2Seq, "lstm": LSTMSeq2Seq, "bc_lstm": BCLSTM}


def build_model(config: ModelConfig) -> SkillModel:
    """Instantiate the configured architecture with seeded initialization."""
    model = ARCHITECTURES[config.arch](config, np.random.default_rng(config.seed))
    logger.info(f"Built {config.arch} model with {model.num_parameters()} parameters")
    return model


# ---------------------------------------------------------------------------
# Losses and inference
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Normalized, right-padded training batch."""

    tokens: np.ndarray                   # (B, T, token_dim)
    lengths: np.ndarray                  # (B,)
    poses: np.ndarray                    # (B, M, P)
    mask: np.ndarray                     # (B, M), 1 for valid steps
    hidden: Optional[np.ndarray] = None  # (B, 3)


def _masked_nll(log_prob: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != log_prob.shape:
        raise ContractError(f"mask shape {mask.shape} does not match sequence shape {log_prob.shape}")
    total = float(mask.sum())
    if total <= 0.0:
        raise ContractError("mask selects no valid steps")
    return (log_prob * mask).sum() * (-1.0 / total)


def seq2seq_loss(model: SkillModel, batch: Batch, z: Optional[Tensor] = None) -> Tensor:
    """Mean negative log-likelihood of the teacher-forced skill poses."""
    if z is None:
        z = model.encode(batch.tokens, batch.lengths)
    return _masked_nll(mdn_log_prob(model.decode(z, batch.poses), batch.poses), batch.mask)


def latent_penalty(z: Tensor, hidden: np.ndarray) -> Tensor:
    """Batch mean of the squared distance between z and the normalized hidden pose."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != z.shape:
        raise ContractError(f"hidden shape {hidden.shape} does not match latent shape {z.shape}")
    diff = z - hidden
    return (diff * diff).sum(axis=-1).mean()


def supervised_loss(model: SkillModel, batch: Batch, weight: Optional[float] = None) -> Tensor:
    """Seq2Seq loss plus the weighted latent penalty against the hidden pose."""
    if batch.hidden is None:
        raise ContractError("supervised_loss needs normalized hidden poses in the batch")
    weight = model.config.latent_weight if weight is None else weight
    z = model.encode(batch.tokens, batch.lengths)
    return seq2seq_loss(model, batch, z) + latent_penalty(z, batch.hidden) * weight


def skill_tokens(
    poses: np.ndarray,
    previous_pose: np.ndarray,
    observations: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Raw 12-dim tokens for executed via-points, as the BC-LSTM consumes them.

    Token i pairs the observation after reaching via-point i with the
    displacement from the previous via-point. Without recorded observations
    the wrench and velocity are zero and the pose is the via-point itself.
    """
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    if observations is None:
        observations = np.zeros((len(poses), 9))
        observations[:, 3:6] = poses
    observations = np.asarray(observations, dtype=np.float64).reshape(-1, 9)
    if len(observations) != len(poses):
        raise ContractError(f"{len(observations)} observations for {len(poses)} via-points")
    previous = np.vstack([np.asarray(previous_pose, dtype=np.float64).reshape(1, 3), poses[:-1]])
    return np.concatenate([observations, poses - previous], axis=1)


def bc_forward(model: BCLSTM, history: np.ndarray) -> MixtureParams:
    return model.forward(history)


def bc_loss(model: BCLSTM, history: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean NLL of the next pose after every token of the history."""
    return _masked_nll(mdn_log_prob(bc_forward(model, history), targets), mask)


def generate(
    model: SkillModel,
    tokens: np.ndarray,
    mode: str = "deterministic",
    rng: Optional[np.random.Generator] = None,
    lengths: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Autoregressively roll out exactly max_M normalized poses per exploration.

    Returns:
        Array of shape (B, max_M, pose_dim)
    """
    with no_grad():
        z = model.encode(tokens, lengths)
        prefix = np.zeros((z.shape[0], 0, model.config.pose_dim))
        for _ in range(model.config.max_M):
            pose = select_pose(model.decode_step(z, prefix), mode, rng)
            prefix = np.concatenate([prefix, pose[:, None, :]], axis=1)
    return prefix


def encode_prefixes(model: SkillModel, tokens: np.ndarray) -> np.ndarray:
    """Latent after each exploration step, (B, T, z_dim), without recording."""
    with no_grad():
        return model.encode_all(tokens).numpy()


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def save_model(model: SkillModel, path: Union[str, Path]) -> Path:
    """Write the checkpoint plus a JSON sidecar holding the model config."""
    path = save_checkpoint(path, model.state_dict())
    sidecar = {
        "model": model.config.model_dump(),
        "latent_supervised": bool(model.latent_supervised),
        "n_parameters": model.num_parameters(),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_model(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> SkillModel:
    """Rebuild a model from checkpoint + sidecar, validating the configuration."""
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise CheckpointError(f"missing config sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        config = ModelConfig.model_validate(meta["model"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise CheckpointError(f"invalid sidecar {meta_path}: {exc}") from exc
    if expected is not None and expected.model_dump(exclude={"seed"}) != config.model_dump(exclude={"seed"}):
        raise CheckpointError(f"checkpoint {path} was trained with a different model config")
    model = build_model(config)
    model.load_state_dict(load_checkpoint(path))
    model.latent_supervised = bool(meta.get("latent_supervised", False))
    return model
