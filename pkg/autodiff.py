"""
Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Every primitive records itself on the calling thread's tape together with its
local gradient rule; ``backward`` replays the reachable part of the tape in
exact reverse construction order and accumulates into ``.grad``.

Also hosts the small amount of ``nn`` plumbing the policies need
(parameters, modules, linear and layer-norm layers), the Adam optimizer,
the binary checkpoint format and a finite-difference gradient checker.
"""

import itertools
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import CheckpointError, ContractError, DomainError, ShapeError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6
CHECKPOINT_VERSION = 1

Axis = Union[None, int, Tuple[int, ...]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of primitive operations for one thread.

    Each recorded output gets a monotonically increasing index; a node can only
    consume nodes with smaller indices, so reverse index order is a valid
    reverse topological order.
    """

    def __init__(self) -> None:
        self._counter = itertools.count()
        self.enabled = True

    def record(self) -> int:
        return next(self._counter)


_local = threading.local()


def current_tape() -> Tape:
    """Return the tape of the calling thread, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on the current thread's tape (inference mode)."""
    tape = current_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._index = -1

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, inputs: Optional[Iterable["Tensor"]] = None) -> None:
        backward(self, inputs)

    # operators -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._index = tape.record()
    return out


def _check_broadcast(a: Tuple[int, ...], b: Tuple[int, ...], op: str) -> None:
    if a == b:
        return
    for small, large in ((a, b), (b, a)):
        if int(np.prod(small)) == 1 and len(small) <= len(large):
            return
        if len(small) < len(large) and tuple(large[len(large) - len(small):]) == small:
            return
    raise ShapeError(f"{op}: shapes {a} and {b} are not leading-batch or scalar compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")

    def _backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), _backward)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)
    exponent = float(exponent)

    def _backward(g):
        return (g * exponent * np.power(x.data, exponent - 1.0),)

    return _result(np.power(x.data, exponent), (x,), _backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError(f"log of non-positive input (min={float(np.min(x.data))!r})")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x) -> Tensor:
    """Tanh approximation of GELU, composed from primitives."""
    x = as_tensor(x)
    inner = (x + 0.044715 * x ** 3.0) * float(np.sqrt(2.0 / np.pi))
    return 0.5 * x * (1.0 + tanh(inner))


# ---------------------------------------------------------------------------
# Reductions and normalizations over the last axis
# ---------------------------------------------------------------------------

def _softmax(data: np.ndarray, axis: int) -> np.ndarray:
    shifted = data - np.max(data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = _softmax(x.data, axis)

    def _backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def _backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), _backward)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    peak = np.max(x.data, axis=axis, keepdims=True)
    total = np.log(np.sum(np.exp(x.data - peak), axis=axis, keepdims=True)) + peak
    out = total if keepdims else np.squeeze(total, axis=axis)

    def _backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * np.exp(x.data - total),)

    return _result(out, (x,), _backward)


def layer_norm(x, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    mu = np.mean(x.data, axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    out = centered * inv_std

    def _backward(g):
        g_mean = np.mean(g, axis=-1, keepdims=True)
        gx_mean = np.mean(g * out, axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - out * gx_mean),)

    return _result(out, (x,), _backward)


def tensor_sum(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), _backward)


def mean(x, axis: Axis = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tensor_sum(x, axis, keepdims) * (1.0 / count)


# ---------------------------------------------------------------------------
# Linear algebra and shape plumbing
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with optional leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] and b.ndim != 2 and a.ndim != 2:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(tuple(shape))
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def _backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _result(x.data[index], (x,), _backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, _backward)


def expand(x, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast to ``shape``; gradient sums back."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from exc
    return _result(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _reachable(root: Tensor) -> List[Tensor]:
    seen = set()
    nodes: List[Tensor] = []
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack_.extend(node._parents)
    return nodes


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Tensors listed in ``inputs`` that the loss does not depend on get a zero
    gradient instead of keeping ``grad=None``.

    Raises:
        ContractError: if ``loss`` is not a single-element tensor
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        _accumulate(loss)
    for leaf in inputs or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def _accumulate(loss: Tensor) -> None:
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(_reachable(loss), key=lambda t: t._index, reverse=True):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


# ---------------------------------------------------------------------------
# Parameters and modules
# ---------------------------------------------------------------------------

class Parameter(Tensor):
    """Leaf tensor owned by a module and updated by the optimizer."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


class Module:
    """Container that discovers parameters on its attributes, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise CheckpointError(
                f"parameter names differ (missing={sorted(missing)}, unexpected={sorted(unexpected)})"
            )
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()


class Linear(Module):
    """y = x @ W + b with Xavier-uniform W and zero b."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (in_features + out_features))
        self.weight = Parameter(rng.uniform(-limit, limit, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.eps) * self.gain + self.shift


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[List[np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Args:
        params: Current parameter arrays
        grads: Gradients aligned with ``params``; ``None`` means zero
        state: Moments from the previous call (empty on the first call)
        lr: Step size
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard

    Returns:
        New parameter arrays and the new state; inputs are not modified
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    m_prev = state.m or [np.zeros_like(p) for p in params]
    v_prev = state.v or [np.zeros_like(p) for p in params]
    if len(m_prev) != len(params) or len(v_prev) != len(params):
        raise ShapeError("adam_step: optimizer state does not match parameter count")

    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_prev, v_prev):
        g = np.zeros_like(p) if g is None else g
        if g.shape != p.shape or m.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for parameter of shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Adam over a module's parameters, updating them in place."""

    def __init__(self, params: Dict[str, Parameter], lr: float = 3e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 grad_clip: Optional[float] = None):
        self.params = list(params.values())
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """Apply one update and return the pre-clip global gradient norm."""
        grads = [p.grad for p in self.params]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
            grads = [None if g is None else g * scale for g in grads]
        new_params, self.state = adam_step(
            [p.data for p in self.params], grads, self.state,
            self.lr, self.betas[0], self.betas[1], self.eps,
        )
        for p, value in zip(self.params, new_params):
            p.data = value
        return norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize named arrays: header, then name/shape/little-endian float64 per tensor."""
    chunks = [struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())
    return b"".join(chunks)


def parse_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    try:
        version, count = struct.unpack_from("<II", blob, 0)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 8
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, offset)
            offset += 8 * ndim
            n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
            if offset + n_bytes > len(blob):
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=n_bytes // 8, offset=offset) \
                .reshape(shape).astype(np.float64)
            offset += n_bytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint header: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after {count} tensors")
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(tensors))
    logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
    denominator_floor: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values
        params: Tensors to check, by name
        h: Central-difference step
        denominator_floor: Lower bound of the relative-error denominator

    Returns:
        The maximum relative error over every entry of every parameter
    """
    for p in params.values():
        p.zero_grad()
    backward(loss_fn(), params.values())
    worst = 0.0
    with no_grad():
        for name, p in params.items():
            analytic = p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = loss_fn().item()
                flat[i] = original - h
                minus = loss_fn().item()
                flat[i] = original
                numeric = (plus - minus) / (2.0 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), denominator_floor)
                if err > worst:
                    worst = err
                    logger.debug(f"gradient_check: {name}[{i}] analytic={a:.6e} numeric={numeric:.6e}")
    return worst
