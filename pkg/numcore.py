#!/usr/bin/env python3
"""
numcore.py - Numeric Core for PaCo Lab

Substrate every other module builds on:
- Dense float64 tensors with tape-based reverse-mode differentiation
- A fixed tanh MLP (affine -> tanh, repeated, final affine)
- Adam with bias correction
- Counter-based random streams (Philox) that split without shared state
- Binary checkpoints (JSON header + little-endian float64 payload)
- The PaCo Lab exception hierarchy

Tensors are immutable after creation. Operations record onto the active
Tape only when one of their inputs requires a gradient; outside a Tape
everything runs as plain numpy arithmetic (sampling, evaluation).

Version: 1.0.0
"""

import json
import logging
import struct
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# ============================================================================
# ERRORS
# ============================================================================

class LabError(Exception):
    """Base class for every error raised by PaCo Lab"""


class DimensionError(LabError, ValueError):
    """Shapes do not chain (names the offending layer or operation)"""


class NonFiniteError(LabError, ValueError):
    """A NaN or infinity reached a place that requires finite numbers"""

    def __init__(self, message: str, name: Optional[str] = None, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.name = name
        self.diagnostics = diagnostics or {}


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss"""


class ResolutionError(LabError, ValueError):
    """Signal resolution too small to resolve the requested band"""


class DomainError(LabError, ValueError):
    """Input outside the mathematical domain of an operation"""


class DataError(LabError, ValueError):
    """Malformed or missing dataset / checkpoint content"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class ConfigError(LabError, ValueError):
    """Invalid experiment configuration"""


class ChannelError(LabError, RuntimeError):
    """A reward channel failed while scoring samples"""

    def __init__(self, channel: str, cause: Exception):
        super().__init__(f"reward channel '{channel}' failed: {cause}")
        self.channel = channel
        self.cause = cause


# ============================================================================
# TENSOR & TAPE
# ============================================================================

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("paco_active_tape", default=None)


class Tensor:
    """
    Dense float64 array with an optional gradient.

    `data` holds the values (row-major), `grad` is populated by backward()
    for tensors that require a gradient and has the same shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_tape")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.name = None
        t._parents = ()
        t._vjp = None
        t._tape = None
        return t

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """
    Records tracked operations in creation order.

        with Tape():
            loss = ...
        backward(loss)
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        return False


def as_tensor(value: Union[Tensor, np.ndarray, float, Sequence]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradients"""
    return Tensor(data, requires_grad=True, name=name)


def _result(arr: np.ndarray, parents: Tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor._wrap(arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if shape != a.shape and shape != b.shape:
        raise DimensionError(f"{op}: broadcasting {a.shape} with {b.shape} would grow both operands")


# ============================================================================
# OPERATIONS (closed set)
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor, where: str = "matmul") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"{where}: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tsum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _result(np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    return _result(out, tensors, vjp)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def clip(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: shapes {a.shape} and {b.shape} differ")
    first = a.data <= b.data
    return _result(np.where(first, a.data, b.data), (a, b),
                   lambda g: (g * first, g * ~first))


def log_softmax_pick(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row log-softmax evaluated at the target column: log p(target_i | row_i)"""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"log_softmax_pick: logits {logits.shape} vs targets {targets.shape}")
    rows = np.arange(logits.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    out = shifted[rows, targets] - lse

    def vjp(g):
        probs = np.exp(shifted - lse[:, None])
        grad = -probs * g[:, None]
        grad[rows, targets] += g
        return (grad,)
    return _result(out, (logits,), vjp)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax on plain arrays (inference only)"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ============================================================================
# BACKWARD
# ============================================================================

def backward(loss: Tensor, params: Optional[Dict[str, Tensor]] = None) -> None:
    """
    Assign d(loss)/d(tensor) to every tracked tensor on the loss's tape.

    When `params` is given those leaves are reset to zero first, so a
    parameter the loss does not depend on ends up with a zero gradient.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params:
        for p in params.values():
            p.grad = np.zeros_like(p.data)
    tape = loss._tape
    if tape is None:
        raise LabError("loss was not produced by tracked operations (no active Tape or no parameters)")

    stop = None
    reset = set()
    for i, node in enumerate(tape.nodes):
        node.grad = np.zeros_like(node.data)
        for parent in node._parents:
            if parent.requires_grad and parent._tape is None and id(parent) not in reset:
                parent.grad = np.zeros_like(parent.data)
                reset.add(id(parent))
        if node is loss:
            stop = i
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes[: stop + 1]):
        g = node.grad
        if not g.any():
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if parent.requires_grad and pg is not None:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + pg


def gradients(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}


# ============================================================================
# MLP
# ============================================================================

def _layer_ids(params: Dict[str, Tensor]) -> List[int]:
    ids = sorted(int(k[1:]) for k in params if k.startswith("W") and k[1:].isdigit())
    if not ids:
        raise DimensionError("MLP parameters contain no weight matrices (expected W0, W1, ...)")
    return ids


def mlp_layer_sizes(params: Dict[str, Tensor]) -> List[int]:
    ids = _layer_ids(params)
    return [params[f"W{ids[0]}"].shape[0]] + [params[f"W{i}"].shape[1] for i in ids]


def forward_mlp(params: Dict[str, Tensor], x: Tensor) -> Tensor:
    """affine -> tanh, repeated, then a final affine layer (no activation)"""
    x = as_tensor(x)
    flat = x.data.ndim == 1
    h = reshape(x, (1, x.shape[0])) if flat else x
    ids = _layer_ids(params)
    for pos, i in enumerate(ids):
        w = params[f"W{i}"]
        if w.data.ndim != 2 or h.shape[1] != w.shape[0]:
            raise DimensionError(
                f"layer {i} (W{i}): expects input width {w.shape[0] if w.data.ndim == 2 else '?'}, "
                f"got {h.shape[1]}"
            )
        h = matmul(h, w, where=f"layer {i}")
        b = params.get(f"b{i}")
        if b is not None:
            if b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i} (b{i}): bias shape {b.shape}, expected ({w.shape[1]},)")
            h = add(h, b)
        if pos < len(ids) - 1:
            h = tanh(h)
    return reshape(h, (h.shape[1],)) if flat else h


def init_mlp(layer_sizes: Sequence[int], stream: "RngStream", out_scale: float = 1.0) -> Dict[str, Tensor]:
    """Gaussian weights with variance 1/fan_in, zero biases; last layer scaled by out_scale"""
    if len(layer_sizes) < 2 or any(int(s) <= 0 for s in layer_sizes):
        raise DimensionError(f"invalid layer sizes {list(layer_sizes)}")
    params: Dict[str, Tensor] = {}
    last = len(layer_sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        w = gaussian(stream, (fan_in, fan_out)).data / np.sqrt(fan_in)
        if i == last:
            w = w * out_scale
        params[f"W{i}"] = parameter(w, name=f"W{i}")
        params[f"b{i}"] = parameter(np.zeros(fan_out), name=f"b{i}")
    return params


def copy_params(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    return {name: parameter(p.data.copy(), name=name) for name, p in params.items()}


# ============================================================================
# ADAM
# ============================================================================

@dataclass
class AdamState:
    """First/second moments per parameter name plus the step count"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[Dict[str, Tensor], AdamState]:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'", name=name)

    beta1, beta2 = betas
    step = state.step + 1
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m_prev = state.m.get(name, np.zeros_like(p.data))
        v_prev = state.v.get(name, np.zeros_like(p.data))
        if m_prev.shape != p.shape or v_prev.shape != p.shape or g.shape != p.shape:
            raise DimensionError(f"adam: state for '{name}' is shaped {m_prev.shape}, parameter is {p.shape}")
        m = beta1 * m_prev + (1.0 - beta1) * g
        v = beta2 * v_prev + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return params, AdamState(step=step, m=new_m, v=new_v)


# ============================================================================
# RANDOM STREAMS
# ============================================================================

_U64 = 1 << 64


@dataclass
class RngStream:
    """
    Counter-based stream: (seed, stream_id) is the Philox key, counter the
    block position. Equal (seed, stream_id) always replays the same draws.
    """
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        for label in ("seed", "stream_id"):
            value = getattr(self, label)
            if not 0 <= int(value) < _U64:
                raise ValueError(f"{label} must be an unsigned 64-bit integer, got {value}")
            setattr(self, label, int(value))

    def child(self, *path: int) -> "RngStream":
        """Deterministic sub-stream; distinct paths give distinct stream ids"""
        seq = np.random.SeedSequence(entropy=[self.seed, self.stream_id, *[int(p) for p in path]])
        sid = int(seq.generate_state(1, dtype=np.uint64)[0])
        return RngStream(seed=self.seed, stream_id=sid, counter=0)

    def _draw(self, fn: Callable[[np.random.Generator], np.ndarray]) -> np.ndarray:
        bitgen = np.random.Philox(key=self.seed | (self.stream_id << 64), counter=self.counter)
        out = fn(np.random.Generator(bitgen))
        words = bitgen.state["state"]["counter"]
        self.counter = sum(int(w) << (64 * i) for i, w in enumerate(words))
        return out


def gaussian(stream: RngStream, shape: Union[int, Tuple[int, ...]]) -> Tensor:
    """i.i.d. standard normal draws; advances the stream's counter"""
    return Tensor._wrap(stream._draw(lambda g: g.standard_normal(shape)))


def uniform(stream: RngStream, shape: Union[int, Tuple[int, ...]], low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return stream._draw(lambda g: g.uniform(low, high, shape))


def permutation(stream: RngStream, n: int) -> np.ndarray:
    return stream._draw(lambda g: g.permutation(n))


def integers(stream: RngStream, high: int, size: Union[int, Tuple[int, ...]]) -> np.ndarray:
    """Uniform integers in [0, high)"""
    return stream._draw(lambda g: g.integers(0, high, size=size))


# ============================================================================
# CHECKPOINTS
# ============================================================================

CHECKPOINT_MAGIC = b"PACOLAB\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], params: Dict[str, Tensor], meta: Optional[Dict] = None) -> Path:
    """
    Layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header
    {"format_version", "meta", "tensors": [{"name", "shape"}]}, then each
    tensor's values as little-endian float64 in header order.
    """
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [{"name": name, "shape": list(p.shape)} for name, p in params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Tensor], Dict]:
    path = Path(path)
    if not path.exists():
        raise DataError("checkpoint not found", path=str(path))
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError("not a PaCo Lab checkpoint (bad magic)", path=str(path))
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"corrupt checkpoint header: {e}", path=str(path)) from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')}", path=str(path))

    offset = 16 + header_len
    params: Dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset: offset + 8 * count]
        if len(chunk) != 8 * count:
            raise DataError(f"truncated payload for tensor '{entry['name']}'", path=str(path))
        values = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        params[entry["name"]] = parameter(values, name=entry["name"])
        offset += 8 * count
    if offset != len(raw):
        raise DataError(f"{len(raw) - offset} trailing bytes after payload", path=str(path))
    return params, header.get("meta", {})


# ============================================================================
# DEMO
# ============================================================================

if __name__ == "__main__":
    stream = RngStream(seed=7)
    net = init_mlp([3, 8, 1], stream)
    x = gaussian(stream, (5, 3))
    with Tape():
        loss = mean(square(forward_mlp(net, x)))
    backward(loss, net)
    print(f"✓ loss={loss.item():.6f}")
    for name, p in net.items():
        print(f"  {name}: shape={p.shape} |grad|={np.abs(p.grad).max():.3e}")
