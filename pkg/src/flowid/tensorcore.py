"""Dense float32 tensors with reverse-mode autodiff, an Adam optimizer, and a
binary checkpoint container.

Everything downstream (velocity network, probes, codecs) runs on this engine.
Arrays are numpy float32 throughout; scalar loss reductions accumulate in
float64 so finite-difference gradient checks stay stable. Broadcasting is
numpy's right-aligned (trailing-axis) rule only; callers reshape explicitly
for anything else.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

# Names of the differentiable graph ops exported by this module. The gradcheck
# suite iterates this tuple, so new ops must land here with a test case.
GRAD_OPS = (
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "embedding",
    "softmax",
    "layernorm",
    "gelu",
    "mean",
    "tsum",
    "mse",
    "cross_entropy",
    "bce_logits",
)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float32 array plus an optional reverse-mode differentiation edge."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; full definitions live at module level
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite values in output")
    t = Tensor(out)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(np.float32, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not trailing-broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", out, (a, b), backward)


# ---------------------------------------------------------------------------
# matmul and shape ops


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims of {a.shape} and {b.shape} do not match")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dims of {a.shape} and {b.shape} do not match")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                ga = a.data.reshape(-1, a.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                _accum(b, ga.T @ gg)
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _result("matmul", out, (a, b), backward)


def reshape(x, shape) -> Tensor:
    x = _t(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _result("reshape", out, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _t(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return _result("transpose", out, (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_t(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _result("concat", out, tensors, backward)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = _t(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = x.data[sl]

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _result("narrow", out, (x,), backward)


def embedding(table, ids: np.ndarray) -> Tensor:
    table = _t(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
            _accum(table, full)

    return _result("embedding", out, (table,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(x, y * (g - inner))

    return _result("softmax", y, (x,), backward)


def layernorm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; no learned affine (apply mul/add outside)."""
    x = _t(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        n = x.shape[-1]
        gy = g * inv
        _accum(
            x,
            gy
            - gy.mean(axis=-1, keepdims=True)
            - y * (gy * y).sum(axis=-1, keepdims=True) / n,
        )

    return _result("layernorm", y, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    x = _t(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)
    y = 0.5 * x.data * (1.0 + th)

    def backward(g):
        sech2 = 1.0 - th * th
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * x.data * sech2 * du))

    return _result("gelu", y, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and losses (float64 accumulators)


def mean(x, axis: int | None = None) -> Tensor:
    x = _t(x)
    if axis is None:
        out = np.float32(x.data.mean(dtype=np.float64))
        n = x.size

        def backward(g):
            _accum(x, np.full(x.shape, float(g) / n, dtype=np.float32))

        return _result("mean", out, (x,), backward)

    n = x.shape[axis]
    out = x.data.mean(axis=axis, dtype=np.float64).astype(np.float32)

    def backward(g):
        _accum(x, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return _result("mean", out, (x,), backward)


def tsum(x) -> Tensor:
    x = _t(x)
    out = np.float32(x.data.sum(dtype=np.float64))

    def backward(g):
        _accum(x, np.full(x.shape, float(g), dtype=np.float32))

    return _result("tsum", out, (x,), backward)


def mse(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.data - b.data
    out = np.float32(np.mean(d.astype(np.float64) ** 2))
    n = max(a.size, 1)

    def backward(g):
        scale = 2.0 * float(g) / n
        _accum(a, scale * d)
        _accum(b, -scale * d)

    return _result("mse", out, (a, b), backward)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids of shape (N,)."""
    logits = _t(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: expected (N, C) logits and (N,) labels, got {logits.shape} and {labels.shape}")
    n, _ = logits.shape
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    lse = np.log(e.sum(axis=1, dtype=np.float64)) + logits.data.max(axis=1)
    nll = lse - logits.data[np.arange(n), labels]
    out = np.float32(nll.mean(dtype=np.float64))

    def backward(g):
        gl = probs.copy()
        gl[np.arange(n), labels] -= 1.0
        _accum(logits, gl * (float(g) / n))

    return _result("cross_entropy", out, (logits,), backward)


def bce_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits; targets in [0, 1], same shape."""
    logits = _t(logits)
    targets = np.asarray(targets, dtype=np.float32)
    if logits.shape != targets.shape:
        raise ValueError(f"bce_logits: shapes {logits.shape} and {targets.shape} differ")
    x = logits.data
    loss = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out = np.float32(loss.mean(dtype=np.float64))
    n = max(logits.size, 1)

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(logits, (sig - targets) * (float(g) / n))

    return _result("bce_logits", out, (logits,), backward)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss.

    Repeated calls without zeroing accumulate, which is how gradient
    accumulation across micro-batches works.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return  # constant loss: nothing reachable requires grad

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected Adam state; moment buffers allocate lazily per parameter."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> dict[str, Tensor]:
    """One Adam update from the accumulated grads. Grads are left untouched."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter '{name}' has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - np.float32(state.lr) * mhat / (np.sqrt(vhat) + np.float32(state.eps_hat))
    return params


# ---------------------------------------------------------------------------
# checkpoint container: magic "FWTC", u32 version, u32 count, then per tensor
# u32 name length, UTF-8 name, u32 rank, u64 extents, raw little-endian f32.

_MAGIC = b"FWTC"
_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write named float32 arrays; names are sorted so output bytes are stable."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a FWTC checkpoint")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * n)
            out[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        return out
