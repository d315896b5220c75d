"""Dense-tensor numeric core with reverse-mode differentiation.

Small tape-style autodiff over numpy arrays, just big enough for a tiny
decoder-only transformer, scalar scoring heads, and PPO/preference losses.
Every op records its parents and a backward closure on the produced
``Tensor``; ``backward(loss)`` replays the closures in reverse insertion
order (insertion order is a valid topological order because parents are
always created before children).

Conventions:
- float32 data by default (parameters, activations); callers may build
  float64 tensors for high-precision checks and the dtype propagates.
- NaN/Inf anywhere is an error state; ops raise ``NumericsError`` when
  ``CHECK_FINITE`` is on (the default).
- Broadcasting is limited to equal shapes, python scalars, and trailing
  row-vector style broadcast (e.g. ``(T, d) + (d,)``).
- Single-threaded per graph; a graph is consumed by one ``backward`` call.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float32

# Finite-value checking after every op. Cheap at this scale; can be switched
# off for throwaway forward passes.
CHECK_FINITE = True

_GRAD_ENABLED = True
_NODE_COUNTER = 0

GELU_C = math.sqrt(2.0 / math.pi)  # tanh-approximation constant


class NumericsError(ArithmeticError):
    """Raised when an op produces NaN/Inf or a PPO ratio degenerates."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus optional gradient bookkeeping.

    ``data`` is always a numpy array; ``grad`` is populated (same shape as
    ``data``) by ``backward`` for every tensor with ``requires_grad`` and for
    intermediates while the tape unwinds.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_nid")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None,
                 op: str = "leaf", parents: tuple = (), backward_fn=None):
        global _NODE_COUNTER
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        _NODE_COUNTER += 1
        self._nid = _NODE_COUNTER

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self.op!r}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by op {op!r}")


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, op)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)
    return Tensor(data, op=op)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} != value shape {t.data.shape} (op {t.op!r})")
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every tensor the scalar ``loss`` depends on.

    The graph is consumable once: closures are released as they run, and a
    second call on the same loss raises.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss._backward is None and loss.parents:
        raise RuntimeError("graph already consumed by a previous backward call")

    # Collect the reachable recorded subgraph, then unwind in reverse
    # insertion order (each node visited exactly once).
    nodes: list[Tensor] = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        if t._backward is not None:
            stack.extend(t.parents)
    nodes.sort(key=lambda t: t._nid, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
        t._backward = None
        t.parents = ()


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    try:
        out = a.data - b.data
    except ValueError as e:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a if isinstance(a, Tensor) else None)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    a_data, b_data = a.data, b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b_data, a_data.shape))
        _accumulate(b, _unbroadcast(g * a_data, b_data.shape))

    return _make(out, "mul", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        _accumulate(a, -g)

    return _make(-a.data, "neg", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        _accumulate(a, g * mask)

    return _make(out, "relu", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    c = x.dtype.type(GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))
    out = 0.5 * x * (1.0 + t)
    # d/dx = 0.5*(1+t) + 0.5*x*(1-t^2)*c*(1+3k*x^2)
    local = 0.5 * (1.0 + t) + (0.5 * c) * x * (1.0 - t * t) * (1.0 + 3.0 * k * x2)

    def bwd(g):
        _accumulate(a, g * local)

    return _make(out, "gelu", (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def bwd(g):
        _accumulate(a, g * out * (1.0 - out))

    return _make(out, "sigmoid", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1.0 - out ** 2))

    return _make(out, "tanh", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        _accumulate(a, g * out)

    return _make(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    a_data = a.data

    def bwd(g):
        _accumulate(a, g / a_data)

    return _make(out, "log", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    x = a.data
    out = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def bwd(g):
        _accumulate(a, g * sig)

    return _make(out, "softplus", (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the range."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accumulate(a, g * mask)

    return _make(out, "clip", (a,), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; gradient routes to the smaller operand (ties -> a)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"minimum: shapes {a.shape} and {b.shape} must match")
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        _accumulate(a, g * take_a)
        _accumulate(b, g * (~take_a))

    return _make(out, "minimum", (a, b), bwd)


_ELEMENTWISE = {"add": add, "mul": mul, "relu": relu, "gelu": gelu,
                "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, shape).astype(a.data.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, shape).astype(a.data.dtype))

    return _make(np.asarray(out), "sum", (a,), bwd)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / n, shape).astype(a.data.dtype))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg / n, shape).astype(a.data.dtype))

    return _make(np.asarray(out), "mean", (a,), bwd)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {a.shape}")

    def bwd(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), "transpose", (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[:, start:stop].copy()
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _make(out, "slice_cols", (a,), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, off:off + w])
            off += w

    return _make(out, "concat_cols", tuple(parts), bwd)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather (used for embeddings and row selection); scatter-add backward."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("take_rows expects a 1-d index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise IndexError(f"row index out of range for {a.data.shape[0]} rows")
    out = a.data[idx].copy()
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(out, "take_rows", (a,), bwd)


# ---------------------------------------------------------------------------
# matmul and fused ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d tensors, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        _accumulate(a, g @ b_data.T)
        _accumulate(b, a_data.T @ g)

    return _make(out, "matmul", (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make(out, "softmax", (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm over the last axis, with affine gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    g_data = gain.data

    def bwd(g):
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        gh = g * g_data
        # standard layernorm backward over the last axis
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, dx.astype(x.data.dtype))

    return _make(out, "layer_norm", (x, gain, bias), bwd)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for rank-1 logits, max-stabilized."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ValueError(f"softmax_cross_entropy expects rank-1 logits, got shape {logits.shape}")
    v = logits.data.shape[0]
    target = int(target)
    if not 0 <= target < v:
        raise IndexError(f"target {target} out of range for vocab {v}")
    x = logits.data.astype(np.float64)
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.asarray(lse - x[target], dtype=logits.data.dtype)
    probs = np.exp(x - lse)

    def bwd(g):
        grad = probs.copy()
        grad[target] -= 1.0
        _accumulate(logits, (g * grad).astype(logits.data.dtype))

    return _make(out, "softmax_cross_entropy", (logits,), bwd)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[target]; logits (T, V), targets (T,)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_rows expects rank-2 logits, got shape {logits.shape}")
    t_count, v = logits.data.shape
    targets = np.asarray(targets, dtype=np.intp)
    if targets.shape != (t_count,):
        raise ValueError(f"targets shape {targets.shape} != ({t_count},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range for vocab {v}")
    x = logits.data.astype(np.float64)
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(t_count)
    out = (lse - x[rows, targets]).astype(logits.data.dtype)
    probs = np.exp(x - lse[:, None])

    def bwd(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        _accumulate(logits, (g[:, None] * grad).astype(logits.data.dtype))

    return _make(out, "cross_entropy_rows", (logits,), bwd)


def log_softmax_pick(logits: Tensor, ids) -> Tensor:
    """Row-wise log softmax evaluated at chosen ids; logits (T, V) -> (T,)."""
    ce = cross_entropy_rows(logits, ids)
    return neg(ce)
