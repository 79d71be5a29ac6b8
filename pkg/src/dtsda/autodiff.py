"""Minimal reverse-mode differentiation on float64 numpy arrays.

Only the layer set needed by the temporal-state networks is provided:
linear, conv1d, batchnorm1d, relu, maxpool1d, softmax cross-entropy and
gradient reversal, plus a handful of glue ops (add, sum, reshape, rows).

Operations are recorded on a per-thread tape (:class:`Graph`) whenever at
least one input requires a gradient. :func:`backward` walks the tape in
reverse recording order and clears it.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Value",
    "Parameter",
    "Graph",
    "BatchNormState",
    "OptimizerState",
    "current_graph",
    "no_grad",
    "as_value",
    "linear",
    "conv1d",
    "batchnorm1d",
    "relu",
    "maxpool1d",
    "softmax",
    "softmax_cross_entropy",
    "gradient_reversal",
    "add",
    "mul",
    "total",
    "reshape",
    "flatten",
    "take_rows",
    "concat_rows",
    "backward",
    "optimizer_step",
]


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up at an op boundary."""


_ids = itertools.count()


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {where}")


class Value:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Value construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool, op: str) -> "Value":
        _check_finite(data, op)
        v = cls.__new__(cls)
        v.data = data
        v.grad = None
        v.requires_grad = requires_grad
        v.node_id = next(_ids)
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __add__(self, other):
        return add(self, as_value(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, as_value(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Value):
    """A trainable leaf with a dotted name, e.g. ``feature_extractor.conv1.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


@dataclass
class _Op:
    inputs: tuple[Value, ...]
    output: Value
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Tape of recorded operations, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, inputs: Sequence[Value], output: Value, backward_fn) -> Value:
        if self.enabled and output.requires_grad:
            self.ops.append(_Op(tuple(inputs), output, backward_fn))
        return output

    def clear(self) -> None:
        self.ops.clear()

    def backward(self, loss: Value, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != loss.shape:
                raise ValueError("upstream gradient shape mismatch")
        loss.grad = grad.copy() if loss.grad is None else loss.grad + grad
        seen: set[int] = set()
        for op in reversed(self.ops):
            out = op.output
            # recording order is a topological order, so each output is finalised here
            assert out.node_id not in seen, "graph cycle"
            seen.add(out.node_id)
            if out.grad is None:
                continue
            grads = op.backward(out.grad)
            for inp, g in zip(op.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                _check_finite(g, "backward")
                if inp.grad is None:
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = inp.grad + g
        self.clear()


_local = threading.local()


def current_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


@contextlib.contextmanager
def no_grad():
    """Disable recording on this thread's tape."""
    g = current_graph()
    prev = g.enabled
    g.enabled = False
    try:
        yield
    finally:
        g.enabled = prev


def _rg(*values: Value) -> bool:
    return current_graph().enabled and any(v.requires_grad for v in values)


def _emit(inputs, data, op, backward_fn) -> Value:
    out = Value._from_op(data, _rg(*inputs), op)
    return current_graph().record(inputs, out, backward_fn)


def backward(loss: Value, graph: Graph | None = None, grad=None) -> None:
    """Accumulate gradients of ``loss`` into every reachable ``requires_grad`` value."""
    (graph or current_graph()).backward(loss, grad)


# --------------------------------------------------------------------------
# glue ops


def add(a: Value, b: Value) -> Value:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit((a, b), a.data + b.data, "add", bw)


def mul(a: Value, b: Value) -> Value:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit((a, b), a.data * b.data, "mul", bw)


def total(x: Value) -> Value:
    """Sum of all entries, as a 0-d Value."""
    return _emit((x,), np.asarray(x.data.sum()), "sum", lambda g: (np.broadcast_to(g, x.shape),))


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    return _emit((x,), x.data.reshape(shape), "reshape", lambda g: (g.reshape(x.shape),))


def flatten(x: Value) -> Value:
    return reshape(x, (x.shape[0], -1))


def take_rows(x: Value, idx) -> Value:
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _emit((x,), x.data[idx], "take_rows", bw)


def concat_rows(*xs: Value) -> Value:
    cuts = np.cumsum([x.shape[0] for x in xs])[:-1]
    return _emit(xs, np.concatenate([x.data for x in xs]), "concat_rows", lambda g: tuple(np.split(g, cuts)))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# layers


def linear(x: Value, weight: Value, bias: Value) -> Value:
    """``y[b, o] = sum_i x[b, i] * weight[o, i] + bias[o]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _emit((x, weight, bias), x.data @ weight.data.T + bias.data, "linear", bw)


def conv1d(x: Value, kernels: Value, bias: Value, stride: int = 1, padding: int = 0) -> Value:
    """Cross-correlation over the last (time) axis.

    Parameters
    ----------
    x : Value
        ``[batch, C_in, L]``.
    kernels : Value
        ``[C_out, C_in, K]``.
    bias : Value
        ``[C_out]``.
    stride, padding : int
        Zero padding is applied symmetrically.

    Returns
    -------
    Value
        ``[batch, C_out, (L + 2*padding - K) // stride + 1]``.
    """
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    if padding < 0:
        raise ValueError("conv1d: padding must be >= 0")
    B, C, L = x.shape
    O, Ck, K = kernels.shape
    if C != Ck:
        raise ValueError(f"conv1d: input has {C} channels, kernels expect {Ck}")
    Lp = L + 2 * padding
    if Lp < K:
        raise ValueError(f"conv1d: kernel length {K} exceeds padded input length {Lp}")
    Lo = (Lp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    # cols[b, l, c, k] = xp[b, c, l*stride + k]
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride]
    cols = win.transpose(0, 2, 1, 3).reshape(B * Lo, C * K)
    w2 = kernels.data.reshape(O, C * K)
    out = (cols @ w2.T).reshape(B, Lo, O).transpose(0, 2, 1) + bias.data[None, :, None]

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lo, O)
        dw = (g2.T @ cols).reshape(O, C, K)
        db = g.sum(axis=(0, 2))
        dcols = (g2 @ w2).reshape(B, Lo, C, K)
        dxp = np.zeros((B, C, Lp))
        for k in range(K):
            dxp[:, :, k : k + stride * (Lo - 1) + 1 : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
        dx = dxp[:, :, padding : padding + L] if padding else dxp
        return dx, dw, db

    return _emit((x, kernels, bias), np.ascontiguousarray(out), "conv1d", bw)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(num_features), np.ones(num_features), momentum, eps)


def batchnorm1d(
    x: Value,
    gamma: Value,
    beta: Value,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
) -> Value:
    """Per-channel normalisation of ``[B, F]`` or ``[B, C, L]`` input.

    In train mode the biased batch variance normalises the input and the
    running statistics move by ``momentum`` towards the batch mean and the
    unbiased batch variance. ``update_stats=False`` keeps batch statistics
    but leaves the running state alone.
    """
    if x.data.ndim not in (2, 3):
        raise ValueError("batchnorm1d expects [B, F] or [B, C, L] input")
    axes = (0,) if x.data.ndim == 2 else (0, 2)
    shape = (1, -1) if x.data.ndim == 2 else (1, -1, 1)
    n = x.data.size // x.shape[1]
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm1d: train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)
            _check_finite(state.running_var, "batchnorm running stats")
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if mode == "eval":
            dx = dxhat * inv.reshape(shape)
        else:
            dx = (inv.reshape(shape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
            )
        return dx, dgamma, dbeta

    return _emit((x, gamma, beta), out, "batchnorm1d", bw)


def relu(x: Value) -> Value:
    mask = x.data > 0
    return _emit((x,), np.where(mask, x.data, 0.0), "relu", lambda g: (g * mask,))


def maxpool1d(x: Value, k: int, stride: int | None = None) -> Value:
    """Windowed max over time; ties send the gradient to the earliest index."""
    stride = k if stride is None else stride
    if stride < 1:
        raise ValueError("maxpool1d: stride must be >= 1")
    B, C, L = x.shape
    if k > L:
        raise ValueError(f"maxpool1d: window {k} longer than input {L}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=2)[:, :, ::stride]
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    Lo = out.shape[2]

    def bw(g):
        dx = np.zeros_like(x.data)
        for j in range(k):
            dx[:, :, j : j + stride * (Lo - 1) + 1 : stride] += np.where(arg == j, g, 0.0)
        return (dx,)

    return _emit((x,), np.ascontiguousarray(out), "maxpool1d", bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row softmax of a plain array (no recording)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Value, targets) -> Value:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    t = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ValueError("softmax_cross_entropy expects [batch, K] logits")
    B, K = logits.shape
    if B == 0 or t.size == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    if t.shape != (B,):
        raise ValueError(f"targets shape {t.shape} does not match batch {B}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if t.min() < 0 or t.max() >= K:
        raise ValueError(f"target out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.mean(lse - z[rows, t])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / B),)

    return _emit((logits,), np.asarray(loss), "softmax_cross_entropy", bw)


def gradient_reversal(x: Value, lam: float) -> Value:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    if lam < 0:
        raise ValueError("gradient_reversal: lambda must be non-negative")
    return _emit((x,), x.data, "gradient_reversal", lambda g: (-lam * g,))


# --------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerState:
    """Adaptive-moment (or plain SGD) state keyed by parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    method: str = "adam"
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer method {self.method!r}")


def optimizer_step(params: Iterable[Parameter], state: OptimizerState) -> None:
    """Update ``params`` in place from their ``.grad``."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.grad is None:
            raise ValueError(f"missing gradient for {p.name}")
    state.step += 1
    lr = state.learning_rate
    for p in params:
        g = p.grad
        if state.method == "sgd":
            new = p.data - lr * g
        else:
            m = state.m.get(p.name)
            if m is None:
                m = np.zeros_like(p.data)
                state.v[p.name] = np.zeros_like(p.data)
            if m.shape != p.shape:
                raise ValueError(f"optimizer buffer shape mismatch for {p.name}")
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * state.v[p.name] + (1 - state.beta2) * g * g
            state.m[p.name], state.v[p.name] = m, v
            mhat = m / (1 - state.beta1**state.step)
            vhat = v / (1 - state.beta2**state.step)
            new = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        _check_finite(new, f"update of {p.name}")
        p.data = new
