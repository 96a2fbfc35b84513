"""Dense tensors with reverse-mode gradients, a tanh MLP, Adam, and a finite-difference oracle.

Everything runs in float64. The autodiff supports exactly the primitives the
training losses need; anything else raises :class:`UnsupportedPrimitiveError`
instead of silently producing a wrong gradient.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    pass


class UnsupportedPrimitiveError(TypeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """Row-major float64 array that records the operations applied to it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = data if type(data) is np.ndarray and data.dtype == DTYPE else np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r}, requires_grad={self.requires_grad})"

    def _make(self, data, parents: tuple["Tensor", ...], op: str, backward) -> "Tensor":
        if not _grad_enabled:
            return Tensor(data, op=op)
        track = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track, _parents=parents if track else (), op=op)
        if track:
            out._backward = backward
        return out

    # -- elementwise binary -------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return self._make(a.data + b.data, (a, b), "add", backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))

        return self._make(a.data - b.data, (a, b), "sub", backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._make(a.data * b.data, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise UnsupportedPrimitiveError("division by a Tensor is not a supported primitive")
        return self * (1.0 / float(other))

    def __rtruediv__(self, other):
        raise UnsupportedPrimitiveError("division by a Tensor is not a supported primitive")

    def __pow__(self, exponent):
        if exponent == 2:
            return self.square()
        raise UnsupportedPrimitiveError(f"power {exponent!r} is not a supported primitive (use square)")

    def __abs__(self):
        raise UnsupportedPrimitiveError("abs is not a supported primitive")

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shapes {self.shape} @ {other.shape} do not agree")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        return self._make(a.data @ b.data, (a, b), "matmul", backward)

    # -- elementwise unary --------------------------------------------------
    def square(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(2.0 * a.data * g)

        return self._make(a.data * a.data, (a,), "square", backward)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def backward(g):
            a._accumulate(g * out_data)

        return self._make(out_data, (a,), "exp", backward)

    def log(self) -> "Tensor":
        a = self

        def backward(g):
            a._accumulate(g / a.data)

        return self._make(np.log(a.data), (a,), "log", backward)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            a._accumulate(g * (1.0 - out_data * out_data))

        return self._make(out_data, (a,), "tanh", backward)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clip to [lo, hi]; gradient is 1 inside the closed range and 0 outside."""
        a = self

        def backward(g):
            inside = (a.data >= lo) & (a.data <= hi)
            a._accumulate(np.where(inside, g, 0.0))

        return self._make(np.minimum(np.maximum(a.data, lo), hi), (a,), "clamp", backward)

    # -- reductions and shape -----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return self._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[ax] for ax in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self

        def backward(g):
            a._accumulate(g.reshape(a.shape))

        return self._make(a.data.reshape(shape), (a,), "reshape", backward)

    def __getitem__(self, index) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

        return self._make(a.data[index], (a,), "getitem", backward)

    # -- backward pass --------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return tensors[0]._make(data, tuple(tensors), "concat", backward)


def grad_of(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``loss_fn`` and return (loss value, gradient per parameter)."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": Tensor.tanh}


class Mlp:
    """Feed-forward net mapping (context, flattened x, t) to 2·H·d Gaussian parameters.

    The first half of the output is the mean, the second half the raw
    log-variance. Time enters as a raw scalar input column.
    """

    def __init__(
        self,
        context_dim: int,
        horizon: int,
        action_dim: int,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        seed: int = 0,
    ):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(_ACTIVATIONS)}")
        self.context_dim = context_dim
        self.horizon = horizon
        self.action_dim = action_dim
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.widths = (context_dim + horizon * action_dim + 1, *self.hidden, 2 * horizon * action_dim)
        rng = np.random.default_rng(seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True))

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return (self.horizon, self.action_dim)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"layer{i}.weight", w), (f"layer{i}.bias", b)]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            if arrays[name].shape != p.shape:
                raise ShapeError(f"parameter {name!r}: expected {p.shape}, got {arrays[name].shape}")
            p.data = np.array(arrays[name], dtype=DTYPE, copy=True)

    def forward(self, context, x, t) -> Tensor:
        return mlp_forward(self, context, x, t)


def _batch_arrays(context, x, t, horizon: int, action_dim: int, context_dim: int):
    context = context.data if isinstance(context, Tensor) else np.asarray(context, dtype=DTYPE)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    if context.ndim == 1:
        context = context.reshape(1, -1)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if context.ndim != 2 or context.shape[1] != context_dim:
        raise ShapeError(f"context shape {context.shape} does not match context_dim={context_dim}")
    if x.ndim != 3 or x.shape[1:] != (horizon, action_dim):
        raise ShapeError(f"x shape {x.shape} does not match chunk ({horizon}, {action_dim})")
    batch = x.shape[0]
    if context.shape[0] != batch:
        raise ShapeError(f"batch mismatch: context {context.shape[0]} vs x {batch}")
    t_arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=DTYPE)
    t_lo, t_hi = (float(t_arr), float(t_arr)) if t_arr.ndim == 0 else (t_arr.min(), t_arr.max())
    if t_lo < 0.0 or t_hi > 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t_lo}..{t_hi}")
    t_col = np.empty((batch, 1))
    t_col[:, 0] = t_arr
    return context, x.reshape(batch, horizon * action_dim), t_col


def mlp_forward(net: Mlp, context, x, t) -> Tensor:
    """Raw Gaussian parameters of shape (B, 2·H·d); 1-D/2-D inputs are treated as a batch of one.

    With gradients disabled this runs on plain arrays, skipping graph bookkeeping.
    """
    if not _grad_enabled:
        return Tensor(_forward_arrays(net, context, x, t))
    track_inputs = isinstance(context, Tensor) and context.requires_grad or isinstance(x, Tensor) and x.requires_grad
    ctx_arr, x_arr, t_col = _batch_arrays(context, x, t, net.horizon, net.action_dim, net.context_dim)
    if track_inputs:
        ctx_t = as_tensor(context).reshape(*ctx_arr.shape)
        x_t = as_tensor(x).reshape(*x_arr.shape)
    else:
        ctx_t, x_t = Tensor(ctx_arr), Tensor(x_arr)
    h = concat([ctx_t, x_t, Tensor(t_col)], axis=1)
    act = _ACTIVATIONS[net.activation]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = act(h)
    return h


def _forward_arrays(net: Mlp, context, x, t) -> np.ndarray:
    ctx_arr, x_arr, t_col = _batch_arrays(context, x, t, net.horizon, net.action_dim, net.context_dim)
    h = np.concatenate([ctx_arr, x_arr, t_col], axis=1)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.data + b.data
        if i < last:
            h = np.tanh(h)
    return h


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Iterable, **kwargs) -> "AdamState":
        shapes = [np.shape(p.data if isinstance(p, Tensor) else p) for p in params]
        return cls(m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kwargs)


def adam_step(params: Sequence, grads: Sequence[np.ndarray], state: AdamState):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``.

    ``params`` may be Tensors or ndarrays; both are updated in place.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        arr = p.data if isinstance(p, Tensor) else p
        if arr.shape != g.shape or m.shape != g.shape:
            raise ShapeError(f"shape mismatch in adam_step: param {arr.shape}, grad {g.shape}, state {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6, relative: bool = False) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``relative=True`` the per-coordinate step is ``h * (1 + |x_i|)``.
    ``x`` is perturbed in place and restored before returning.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * (1.0 + abs(orig)) if relative else h
        flat[i] = orig + step
        f_plus = float(f(x))
        flat[i] = orig - step
        f_minus = float(f(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6):
    """Compare backprop gradients with central differences over every parameter.

    ``loss_fn`` must be deterministic (freeze any noise it draws). Returns
    ``(max relative error, backprop grads, finite-difference grads)``.
    """
    _, bp = grad_of(loss_fn, params)
    fd = []
    with no_grad():
        for p in params:
            fd.append(finite_diff_grad(lambda _x: float(loss_fn().data), p.data, h=h, relative=True))
    err = max(max_relative_error(g, f) for g, f in zip(bp, fd))
    return err, bp, fd
