"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the two tracking networks are provided:
elementwise arithmetic, a handful of activations, per-cell dense layers
(1x1 convolutions), coordinate channels, batch normalization, GRU cells
and an Adam optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the computation graph.

    ``data`` holds the forward value, ``grad`` the accumulated adjoint
    after :meth:`backward`.  Leaves created with ``requires_grad=True``
    are parameters or inputs we want gradients for.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add ``g`` to the gradient; ``owned`` arrays may be adopted as the buffer."""
        if self.grad is None:
            # adding +0.0 also turns any -0.0 into +0.0
            if owned and g.dtype == np.float64 and g.shape == self.data.shape and g.flags.writeable:
                g += 0.0
                self.grad = g
            else:
                self.grad = np.add(g, 0.0, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate adjoints from this node to every ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, op, backward) -> Tensor:
    out = Tensor(data, parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out_data / b.data, b.shape))

    return _make(out_data, (a, b), "div", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(a.data**exponent, (a,), f"pow{exponent}", backward)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), "exp", lambda g: a._accumulate(g * out_data))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), "log", lambda g: a._accumulate(g / a.data))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), "sqrt", lambda g: a._accumulate(g * 0.5 / out_data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: a._accumulate(g * inside))


def maximum(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    above = a.data >= floor
    return _make(np.maximum(a.data, floor), (a,), "maximum", lambda g: a._accumulate(g * above))


# -- activations --------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), "relu", lambda g: a._accumulate(g * positive, owned=True))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), "sigmoid", lambda g: a._accumulate(g * s * (1.0 - s)))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), "tanh", lambda g: a._accumulate(g * (1.0 - t * t)))


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out_data, (a,), "softplus", lambda g: a._accumulate(g * _sigmoid(x)))


ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus, "tanh": tanh}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


# -- reductions and shape manipulation ---------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def take(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    key = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in key)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.data[index], (a,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tuple(tensors), "concat", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(as_tensor, tensors)]
    return concat(expanded, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a 2-D weight matrix and ``a`` is (..., k)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, b.shape[1]))

    return _make(a.data @ b.data, (a, b), "matmul", backward)


# -- layers -------------------------------------------------------------------
def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-cell dense map over the channel axis of a (..., h, w, c_in) grid."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"input channels {x.shape[-1:]} do not match weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    c_in, c_out = weight.shape

    def backward(g):
        g2 = g.reshape(-1, c_out)
        if x.requires_grad:
            x._accumulate(g @ weight.data.T, owned=True)
        if weight.requires_grad:
            weight._accumulate(x.data.reshape(-1, c_in).T @ g2)
        if bias.requires_grad:
            bias._accumulate(_column_sums(g2))

    out = x.data @ weight.data
    out += bias.data
    return _make(out, (x, weight, bias), "conv1x1", backward)


def coordinate_channels(height: int, width: int) -> np.ndarray:
    """Row and column index planes mapped linearly onto [-1, 1]."""
    rows = np.zeros(height) if height == 1 else 2.0 * np.arange(height) / (height - 1) - 1.0
    cols = np.zeros(width) if width == 1 else 2.0 * np.arange(width) / (width - 1) - 1.0
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr, cc], axis=-1)


def coordconv_augment(x: Tensor) -> Tensor:
    """Append the row and column coordinate channels to a (..., h, w, c) grid."""
    x = as_tensor(x)
    h, w = x.shape[-3], x.shape[-2]
    coords = np.broadcast_to(coordinate_channels(h, w), x.shape[:-1] + (2,))
    return concat([x, Tensor(coords)], axis=-1)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )


def _column_sums(a: np.ndarray) -> np.ndarray:
    # a BLAS product beats ufunc.reduce for tall, narrow arrays
    return np.ones(a.shape[0]) @ a


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize every channel (last axis) over all remaining axes.

    In training mode the batch statistics are part of the graph and the
    running statistics are updated; otherwise the running ones are used.
    """
    x = as_tensor(x)
    gamma, beta = state.gamma, state.beta
    c = x.shape[-1]
    flat = x.data.reshape(-1, c)
    n = flat.shape[0]
    if training:
        mu = _column_sums(flat) / n
        centered = flat - mu
        var = np.einsum("ij,ij->j", centered, centered) / n
        m = state.momentum
        state.running_mean = m * state.running_mean + (1.0 - m) * mu
        state.running_var = m * state.running_var + (1.0 - m) * var
    else:
        mu, var = state.running_mean, state.running_var
        centered = flat - mu
    inv_std = 1.0 / np.sqrt(var + state.eps)

    def backward(g):
        g2 = g.reshape(-1, c)
        g_sum = _column_sums(g2)
        # sum of g * xhat per channel, without forming xhat
        g_xhat = np.einsum("ij,ij->j", g2, centered) * inv_std
        if gamma.requires_grad:
            gamma._accumulate(g_xhat)
        if beta.requires_grad:
            beta._accumulate(g_sum)
        if x.requires_grad:
            scale = gamma.data * inv_std
            dx = g2 * scale
            if training:
                dx -= centered * (scale * inv_std * g_xhat / n)
                dx -= scale * g_sum / n
            x._accumulate(dx.reshape(x.shape), owned=True)

    out = centered * (gamma.data * inv_std)
    out += beta.data
    return _make(out.reshape(x.shape), (x, gamma, beta), "batchnorm", backward)


@dataclass
class GRUParams:
    """Weights of one GRU layer; gates are stacked as (update, reset, candidate)."""

    w: Tensor  # (input_size, 3 * hidden)
    u: Tensor  # (hidden, 3 * hidden)
    b: Tensor  # (3 * hidden,)

    @property
    def hidden_size(self) -> int:
        return self.u.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w, self.u, self.b]


def gru_cell_step(x_t: Tensor, h_prev: Tensor, params: GRUParams) -> Tensor:
    """One GRU update.

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r * h) + b_h), h_t = z * h + (1 - z) * h~.
    """
    n = params.hidden_size
    if x_t.shape[-1] != params.w.shape[0] or h_prev.shape[-1] != n:
        raise ShapeError("GRU input or hidden size does not match parameters")
    wx = matmul(x_t, params.w) + params.b
    uz = matmul(h_prev, params.u[:, : 2 * n])
    z = sigmoid(wx[..., :n] + uz[..., :n])
    r = sigmoid(wx[..., n : 2 * n] + uz[..., n:])
    cand = tanh(wx[..., 2 * n :] + matmul(r * h_prev, params.u[:, 2 * n :]))
    return z * h_prev + (1.0 - z) * cand


def gru_sequence(xs: Tensor, params: GRUParams, h0: Tensor | None = None) -> list[Tensor]:
    """Run a GRU over a (batch, time, features) tensor; returns every hidden state."""
    batch, steps = xs.shape[0], xs.shape[1]
    h = h0 if h0 is not None else Tensor(np.zeros((batch, params.hidden_size)))
    states = []
    for t in range(steps):
        h = gru_cell_step(xs[:, t, :], h, params)
        states.append(h)
    return states


# -- initialization and optimization -----------------------------------------
def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Uniform in +/- sqrt(6 / (fan_in + fan_out)), drawn from a numpy PCG64 generator."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (fan_in, fan_out))


@dataclass
class Adam:
    """Bias-corrected Adam; mutates parameter arrays in place."""

    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient; step aborted")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: Adam) -> Adam:
    """Functional form of :meth:`Adam.step` taking explicit gradients."""
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError("gradient shape does not match parameter")
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()
    return state


# -- gradient checking ----------------------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_input: int
    worst_index: tuple
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-3,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn`` against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    out.backward()
    worst = (0.0, -1, ())
    for k, (leaf, base) in enumerate(zip(leaves, arrays)):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            probe = [a.copy() for a in arrays]
            probe[k][idx] = base[idx] + h
            f_plus = fn(*(Tensor(p) for p in probe)).item()
            probe[k][idx] = base[idx] - h
            f_minus = fn(*(Tensor(p) for p in probe)).item()
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst[0]:
                worst = (err, k, idx)
    return GradCheckReport(max_rel_error=worst[0], worst_input=worst[1], worst_index=worst[2], tol=tol)
