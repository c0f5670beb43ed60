"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient
(and gradient recording is enabled) the output keeps a reference to its
parents and a closure mapping the output gradient to input gradients.
:func:`backward` linearises that DAG into a :class:`Graph` and sweeps it in
reverse topological order.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer steps)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def check_finite(self, name="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{name} contains NaN or Inf")
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def square(x):
    x = as_tensor(x)

    def backward(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), backward, "square")


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    x = as_tensor(x)

    def backward(g):
        return (kernels.gelu_backward(x.data, g),)

    return _make(kernels.gelu_forward(x.data), (x,), backward, "gelu")


def softmax_lastdim(x):
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    y = kernels.softmax_forward(x.data)

    def backward(g):
        return (kernels.softmax_backward(y, g),)

    return _make(y, (x,), backward, "softmax")


# -- shape ops -------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _make(data, (x,), backward, "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra --------------------------------------------------------

def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- layers ----------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics of one BatchNorm layer (not trained by gradient)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim, momentum=0.1, eps=1e-5):
        return cls(np.zeros(dim), np.ones(dim), momentum, eps)


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool):
    """BatchNorm over ``[batch, D, tokens]``; features are the D axis."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3 or x.shape[1] != state.running_mean.shape[0]:
        raise ShapeError(f"batchnorm expects [batch, {state.running_mean.shape[0]}, tokens], got {x.shape}")
    if training:
        out, xhat, mu, var, invstd = kernels.batchnorm_train_forward(x.data, gamma.data, beta.data, state.eps)
        n = x.shape[0] * x.shape[2]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * unbiased

        def backward(g):
            return kernels.batchnorm_train_backward(xhat, invstd, gamma.data, g)
    else:
        invstd = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean[None, :, None]) * invstd[None, :, None]
        out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

        def backward(g):
            dx = g * (gamma.data * invstd)[None, :, None]
            return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _make(out, (x, gamma, beta), backward, "batchnorm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))

    def backward(g):
        return (g * keep,)

    return _make(x.data * keep, (x,), backward, "dropout")


def mse(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return _make(np.mean(diff * diff), (pred, target), backward, "mse")


# -- backward --------------------------------------------------------------

@dataclass
class Graph:
    """Recorded operations reachable from an output, in topological order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor, graph: Graph | None = None):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    graph = graph or Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return graph


def relative_error(analytic, numeric, mode: str = "norm") -> float:
    """Distance between an analytic and a numeric gradient.

    ``norm``: ``|a - n| / max(|a|, |n|)`` with Euclidean norms over the whole
    array (0 when both vanish). ``elementwise``: the largest
    ``|a_i - n_i| / max(1e-8, |a_i| + |n_i|)``, which is stricter but
    dominated by difference roundoff wherever the true gradient is near 0.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if mode == "elementwise":
        denom = np.maximum(1e-8, np.abs(a) + np.abs(n))
        return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    if mode != "norm":
        raise ValueError(f"mode must be 'norm' or 'elementwise', got {mode!r}")
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return float(np.linalg.norm(a - n) / scale) if scale > 0 else 0.0


def _central_difference(loss_fn, flat, eps):
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * eps)
    return numeric


def grad_check(f, x, eps: float = 1e-5, mode: str = "norm") -> float:
    """Relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    backward(f(leaf))
    numeric = _central_difference(lambda: f(Tensor(base)), base.reshape(-1), eps)
    return relative_error(leaf.grad, numeric, mode)


def param_gradients(loss_fn, params, eps: float = 1e-5):
    """Analytic and central-difference gradients of a zero-argument ``loss_fn``.

    ``params`` maps name -> leaf Tensor that ``loss_fn`` closes over; the
    tensors are perturbed in place and restored. Returns two dicts of arrays.
    """
    for t in params.values():
        t.grad = None
    backward(loss_fn())
    analytic, numeric = {}, {}
    for name, t in params.items():
        analytic[name] = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        numeric[name] = _central_difference(loss_fn, t.data.reshape(-1), eps).reshape(t.shape)
    return analytic, numeric


def grad_check_params(loss_fn, params, eps: float = 1e-5, mode: str = "norm") -> dict:
    """Per-parameter relative error (see :func:`relative_error`)."""
    analytic, numeric = param_gradients(loss_fn, params, eps)
    return {n: relative_error(analytic[n], numeric[n], mode) for n in params}


def grad_check_total(loss_fn, params, eps: float = 1e-5) -> float:
    """Norm-wise relative error over all parameters concatenated."""
    analytic, numeric = param_gradients(loss_fn, params, eps)
    return relative_error(np.concatenate([analytic[n].ravel() for n in params]),
                          np.concatenate([numeric[n].ravel() for n in params]))
