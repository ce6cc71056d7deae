"""Dense float64 tensors with reverse-mode automatic differentiation.

Minimal compute core for the masked-autoencoder model and its regression
heads: a Tensor node type, the operation set the model needs, a backward
pass over the recorded graph, and an Adam optimizer. Everything is
float64 and single-threaded-deterministic; there is no broadcasting
beyond leading-axis/bias patterns and batched matmul.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "MissingGradError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "gather_rows",
    "concat",
    "slice_axis",
    "mean",
    "tsum",
    "softmax",
    "layer_norm",
    "gelu",
    "Adam",
    "truncated_normal",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward called on an invalid or already-consumed graph."""


class MissingGradError(RuntimeError):
    """A registered parameter has no gradient at optimizer step time."""


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode AD.

    Tensors created by operations record their parents and a backward
    rule; ``backward()`` on a scalar walks the graph once in reverse
    topological order and accumulates gradients into ``requires_grad``
    leaves. A graph can be backward-ed exactly once.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False

    # -- convenience ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------

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
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass --------------------------------------------------

    def backward(self) -> None:
        if self._consumed:
            raise TapeError("backward already called on this graph; build a new one")
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")

        # iterative DFS; graphs run to thousands of nodes
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + g
            # release the rule and the intermediate gradient buffer
            node._backward = None
            node._parents = ()
            if node is not self:
                node.grad = None
        self._consumed = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(kind: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind} produced non-finite values")


def _attach(out: Tensor, parents: tuple, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# -- elementwise / arithmetic -------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None
    _check_finite("add", data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _attach(Tensor(data), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"subtract: incompatible shapes {a.shape} and {b.shape}") from None
    _check_finite("subtract", data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _attach(Tensor(data), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"multiply: incompatible shapes {a.shape} and {b.shape}") from None
    _check_finite("multiply", data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _attach(Tensor(data), (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data
    _check_finite("matmul", data)

    def backward(g):
        return (
            _unbroadcast(g @ _swap(b.data), a.data.shape),
            _unbroadcast(_swap(a.data) @ g, b.data.shape),
        )

    return _attach(Tensor(data), (a, b), backward)


# -- structural ---------------------------------------------------------


def transpose(t: Tensor, axes: tuple) -> Tensor:
    t = as_tensor(t)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for ndim {t.ndim}")
    data = np.transpose(t.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _attach(Tensor(data), (t,), backward)


def reshape(t: Tensor, shape: tuple) -> Tensor:
    t = as_tensor(t)
    try:
        data = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {t.shape} as {shape}") from None
    orig = t.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _attach(Tensor(data), (t,), backward)


def gather_rows(t: Tensor, indices) -> Tensor:
    """Select rows: 2-D ``t[idx]`` or per-batch ``t[b, idx[b]]`` for 3-D."""
    t = as_tensor(t)
    idx = np.asarray(indices, dtype=np.int64)
    if t.ndim == 2 and idx.ndim == 1:
        data = t.data[idx]
        shape = t.data.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

    elif t.ndim == 3 and idx.ndim == 2:
        if idx.shape[0] != t.shape[0]:
            raise ShapeError(f"gather: batch extents differ, {t.shape} vs idx {idx.shape}")
        data = np.take_along_axis(t.data, idx[:, :, None], axis=1)
        batch, rows, width = t.data.shape
        flat_idx = (idx + np.arange(batch)[:, None] * rows).ravel()

        def backward(g):
            out = np.zeros((batch * rows, width))
            np.add.at(out, flat_idx, g.reshape(-1, width))
            return (out.reshape(batch, rows, width),)

    else:
        raise ShapeError(f"gather: unsupported ranks, tensor {t.shape} with idx {idx.shape}")
    return _attach(Tensor(data), (t,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _attach(Tensor(data), tuple(tensors), backward)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    t = as_tensor(t)
    sl = [slice(None)] * t.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    data = t.data[sl]
    shape = t.data.shape

    def backward(g):
        out = np.zeros(shape)
        out[sl] = g
        return (out,)

    return _attach(Tensor(data), (t,), backward)


# -- reductions ---------------------------------------------------------


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = np.mean(t.data, axis=axis, keepdims=keepdims)
    shape = t.data.shape
    count = t.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g) / count),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _attach(Tensor(data), (t,), backward)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    data = np.sum(t.data, axis=axis, keepdims=keepdims)
    shape = t.data.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _attach(Tensor(data), (t,), backward)


# -- neural-net primitives ----------------------------------------------


def softmax(t: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    _check_finite("softmax", s)

    def backward(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _attach(Tensor(s), (t,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-10) -> Tensor:
    """Layer norm over the last axis with learnable scale/shift."""
    t, gamma, beta = as_tensor(t), as_tensor(gamma), as_tensor(beta)
    width = t.shape[-1]
    if width < 1:
        raise ShapeError("layer-norm: last-axis extent must be >= 1")
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer-norm: scale/shift must be ({width},), got {gamma.shape} / {beta.shape}"
        )
    mu = t.data.mean(axis=-1, keepdims=True)
    centered = t.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gamma.data * xhat + beta.data
    _check_finite("layer-norm", data)

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).reshape(-1, width).sum(axis=0)
        dbeta = g.reshape(-1, width).sum(axis=0)
        return dx, dgamma, dbeta

    return _attach(Tensor(data), (t, gamma, beta), backward)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    t = as_tensor(t)
    cdf = 0.5 * (1.0 + erf(t.data * _INV_SQRT2))
    data = t.data * cdf
    _check_finite("gelu", data)

    def backward(g):
        pdf = np.exp(-0.5 * t.data * t.data) * _INV_SQRT2PI
        return (g * (cdf + t.data * pdf),)

    return _attach(Tensor(data), (t,), backward)


# -- optimizer ----------------------------------------------------------


class Adam:
    """Standard Adam with bias correction over a named parameter dict.

    ``step`` applies one update to every registered parameter and clears
    its gradient; a missing gradient is an error (the training loop must
    have reached every parameter).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02,
                     bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until within ±bound·std."""
    out = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(out) > limit
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > limit
    return out
