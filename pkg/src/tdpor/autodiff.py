"""Small reverse-mode autodiff over numpy arrays.

Graphs are built define-by-run: every operation on a :class:`Tensor` that
requires a gradient records its parents and a backward closure. Nothing is
cached between steps, so parameter arrays can be swapped or partially
redrawn (neuron resets) without invalidating anything.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True

LOG_2PI = math.log(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _make(data, parents: tuple, backward: Callable) -> "Tensor":
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
        return Tensor(data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar root")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._make(self.data - other.data, (self, other), backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._make(a * b, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._make(a / b, (self, other), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._make(a ** exponent, (self,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor._make(a @ b, (self, other), backward)

    def square(self) -> "Tensor":
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * a * g,))

    # -- reductions and shape ops -----------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=g.dtype)
            if _is_basic_index(index):
                out[index] = g
            else:
                np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- elementwise nonlinearities ---------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: (g * mask,))

    def sigmoid(self) -> "Tensor":
        out = _sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def silu(self) -> "Tensor":
        a = self.data
        s = _sigmoid(a)
        return Tensor._make(a * s, (self,), lambda g: (g * (s + a * s * (1.0 - s)),))

    def clamp(self, lo=None, hi=None) -> "Tensor":
        """Clip to constant bounds; gradient passes where lo <= x <= hi."""
        a = self.data
        lo_arr = -np.inf if lo is None else np.asarray(lo.data if isinstance(lo, Tensor) else lo)
        hi_arr = np.inf if hi is None else np.asarray(hi.data if isinstance(hi, Tensor) else hi)
        mask = (a >= lo_arr) & (a <= hi_arr)
        return Tensor._make(np.clip(a, lo_arr, hi_arr), (self,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise maximum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return Tensor._make(np.where(pick_a, a.data, b.data), (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def gradient(root: Tensor, parameters: Sequence[Tensor]) -> list[np.ndarray]:
    """Return d(root)/d(p) for every p in ``parameters``.

    Accumulators of the parameters are cleared first. Raises ``ValueError``
    for a non-scalar root or for parameters that do not feed into ``root``.
    """
    if root.data.size != 1:
        raise ValueError(f"gradient root must be scalar, got shape {root.shape}")
    ancestors = {id(t) for t in _topological_order(root)} if root.requires_grad else set()
    for p in parameters:
        if not p.requires_grad or id(p) not in ancestors:
            raise ValueError(f"parameter {p!r} is not part of the graph")
    for p in parameters:
        p.grad = None
    root.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in parameters]


def gaussian_log_density(x, mean, std, axis=None) -> Tensor:
    """Log density of an isotropic Gaussian, summed over ``axis`` (all by default).

    ``std`` is a positive scalar, array, or Tensor broadcastable against ``x``.
    """
    x, mean, std = as_tensor(x), as_tensor(mean), as_tensor(std)
    if np.any(std.data <= 0):
        raise ValueError("std must be positive")
    z = (x - mean) / std
    per_dim = -0.5 * LOG_2PI - std.log() - 0.5 * z.square()
    if per_dim.shape != x.shape:
        per_dim = per_dim + Tensor(np.zeros(x.shape))
    return per_dim.sum(axis=axis)


def finite_difference_check(expression: Callable[[], Tensor], parameters: Sequence[Tensor],
                            step: float = 1e-6, floor: float = 1e-3, order: int = 2) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``order=4`` uses the five-point stencil, whose truncation error is
    O(step**4); that allows a larger step and so less cancellation noise
    for expressions with badly conditioned terms.

    The per-entry denominator is ``max(|analytic|, floor * max|analytic|) + 1e-12``
    so that entries whose gradient is tiny relative to the rest of the
    tensor are judged against the tensor's scale rather than against
    round-off. A NaN on either side yields ``inf``.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    root = expression()
    analytic = [g.copy() for g in gradient(root, parameters)]
    worst = 0.0
    with no_grad():
        for p, a in zip(parameters, analytic):
            numeric = np.zeros_like(a)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                num_flat[i] = _central(expression, flat, i, step, order)
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
                return float("inf")
            scale = floor * float(np.max(np.abs(a))) if a.size else 0.0
            denom = np.maximum(np.abs(a), scale) + 1e-12
            err = np.abs(a - numeric) / denom
            if err.size:
                worst = max(worst, float(err.max()))
    return worst


def _central(expression, flat, i, step, order):
    orig = flat[i]

    def at(offset):
        flat[i] = orig + offset
        return expression().item()

    try:
        if order == 2:
            return (at(step) - at(-step)) / (2.0 * step)
        return (8.0 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / (12.0 * step)
    finally:
        flat[i] = orig


# -- initialisation ---------------------------------------------------------


@dataclass(frozen=True)
class InitSpec:
    """Distribution a parameter tensor was drawn from.

    ``kind`` is ``"uniform_fan_in"`` (U(-1/sqrt(fan_in), 1/sqrt(fan_in))),
    ``"normal"`` (N(0, scale^2)) or ``"zeros"``.
    """

    kind: str
    fan_in: int = 1
    scale: float = 1.0
    stream: str = ""

    def bound(self) -> float:
        return self.scale / math.sqrt(self.fan_in)

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform_fan_in":
            b = self.bound()
            return rng.uniform(-b, b, size=shape).astype(_DTYPE)
        if self.kind == "normal":
            return (self.scale * rng.standard_normal(size=shape)).astype(_DTYPE)
        if self.kind == "zeros":
            return np.zeros(shape, dtype=_DTYPE)
        raise ValueError(f"unknown init kind {self.kind!r}")


class Linear:
    """Dense layer ``y = x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear",
                 weight_init: InitSpec | None = None, bias_init: InitSpec | None = None):
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.weight_init = weight_init or InitSpec("uniform_fan_in", fan_in=n_in, stream=name + ".weight")
        self.bias_init = bias_init or InitSpec("uniform_fan_in", fan_in=n_in, stream=name + ".bias")
        self.weight = Tensor(self.weight_init.sample((n_in, n_out), rng), requires_grad=True,
                             name=name + ".weight")
        self.bias = Tensor(self.bias_init.sample((n_out,), rng), requires_grad=True, name=name + ".bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


# -- optimisation -----------------------------------------------------------


def clip_grad_norm(parameters: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    params = [p for p in parameters if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        coef = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * coef
    return total


class AdamW:
    """Decoupled-weight-decay Adam with optional global grad-norm clipping."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-4, max_grad_norm: float | None = 1.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.steps = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_for(self, param: Tensor) -> tuple[np.ndarray, np.ndarray]:
        for i, p in enumerate(self.params):
            if p is param:
                return self.exp_avg[i], self.exp_avg_sq[i]
        raise KeyError(param)

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad`` values; returns the pre-clip norm."""
        norm = clip_grad_norm(self.params, self.max_grad_norm) if self.max_grad_norm else float("nan")
        self.steps += 1
        if self.lr == 0:
            return norm
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            if p.grad is None:
                continue
            g = p.grad
            p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (self.lr / bc1) * m / denom
        return norm
