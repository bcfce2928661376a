"""Dense float64 tensors with reverse-mode autodiff.

Every backward rule is written in terms of the same differentiable primitives,
so a gradient computed with ``create_graph=True`` is itself a graph node and can
be differentiated again. Gradient-matching attacks need exactly this: the attack
loss is a function of parameter gradients and must be differentiated with
respect to the network input.

The graph is recorded implicitly: each non-leaf tensor keeps a ``Node`` with
references to its inputs and a backward closure. Nothing is global, so a graph
lives exactly as long as the tensors that reference it.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "UnreachableError",
    "tensor",
    "zeros",
    "ones",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "finite_difference",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rules."""

    def __init__(self, op: str, *shapes):
        dims = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {dims}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf from its inputs."""

    def __init__(self, op: str):
        super().__init__(f"{op}: non-finite value in result")
        self.op = op


class UnreachableError(RuntimeError):
    """Raised when a requested gradient target is not part of the graph."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops recording operations."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A float64 array that optionally participates in the derivative graph."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method aliases ----------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return var(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward)
    return out


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- shape plumbing ---------------------------------------------------------

def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape``, undoing numpy broadcasting."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError("sum_to", x.shape, shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    if data.shape != shape:
        raise ShapeError("sum_to", x.shape, shape)

    def backward(g):
        return (broadcast_to(g, x.shape),)

    return _make("sum_to", data, (x,), backward)


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None

    def backward(g):
        return (sum_to(g, x.shape),)

    return _make("broadcast_to", data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def backward(g):
        return (reshape(g, x.shape),)

    return _make("reshape", data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (transpose(g, inverse),)

    return _make("transpose", x.data.transpose(axes), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]
    data = np.array(data, dtype=np.float64)

    def backward(g):
        return (scatter(g, index, x.shape),)

    return _make("getitem", data, (x,), backward)


def scatter(g: Tensor, index, shape) -> Tensor:
    """Adjoint of ``getitem``: place ``g`` at ``index`` in a zero array."""
    data = np.zeros(shape)
    np.add.at(data, index, g.data)

    def backward(h):
        return (getitem(h, index),)

    return _make("scatter", data, (g,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make("concat", data, tuple(tensors), backward)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _make("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make("div", data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (neg(g),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = _as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a constant")
    p = float(p)
    with np.errstate(all="ignore"):
        data = a.data**p

    def backward(g):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make("power", data, (a,), backward)


def square(a) -> Tensor:
    return power(a, 2.0)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g: (div(g, a),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _make("sin", np.sin(a.data), (a,), lambda g: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    return _make("cos", np.cos(a.data), (a,), lambda g: (neg(mul(g, sin(a))),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = _sigmoid_np(a.data)

    def backward(g):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make("sigmoid", data, (a,), backward)


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(a) -> Tensor:
    """Standard normal CDF; derivative is the normal density."""
    a = _as_tensor(a)

    def backward(g):
        pdf = mul(_INV_SQRT_2PI, exp(mul(-0.5, mul(a, a))))
        return (mul(g, pdf),)

    return _make("normal_cdf", ndtr(a.data), (a,), backward)


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    a = _as_tensor(a)
    return mul(a, normal_cdf(a))


def tanh(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _make("tanh", np.tanh(a.data), (a,), backward)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask[a.data < lo] = 0.0
    if hi is not None:
        mask[a.data > hi] = 0.0

    def backward(g):
        return (mul(g, mask),)

    return _make("clamp", data, (a,), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _make("sum", np.asarray(data, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def var(a, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by N)."""
    a = _as_tensor(a)
    centered = sub(a, mean(a, axis, keepdims=True))
    return mean(mul(centered, centered), axis, keepdims)


def max_detached(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum as a constant; used for shift-invariant stabilisation only."""
    a = _as_tensor(a)
    return Tensor(a.data.max(axis=axis, keepdims=keepdims))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = sub(a, max_detached(a, axis, keepdims=True))
    e = exp(z)
    return div(e, sum_(e, axis, keepdims=True))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = sub(a, max_detached(a, axis, keepdims=True))
    return sub(z, log(sum_(exp(z), axis, keepdims=True)))


# -- contractions ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = sum_to(matmul(g, swap_last(b)), a.shape) if a.requires_grad else None
        gb = sum_to(matmul(swap_last(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", data, (a, b), backward)


_IM2COL_CACHE: dict = {}


def _im2col_index(c, h, w, k, stride, padding):
    key = (c, h, w, k, stride, padding)
    hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", (c, h, w), (k, k))
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = ki.reshape(-1, 1) + stride * oi.reshape(1, -1)
    cols = kj.reshape(-1, 1) + stride * oj.reshape(1, -1)
    flat = ci.reshape(-1, 1) * hp * wp + rows * wp + cols  # (c*k*k, oh*ow)
    hit = (flat, oh, ow, hp, wp)
    _IM2COL_CACHE[key] = hit
    return hit


def im2col(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold ``(N, C, H, W)`` into patch columns ``(N, C*k*k, OH*OW)``."""
    if x.ndim != 4:
        raise ShapeError("im2col", x.shape)
    n, c, h, w = x.shape
    flat, oh, ow, hp, wp = _im2col_index(c, h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    data = xp.reshape(n, -1)[:, flat]

    def backward(g):
        return (col2im(g, x.shape, k, stride, padding),)

    return _make("im2col", data, (x,), backward)


def col2im(cols: Tensor, shape: tuple, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``im2col``: fold patch columns back, summing overlaps."""
    n, c, h, w = shape
    flat, oh, ow, hp, wp = _im2col_index(c, h, w, k, stride, padding)
    if cols.shape != (n, flat.shape[0], flat.shape[1]):
        raise ShapeError("col2im", cols.shape, shape)
    size = c * hp * wp
    idx = flat.reshape(-1)
    out = np.empty((n, size))
    for i in range(n):
        out[i] = np.bincount(idx, weights=cols.data[i].reshape(-1), minlength=size)
    out = out.reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w]

    def backward(g):
        return (im2col(g, k, stride, padding),)

    return _make("col2im", np.ascontiguousarray(out), (cols,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` is (N, C, H, W), ``weight`` is (F, C, k, k)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, _, h, w = x.shape
    f, _, k, _ = weight.shape
    cols = im2col(x, k, stride, padding)
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = matmul(reshape(weight, (f, -1)), cols)  # (N, F, OH*OW)
    out = reshape(out, (n, f, oh, ow))
    if bias is not None:
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


# -- differentiation ------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor] | Tensor,
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned gradients can be differentiated again.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if output.size != 1:
        raise ShapeError("grad (output must be scalar)", output.shape)
    for t in targets:
        if not t.requires_grad:
            raise UnreachableError("grad: target does not require grad")

    order = _topo_order(output)
    target_ids = {id(t) for t in targets}
    found: dict = {}
    with _grad_mode(create_graph):
        grads = {id(output): Tensor(np.ones_like(output.data))}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in target_ids:
                found[id(t)] = g
            if t.node is None:
                continue
            for inp, gi in zip(t.node.inputs, t.node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else add(prev, gi)

    result = []
    for t in targets:
        g = found.get(id(t))
        if g is None:
            if not allow_unused:
                raise UnreachableError(f"grad: target {t.name or tuple(t.shape)} is not reachable from output")
            g = Tensor(np.zeros_like(t.data))
        if not create_graph:
            g = g.detach()
        result.append(g)
    return result[0] if single else result


def finite_difference(scalar_fn: Callable, point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``scalar_fn`` at ``point``.

    ``scalar_fn`` receives a float64 array and may return a float or a Tensor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    out = np.empty_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)

    def f(v):
        with no_grad():
            r = scalar_fn(v)
        return float(r.item() if isinstance(r, Tensor) else r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x.copy())
        flat[i] = orig - step
        lo = f(x.copy())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def stack_flat(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for t in tensors])
