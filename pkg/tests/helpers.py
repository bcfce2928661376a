"""Shared oracles for the test-suite: finite differences over the primitive catalogue."""

import numpy as np

from gradleak import tensor as T
from gradleak.tensor import Tensor, finite_difference


def rel_close(a, b, rtol=1e-4, floor=1e-8):
    """Elementwise relative error below ``rtol``; differences under ``floor`` always pass."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    err = diff / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return bool(np.all((err < rtol) | (diff < floor)))


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _any(rng, shape):
    return rng.normal(size=shape)


# name -> (function of tensors, list of (shape, sampler))
PRIMITIVES = {
    "add": (lambda a, b: a + b, [((3, 4), _any), ((4,), _any)]),
    "sub": (lambda a, b: a - b, [((3, 4), _any), ((3, 1), _any)]),
    "mul": (lambda a, b: a * b, [((3, 4), _any), ((3, 4), _any)]),
    "div": (lambda a, b: a / b, [((3, 4), _any), ((3, 4), _pos)]),
    "scalar_ops": (lambda a: 2.5 * a - 1.0 + a / 3.0, [((5,), _any)]),
    "neg": (lambda a: -a, [((5,), _any)]),
    "power": (lambda a: T.power(a, 3.0) + T.power(a, 0.5), [((6,), _pos)]),
    "exp": (T.exp, [((2, 3), _any)]),
    "log": (T.log, [((2, 3), _pos)]),
    "sin": (T.sin, [((4,), _any)]),
    "sigmoid": (T.sigmoid, [((3, 3), _any)]),
    "tanh": (T.tanh, [((3, 3), _any)]),
    "gelu": (T.gelu, [((3, 3), _any)]),
    "softmax": (lambda a: T.softmax(a, -1), [((2, 5), _any)]),
    "log_softmax": (lambda a: T.log_softmax(a, -1), [((2, 5), _any)]),
    "sum": (lambda a: T.sum_(a, 1, keepdims=True), [((3, 4), _any)]),
    "mean": (lambda a: T.mean(a, 0), [((3, 4), _any)]),
    "variance": (lambda a: T.var(a, 1), [((3, 5), _any)]),
    "matmul": (T.matmul, [((3, 4), _any), ((4, 2), _any)]),
    "batched_matmul": (T.matmul, [((2, 3, 4), _any), ((4, 2), _any)]),
    "conv2d": (lambda x, w: T.conv2d(x, w, padding=1), [((1, 2, 4, 4), _any), ((3, 2, 3, 3), _any)]),
    "conv2d_stride": (lambda x, w: T.conv2d(x, w, stride=2), [((2, 1, 5, 5), _any), ((2, 1, 3, 3), _any)]),
    "reshape": (lambda a: T.reshape(a, (4, 3)), [((3, 4), _any)]),
    "transpose": (lambda a: T.transpose(a, (1, 2, 0)), [((2, 3, 4), _any)]),
    "slice": (lambda a: a[1:, ::2], [((3, 4), _any)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [((2, 3), _any), ((2, 2), _any)]),
    "clamp": (lambda a: T.clamp(a, -0.5, 0.5), [((8,), _any)]),
}

# primitives used on the attack path; checked to second order
SECOND_ORDER = ["matmul", "conv2d", "sigmoid", "gelu", "softmax", "exp", "variance", "log_softmax", "mul", "div"]


def clamp_safe(inputs, lo=-0.5, hi=0.5, margin=1e-3):
    """Nudge values away from the clamp kinks so central differences are valid."""
    out = []
    for x in inputs:
        x = x.copy()
        for edge in (lo, hi):
            near = np.abs(x - edge) < margin
            x[near] = edge + 2 * margin
        out.append(x)
    return out


def sample_inputs(name, rng):
    _, specs = PRIMITIVES[name]
    inputs = [sampler(rng, shape) for shape, sampler in specs]
    if name == "clamp":
        inputs = clamp_safe(inputs)
    return inputs


def _scalarize(out, weights):
    return T.sum_(T.mul(out, weights))


def first_order_case(name, rng, step=1e-5):
    """Return ``(autodiff, finite-difference)`` gradient lists for one random case."""
    fn, _ = PRIMITIVES[name]
    inputs = sample_inputs(name, rng)
    probe = fn(*[Tensor(x) for x in inputs])
    weights = Tensor(rng.normal(size=probe.shape))
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    auto = T.grad(_scalarize(fn(*leaves), weights), leaves)
    fd = []
    for i in range(len(inputs)):
        def f(v, i=i):
            args = [Tensor(v if j == i else x) for j, x in enumerate(inputs)]
            return _scalarize(fn(*args), weights)
        fd.append(finite_difference(f, inputs[i], step))
    return [a.data for a in auto], fd


def second_order_case(name, rng, step=1e-5):
    """Hessian-vector products: autodiff of a gradient vs differences of that gradient."""
    fn, _ = PRIMITIVES[name]
    inputs = sample_inputs(name, rng)
    probe = fn(*[Tensor(x) for x in inputs])
    weights = Tensor(rng.normal(size=probe.shape))
    dirs = [Tensor(rng.normal(size=x.shape)) for x in inputs]

    def gdot(values, create_graph):
        leaves = [Tensor(v, requires_grad=True) for v in values]
        gs = T.grad(_scalarize(fn(*leaves), weights), leaves, create_graph=True, allow_unused=True)
        total = None
        for g, d in zip(gs, dirs):
            term = T.sum_(T.mul(g, d))
            total = term if total is None else total + term
        return total, leaves

    h, leaves = gdot(inputs, True)
    auto = T.grad(h, leaves, allow_unused=True)
    fd = []
    for i in range(len(inputs)):
        def f(v, i=i):
            with T.enable_grad():
                val, _ = gdot([v if j == i else x for j, x in enumerate(inputs)], False)
            return val.item()
        fd.append(finite_difference(f, inputs[i], step))
    return [a.data for a in auto], fd
