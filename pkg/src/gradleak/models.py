"""Victim networks: MLP, LeNet-lite CNN, transformer-lite and a linear embedding head.

Weights are plain lists of named :class:`~gradleak.tensor.Tensor` objects in
front-to-back order. That order is part of the contract: per-layer distance
weights are indexed by it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ARCHITECTURES = ("mlp", "lenet_lite", "transformer_lite", "embedding_head")
ACTIVATIONS = ("sigmoid", "gelu")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``input_shape`` is ``(C, H, W)`` for image models and ``(seq_len, d)`` for
    the text models. ``hidden`` lists the MLP hidden widths.
    """

    architecture: str
    input_shape: tuple
    num_classes: int
    hidden: tuple = ()
    channels: int = 12
    kernel: int = 5
    heads: int = 1
    ff_dim: int = 32
    activation: str = "sigmoid"
    position_encoding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.num_classes < 1 or any(s < 1 for s in self.input_shape):
            raise ValueError("dimensions must be >= 1")
        if self.architecture == "mlp":
            if not self.hidden or any(h < 1 for h in self.hidden):
                raise ValueError("mlp needs at least one hidden layer of width >= 1")
        if self.architecture in ("mlp", "lenet_lite") and len(self.input_shape) != 3:
            raise ValueError("image models take input_shape (C, H, W)")
        if self.architecture == "lenet_lite" and (self.channels < 1 or self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError("lenet_lite needs channels >= 1 and an odd kernel")
        if self.architecture in ("transformer_lite", "embedding_head") and len(self.input_shape) != 2:
            raise ValueError("text models take input_shape (seq_len, d)")
        if self.architecture == "transformer_lite" and self.input_shape[1] % self.heads:
            raise ValueError("embedding dim must be divisible by heads")

    @property
    def is_image(self) -> bool:
        return self.architecture in ("mlp", "lenet_lite")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class WeightInit:
    scheme: str = "uniform"
    lo: float = -0.5
    hi: float = 0.5
    gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("uniform", "xavier_normal"):
            raise ValueError(f"unknown init scheme {self.scheme!r}")
        if self.scheme == "uniform" and not self.lo < self.hi:
            raise ValueError("uniform init needs lo < hi")
        if self.scheme == "xavier_normal" and not self.gain > 0:
            raise ValueError("xavier gain must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(spec: ModelSpec) -> list:
    """``(name, shape, fan_in, fan_out)`` for every trainable tensor, front to back."""
    out = []

    def linear(name, n_in, n_out):
        out.append((f"{name}.weight", (n_out, n_in), n_in, n_out))
        out.append((f"{name}.bias", (n_out,), n_in, n_out))

    if spec.architecture == "mlp":
        widths = [int(np.prod(spec.input_shape)), *spec.hidden, spec.num_classes]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            linear(f"fc{i}", a, b)
    elif spec.architecture == "lenet_lite":
        c, h, w = spec.input_shape
        k, ch = spec.kernel, spec.channels
        for i, c_in in enumerate((c, ch), start=1):
            out.append((f"conv{i}.weight", (ch, c_in, k, k), c_in * k * k, ch * k * k))
            out.append((f"conv{i}.bias", (ch,), c_in * k * k, ch * k * k))
        linear("fc", ch * h * w, spec.num_classes)
    elif spec.architecture == "transformer_lite":
        _, d = spec.input_shape
        for name in ("attn.q", "attn.k", "attn.v"):
            out.append((f"{name}.weight", (d, d), d, d))
        linear("attn.o", d, d)
        linear("ff1", d, spec.ff_dim)
        linear("ff2", spec.ff_dim, d)
        linear("head", d, spec.num_classes)
    else:
        s, d = spec.input_shape
        linear("head", s * d, spec.num_classes)
    return out


def init_weights(spec: ModelSpec, init: WeightInit) -> list:
    """Draw all trainable tensors deterministically from ``init.seed``.

    Biases start at zero under both schemes.
    """
    rng = np.random.default_rng(init.seed)
    weights = []
    for name, shape, fan_in, fan_out in param_shapes(spec):
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif init.scheme == "uniform":
            data = rng.uniform(init.lo, init.hi, size=shape)
        else:
            std = init.gain * math.sqrt(2.0 / (fan_in + fan_out))
            data = rng.normal(0.0, std, size=shape)
        weights.append(Tensor(data, name=name))
    return weights


def as_trainable(weights) -> list:
    """Fresh leaf copies of ``weights`` with ``requires_grad`` set."""
    return [Tensor(w.data, requires_grad=True, name=w.name) for w in weights]


def _act(spec, x):
    return T.sigmoid(x) if spec.activation == "sigmoid" else T.gelu(x)


def _linear(x, w, b):
    return T.add(T.matmul(x, T.transpose(w)), b)


def _check_input(spec, X):
    if X.ndim != len(spec.input_shape) + 1 or tuple(X.shape[1:]) != spec.input_shape:
        raise ShapeError(f"forward[{spec.architecture}]", X.shape, (None, *spec.input_shape))


def forward(spec: ModelSpec, weights, X) -> Tensor:
    """Logits ``(batch, num_classes)`` for a batch ``X``."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    _check_input(spec, X)
    if len(weights) != len(param_shapes(spec)):
        raise ShapeError("forward: weight count", (len(weights),), (len(param_shapes(spec)),))
    if spec.architecture == "transformer_lite":
        return transformer_lite_forward(spec, weights, X)
    n = X.shape[0]
    if spec.architecture == "mlp":
        h = T.reshape(X, (n, -1))
        pairs = list(zip(weights[::2], weights[1::2]))
        for w, b in pairs[:-1]:
            h = _act(spec, _linear(h, w, b))
        w, b = pairs[-1]
        return _linear(h, w, b)
    if spec.architecture == "lenet_lite":
        pad = spec.kernel // 2
        h = _act(spec, T.conv2d(X, weights[0], weights[1], stride=1, padding=pad))
        h = _act(spec, T.conv2d(h, weights[2], weights[3], stride=1, padding=pad))
        return _linear(T.reshape(h, (n, -1)), weights[4], weights[5])
    # embedding_head: one linear map over the flattened sequence
    return _linear(T.reshape(X, (n, -1)), weights[0], weights[1])


def loss(logits: Tensor, Y) -> Tensor:
    """Soft-label cross entropy: batch mean of ``-sum softmax(Y) * log softmax(logits)``."""
    Y = Y if isinstance(Y, Tensor) else Tensor(Y)
    if logits.shape != Y.shape:
        raise ShapeError("loss", logits.shape, Y.shape)
    per_item = T.sum_(T.mul(T.softmax(Y, -1), T.log_softmax(logits, -1)), -1)
    return T.neg(T.mean(per_item))


def onehot_to_soft(Y, scale: float = 1e3) -> np.ndarray:
    """Soft-label logits whose softmax is numerically the one-hot ``Y``."""
    return np.asarray(Y, dtype=np.float64) * scale


# -- transformer-lite -------------------------------------------------------------

def sinusoidal_encoding(seq_len: int, d: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def self_attention(x: Tensor, wq, wk, wv, wo, bo, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``x`` of shape (B, S, d)."""
    b, s, d = x.shape
    if d % heads:
        raise ShapeError("self_attention: d not divisible by heads", (d,), (heads,))
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split(T.matmul(x, T.transpose(wq)))
    k = split(T.matmul(x, T.transpose(wk)))
    v = split(T.matmul(x, T.transpose(wv)))
    scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(dh))
    att = T.matmul(T.softmax(scores, -1), v)
    merged = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, s, d))
    return _linear(merged, wo, bo)


def transformer_lite_forward(spec: ModelSpec, weights, X: Tensor) -> Tensor:
    """One encoder block (attention + GELU feed-forward, both residual), mean pool, linear head."""
    if spec.architecture != "transformer_lite":
        raise ValueError("transformer_lite_forward needs a transformer_lite spec")
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim == 2:
        X = T.reshape(X, (1, *X.shape))
    _check_input(spec, X)
    wq, wk, wv, wo, bo, w1, b1, w2, b2, wh, bh = weights
    seq_len, d = spec.input_shape
    h = X
    if spec.position_encoding:
        h = T.add(h, Tensor(sinusoidal_encoding(seq_len, d)))
    h = T.add(h, self_attention(h, wq, wk, wv, wo, bo, spec.heads))
    ff = _linear(T.gelu(_linear(h, w1, b1)), w2, b2)
    h = T.add(h, ff)
    pooled = T.mean(h, axis=1)
    return _linear(pooled, wh, bh)
