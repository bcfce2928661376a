"""The honest participant: holds private data, optionally trains, shares gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialization
from . import tensor as T
from .models import ModelSpec, as_trainable, forward, loss
from .tensor import Tensor


@dataclass
class GradientSnapshot:
    """Per-layer gradients observed by the adversary plus model bookkeeping."""

    layer_grads: list  # [(name, Tensor)], same order as init_weights
    spec: ModelSpec
    checksum: str
    batch_size: int
    epochs: int = 0
    seed: int | None = None
    label_scale: float = 1.0

    def __post_init__(self):
        for name, g in self.layer_grads:
            if not np.isfinite(g.data).all():
                raise ValueError(f"non-finite gradient in layer {name}")

    @property
    def names(self) -> list:
        return [n for n, _ in self.layer_grads]

    @property
    def grads(self) -> list:
        return [g for _, g in self.layer_grads]

    def __len__(self):
        return len(self.layer_grads)

    @property
    def meta(self) -> dict:
        return {
            "kind": "gradient_snapshot",
            "model": self.spec.to_dict(),
            "checksum": self.checksum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "label_scale": self.label_scale,
        }

    def save(self, path) -> None:
        serialization.save(path, self.layer_grads, self.meta)

    def to_bytes(self) -> bytes:
        return serialization.dumps(self.layer_grads, self.meta)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GradientSnapshot":
        named, meta = serialization.loads(blob)
        return cls._from_parts(named, meta)

    @classmethod
    def load(cls, path) -> "GradientSnapshot":
        named, meta = serialization.load(path)
        return cls._from_parts(named, meta)

    @classmethod
    def _from_parts(cls, named, meta):
        if meta.get("kind") != "gradient_snapshot":
            raise serialization.ContainerError("not a gradient snapshot container")
        return cls(
            layer_grads=named,
            spec=ModelSpec.from_dict(meta["model"]),
            checksum=meta["checksum"],
            batch_size=meta["batch_size"],
            epochs=meta.get("epochs", 0),
            seed=meta.get("seed"),
            label_scale=meta.get("label_scale", 1.0),
        )


def save_weights(path, spec: ModelSpec, weights) -> None:
    meta = {"kind": "weights", "model": spec.to_dict(), "checksum": serialization.weights_checksum(weights)}
    serialization.save(path, [(w.name, w) for w in weights], meta)


def load_weights(path) -> tuple:
    """Return ``(spec, weights)`` from a weight container."""
    named, meta = serialization.load(path)
    if meta.get("kind") != "weights":
        raise serialization.ContainerError("not a weight container")
    weights = []
    for name, t in named:
        t.name = name
        weights.append(t)
    return ModelSpec.from_dict(meta["model"]), weights


def victim_loss(spec, weights, X, Y, label_scale: float = 1.0) -> Tensor:
    return loss(forward(spec, weights, X), Tensor(np.asarray(Y, dtype=np.float64) * label_scale))


def capture(spec: ModelSpec, weights, X, Y, *, label_scale: float = 1.0, epochs: int = 0, seed=None) -> GradientSnapshot:
    """Gradients of the batch-mean victim loss with respect to every weight.

    ``Y`` holds one-hot rows; the loss sees ``label_scale * Y`` as soft-label
    logits. ``weights`` is left untouched.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    Y = np.asarray(Y.data if isinstance(Y, Tensor) else Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape != (X.shape[0], spec.num_classes):
        raise T.ShapeError("capture: labels", Y.shape, (X.shape[0], spec.num_classes))
    params = as_trainable(weights)
    value = victim_loss(spec, params, X, Y, label_scale)
    grads = T.grad(value, params, create_graph=False)
    return GradientSnapshot(
        layer_grads=[(w.name, g) for w, g in zip(weights, grads)],
        spec=spec,
        checksum=serialization.weights_checksum(weights),
        batch_size=X.shape[0],
        epochs=epochs,
        seed=seed,
        label_scale=label_scale,
    )


def train(spec: ModelSpec, weights, dataset, epochs: int, lr: float = 0.01, *,
          batch_size: int = 1, label_scale: float = 1.0, seed: int = 0):
    """Plain minibatch SGD.

    Returns ``(new_weights, history)`` where ``history[e]`` is the full-dataset
    loss after epoch ``e``. Sample order is shuffled per epoch from ``seed``.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    X, Y = dataset
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    rng = np.random.default_rng(seed)
    current = [w.data.copy() for w in weights]
    names = [w.name for w in weights]
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), batch_size):
            idx = order[start:start + batch_size]
            params = [Tensor(d, requires_grad=True, name=n) for d, n in zip(current, names)]
            value = victim_loss(spec, params, X[idx], Y[idx], label_scale)
            for d, g in zip(current, T.grad(value, params)):
                d -= lr * g.data
        with T.no_grad():
            full = victim_loss(spec, [Tensor(d) for d in current], X, Y, label_scale)
        history.append(full.item())
    return [Tensor(d, name=n) for d, n in zip(current, names)], history


def gradient_stats(snapshot: GradientSnapshot) -> list:
    """Per-layer population ``(mean, variance, max_abs)``."""
    out = []
    for _, g in snapshot.layer_grads:
        d = g.data.reshape(-1)
        out.append((float(d.mean()), float(d.var()), float(np.abs(d).max(initial=0.0))))
    return out
