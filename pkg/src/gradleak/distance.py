"""Gradient-matching distances.

``sapag``: a Gaussian-kernel distance whose bandwidth is the variance of the
target gradients, weighted per layer by ``Q_l``. Its slope saturates for large
mismatches instead of growing with them. Two reductions are available:

    layer:        D = sum_l Q_l * (1 - exp(-||g'_l - g_l||^2 / sigma2_l))
    elementwise:  D = sum_l Q_l * sum_i (1 - exp(-(g'_li - g_li)^2 / sigma2_l))

They coincide for single-entry layers. With ``layer``, a layer of n entries
sees ``||delta||^2 / sigma2`` on the order of n at a random start, so the
kernel underflows and that layer contributes no gradient; ``elementwise`` keeps
every entry inside the kernel's working range and is the default.

``euclidean`` is the plain squared distance used by DLG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

KINDS = ("sapag", "euclidean")
KIND_ALIASES = {"dlg": "euclidean", "euclidean": "euclidean", "sapag": "sapag"}
REDUCTIONS = ("elementwise", "layer")


@dataclass
class DistanceSpec:
    kind: str = "sapag"
    sigma2: list = field(default_factory=list)
    q_weights: list = field(default_factory=list)
    sigma_floor: float = 1e-8
    reduction: str = "elementwise"

    def __post_init__(self):
        self.kind = KIND_ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        q = list(self.q_weights)
        if any(v <= 0 for v in q):
            raise ValueError("q_weights must be positive")
        if any(b > a for a, b in zip(q, q[1:])):
            raise ValueError("q_weights must be non-increasing from the input side")
        if any(s < self.sigma_floor for s in self.sigma2):
            raise ValueError("sigma2 entries must be >= sigma_floor")

    @classmethod
    def for_snapshot(cls, snapshot, kind="sapag", sigma_mode="per_layer", q_schedule="harmonic",
                     gamma=0.5, sigma_floor=1e-8, reduction="elementwise") -> "DistanceSpec":
        """Bandwidths and layer weights derived from the target gradients only."""
        kind = KIND_ALIASES.get(kind, kind)
        n = len(snapshot)
        q = make_q_weights(n, q_schedule, gamma)
        sigma2 = estimate_sigma2(snapshot, sigma_mode, sigma_floor) if kind == "sapag" else []
        return cls(kind=kind, sigma2=sigma2, q_weights=q, sigma_floor=sigma_floor, reduction=reduction)


def _layer_arrays(snapshot):
    if hasattr(snapshot, "layer_grads"):
        return [g.data for _, g in snapshot.layer_grads]
    return [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in snapshot]


def estimate_sigma2(snapshot, mode: str = "per_layer", sigma_floor: float = 1e-8) -> list:
    """Kernel bandwidth per layer: population variance of the target gradients.

    ``global`` uses one variance over all concatenated entries for every layer.
    Both are clamped below at ``sigma_floor``.
    """
    layers = _layer_arrays(snapshot)
    if mode == "per_layer":
        return [max(float(a.var()), sigma_floor) for a in layers]
    if mode == "global":
        v = max(float(np.concatenate([a.reshape(-1) for a in layers]).var()), sigma_floor)
        return [v] * len(layers)
    raise ValueError(f"unknown sigma mode {mode!r}")


def make_q_weights(num_layers: int, schedule: str = "harmonic", gamma: float = 0.5) -> list:
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if schedule == "constant":
        return [1.0] * num_layers
    if schedule == "harmonic":
        return [1.0 / l for l in range(1, num_layers + 1)]
    if schedule == "geometric":
        if not 0 < gamma < 1:
            raise ValueError("geometric schedule needs 0 < gamma < 1")
        return [gamma ** (l - 1) for l in range(1, num_layers + 1)]
    raise ValueError(f"unknown q schedule {schedule!r}")


def distance(grads_dummy, target, spec: DistanceSpec) -> Tensor:
    """Differentiable distance between dummy gradients and the target snapshot."""
    targets = _layer_arrays(target)
    if len(grads_dummy) != len(targets):
        raise ShapeError("distance: layer count", (len(grads_dummy),), (len(targets),))
    q = spec.q_weights or [1.0] * len(targets)
    if len(q) != len(targets) or (spec.kind == "sapag" and len(spec.sigma2) != len(targets)):
        raise ShapeError("distance: spec length", (len(q), len(spec.sigma2)), (len(targets),))
    total = None
    for l, (gd, gt) in enumerate(zip(grads_dummy, targets)):
        if gd.shape != gt.shape:
            raise ShapeError(f"distance: layer {l}", gd.shape, gt.shape)
        diff = T.sub(gd, gt)
        sq = T.mul(diff, diff)
        if spec.kind == "euclidean":
            term = T.sum_(sq)
        elif spec.reduction == "elementwise":
            kernel = T.exp(T.mul(sq, -1.0 / spec.sigma2[l]))
            term = T.mul(q[l], T.sum_(T.sub(1.0, kernel)))
        else:
            kernel = T.exp(T.mul(T.sum_(sq), -1.0 / spec.sigma2[l]))
            term = T.mul(q[l], T.sub(1.0, kernel))
        total = term if total is None else T.add(total, term)
    return total


def analytic_first_derivative(delta, q: float, sigma2: float) -> np.ndarray:
    """Closed-form ``dD/dg'`` of one layer-reduced kernel term at ``delta = g' - g``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    d = np.asarray(delta, dtype=np.float64)
    return 2.0 * q * d / sigma2 * np.exp(-np.sum(d * d) / sigma2)


def analytic_second_derivative(delta, q: float, sigma2: float) -> np.ndarray:
    """Elementwise ``d2D/dg'^2`` of one kernel term (diagonal of the Hessian).

    Equal to ``2Q (sigma2 - 2 delta^2) / sigma2^2 * exp(-||delta||^2 / sigma2)``;
    for a scalar layer it vanishes at ``delta^2 = sigma2 / 2``, where the slope
    magnitude peaks.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    d = np.asarray(delta, dtype=np.float64)
    return 2.0 * q * (sigma2 - 2.0 * d * d) / sigma2**2 * np.exp(-np.sum(d * d) / sigma2)
