"""Gradient-matching reconstruction of private inputs and labels.

Each iteration computes the dummy gradients with ``create_graph=True``,
evaluates the distance to the observed snapshot, differentiates that distance
with respect to the dummy input and soft label, takes an optimizer step and
clamps image pixels to ``[0, 1]``. The attack only ever sees the snapshot and
the public model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialization
from . import tensor as T
from .distance import DistanceSpec, distance
from .models import ModelSpec, as_trainable, forward, loss
from .optim import make_optimizer
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

DEFAULT_ITERS = {"lbfgs_lite": 500, "adamw": 20000, "adam": 20000}
DEFAULT_LR = {"lbfgs_lite": 1.0, "adamw": 1e-3, "adam": 1e-3}


class ChecksumMismatch(ValueError):
    """The snapshot was not produced by the supplied weights."""


@dataclass
class AttackConfig:
    dummy_init: str = "normal"
    constant: float = 0.5
    label_init: str = "normal"
    label_logit: float = 1.0
    init_scale: float = 1.0
    optimizer: str = "adamw"
    lr: float | None = None
    weight_decay: float | None = None
    history: int = 20
    max_iters: int | None = None
    distance: str = "sapag"
    sigma_mode: str = "per_layer"
    q_schedule: str = "harmonic"
    gamma: float = 0.5
    sigma_floor: float = 1e-8
    reduction: str = "elementwise"
    seed: int = 0
    log_every: int = 100
    stop_tol: float = 1e-10
    clamp: bool = True

    def __post_init__(self):
        if self.optimizer not in DEFAULT_ITERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.dummy_init not in ("normal", "constant"):
            raise ValueError(f"unknown dummy_init {self.dummy_init!r}")
        if self.label_init not in ("normal", "bias"):
            raise ValueError(f"unknown label_init {self.label_init!r}")
        if self.max_iters is None:
            self.max_iters = DEFAULT_ITERS[self.optimizer]
        if self.lr is None:
            self.lr = DEFAULT_LR[self.optimizer]
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def build_optimizer(self):
        if self.optimizer == "lbfgs_lite":
            return make_optimizer("lbfgs_lite", self.lr, history=self.history)
        kw = {}
        if self.weight_decay is not None:
            kw["weight_decay"] = self.weight_decay
        return make_optimizer(self.optimizer, self.lr, **kw)

    def distance_spec(self, snapshot) -> DistanceSpec:
        return DistanceSpec.for_snapshot(snapshot, self.distance, self.sigma_mode, self.q_schedule,
                                         self.gamma, self.sigma_floor, self.reduction)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ReconstructionResult:
    X_recon: np.ndarray
    Y_recon: np.ndarray
    loss_trace: list
    iters_run: int
    wall_seconds: float
    best_iter: int = 0
    aborted: bool = False
    error: str | None = None

    @property
    def predicted_label(self) -> np.ndarray:
        return np.argmax(self.Y_recon, axis=-1)

    @property
    def best_loss(self) -> float:
        return self.loss_trace[self.best_iter]


def label_from_bias(snapshot, num_classes: int, batch: int, logit: float = 1.0) -> np.ndarray:
    """Soft-label start read off the output-bias gradient.

    That gradient is ``mean_b(p_b - q_b)``; the most negative entry is the most
    likely class, which gets ``logit`` while the others stay at zero. Only
    used for single-item snapshots; batches keep random soft labels.
    """
    name, g = snapshot.layer_grads[-1]
    if not name.endswith(".bias") or g.shape != (num_classes,):
        raise ValueError("snapshot has no output bias gradient to read a label from")
    Y = np.zeros((batch, num_classes))
    Y[:, int(np.argmin(g.data))] = logit
    return Y


def init_dummy(shape, mode: str = "normal", seed: int = 0, constant: float = 0.5, clamp: bool = True,
               rng: np.random.Generator | None = None, scale: float = 1.0) -> np.ndarray:
    """Starting point for the dummy input.

    ``normal`` draws ``N(0, scale^2)`` and clamps to ``[0, 1]`` when ``clamp``;
    ``constant`` fills with ``constant``.
    """
    if mode == "constant":
        return np.full(shape, float(constant))
    if mode != "normal":
        raise ValueError(f"unknown dummy init {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    x = scale * rng.standard_normal(shape)
    return np.clip(x, 0.0, 1.0) if clamp else x


class GradientMatchingObjective:
    """Distance between dummy and observed gradients as a function of a flat ``[X', Y']`` vector."""

    def __init__(self, spec: ModelSpec, weights, snapshot, dist_spec: DistanceSpec, batch_size: int):
        self.spec = spec
        self.params = as_trainable(weights)
        self.target = [g for _, g in snapshot.layer_grads]
        self.dist_spec = dist_spec
        self.x_shape = (batch_size, *spec.input_shape)
        self.y_shape = (batch_size, spec.num_classes)
        self.nx = int(np.prod(self.x_shape))
        self.evaluations = 0

    def split(self, z):
        return z[:self.nx].reshape(self.x_shape), z[self.nx:].reshape(self.y_shape)

    def join(self, X, Y):
        return np.concatenate([np.asarray(X, dtype=np.float64).reshape(-1), np.asarray(Y, dtype=np.float64).reshape(-1)])

    def __call__(self, z):
        self.evaluations += 1
        X, Y = self.split(z)
        Xt = Tensor(X, requires_grad=True)
        Yt = Tensor(Y, requires_grad=True)
        with T.enable_grad():
            l = loss(forward(self.spec, self.params, Xt), Yt)
            dummy_grads = T.grad(l, self.params, create_graph=True)
            d = distance(dummy_grads, self.target, self.dist_spec)
            gx, gy = T.grad(d, [Xt, Yt], allow_unused=True)
        return d.item(), self.join(gx.data, gy.data)


def _verify(spec, weights, snapshot):
    if snapshot.spec != spec:
        raise ChecksumMismatch("snapshot was captured on a different model spec")
    actual = serialization.weights_checksum(weights)
    if actual != snapshot.checksum:
        raise ChecksumMismatch(f"weight checksum {actual} does not match snapshot {snapshot.checksum}")


def run_attack(spec: ModelSpec, weights, snapshot, cfg: AttackConfig, *, init=None, observer=None) -> ReconstructionResult:
    """Reconstruct ``(X', Y')`` whose gradients match ``snapshot``.

    ``init`` optionally overrides the starting ``(X', Y')``. ``observer`` is
    called as ``observer(iteration, X', distance)`` after every iteration;
    the engine itself never touches ground truth. The best iterate
    seen is returned, not the last.
    """
    _verify(spec, weights, snapshot)
    start = time.perf_counter()
    batch = snapshot.batch_size
    objective = GradientMatchingObjective(spec, weights, snapshot, cfg.distance_spec(snapshot), batch)
    clamp = cfg.clamp and spec.is_image

    if init is None:
        rng = np.random.default_rng(cfg.seed)
        X0 = init_dummy(objective.x_shape, cfg.dummy_init, constant=cfg.constant, clamp=clamp, rng=rng,
                        scale=cfg.init_scale)
        Y0 = rng.standard_normal(objective.y_shape)
        if cfg.label_init == "bias" and batch == 1:
            Y0 = label_from_bias(snapshot, spec.num_classes, batch, cfg.label_logit)
    else:
        X0, Y0 = init
        X0 = np.clip(X0, 0.0, 1.0) if clamp else np.asarray(X0, dtype=np.float64)
    z = objective.join(X0, Y0)
    nx = objective.nx

    def project(v):
        if clamp:
            v = v.copy()
            np.clip(v[:nx], 0.0, 1.0, out=v[:nx])
        return v

    optimizer = cfg.build_optimizer()
    aborted, error = False, None
    trace = []
    it = 0
    try:
        f, g = objective(z)
    except NonFiniteError as exc:
        raise NonFiniteError(f"iteration 0: {exc.op}") from exc
    trace.append(f)
    best_f, best_z, best_iter = f, z, 0
    if observer is not None:
        observer(0, objective.split(z)[0], f)

    while it < cfg.max_iters and f >= cfg.stop_tol:
        try:
            z, f, g = optimizer.step(z, f, g, objective, project)
        except (NonFiniteError, FloatingPointError) as exc:
            aborted, error = True, f"non-finite value at iteration {it + 1}: {exc}"
            log.warning(error)
            break
        it += 1
        trace.append(f)
        if f < best_f:
            best_f, best_z, best_iter = f, z, it
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d distance %.6e", it, f)
        if observer is not None:
            observer(it, objective.split(z)[0], f)

    X, Y = objective.split(best_z)
    return ReconstructionResult(
        X_recon=X.copy(),
        Y_recon=Y.copy(),
        loss_trace=trace,
        iters_run=it,
        wall_seconds=time.perf_counter() - start,
        best_iter=best_iter,
        aborted=aborted,
        error=error,
    )


def run_attack_batched(spec, weights, snapshot, cfg: AttackConfig, batch_size: int, **kw) -> ReconstructionResult:
    """Joint reconstruction of a stacked dummy batch; item order is not identifiable."""
    if batch_size != snapshot.batch_size:
        raise ValueError(f"batch size {batch_size} != snapshot batch size {snapshot.batch_size}")
    return run_attack(spec, weights, snapshot, cfg, **kw)
