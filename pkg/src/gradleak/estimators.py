"""scikit-learn style wrappers over the functional core.

``VictimClient`` trains a model and shares gradients, ``GradientInversionAttack``
reconstructs data from a snapshot, ``TokenRecovery`` maps embeddings back to
vocabulary ids. Hyper-parameters go to ``__init__``; learned state ends in ``_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .attack import AttackConfig, run_attack
from .models import ModelSpec, WeightInit, forward, init_weights
from .text import pseudoinverse, token_scores
from .validation import (check_choice, check_finite_array, check_input_batch, check_labels,
                         check_positive_int)
from .victim import capture, train


class VictimClient(BaseEstimator):
    """A federated participant: initialise, optionally train, then share gradients."""

    def __init__(self, spec: ModelSpec | None = None, init_scheme="uniform", epochs=0, lr=0.1,
                 batch_size=1, label_scale=1.0, seed=0):
        self.spec = spec
        self.init_scheme = init_scheme
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.label_scale = label_scale
        self.seed = seed

    def _validate(self):
        if not isinstance(self.spec, ModelSpec):
            raise ValueError("spec must be a ModelSpec")
        check_positive_int(self.epochs, "epochs", minimum=0)
        check_positive_int(self.batch_size, "batch_size")

    def fit(self, X, y):
        self._validate()
        X = check_input_batch(X, self.spec.input_shape)
        Y = check_labels(y, self.spec.num_classes, len(X))
        weights = init_weights(self.spec, WeightInit(self.init_scheme, seed=self.seed))
        self.weights_, self.history_ = train(self.spec, weights, (X, Y), self.epochs, self.lr,
                                             batch_size=self.batch_size, label_scale=self.label_scale,
                                             seed=self.seed)
        return self

    def share_gradients(self, X, y):
        """Gradient snapshot of the current weights on the private batch ``(X, y)``."""
        check_is_fitted(self, "weights_")
        X = check_input_batch(X, self.spec.input_shape)
        Y = check_labels(y, self.spec.num_classes, len(X))
        return capture(self.spec, self.weights_, X, Y, label_scale=self.label_scale,
                       epochs=self.epochs, seed=self.seed)

    def decision_function(self, X):
        check_is_fitted(self, "weights_")
        X = check_input_batch(X, self.spec.input_shape)
        with T.no_grad():
            return forward(self.spec, self.weights_, T.Tensor(X)).data

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)


class GradientInversionAttack(BaseEstimator):
    """Gradient-matching reconstruction. ``distance="sapag"`` or ``"dlg"``.

    ``fit(snapshot, weights)`` runs the attack; afterwards ``X_`` holds the
    reconstructed inputs, ``y_`` the recovered labels and ``loss_trace_`` the
    distance per iteration.
    """

    def __init__(self, distance="sapag", optimizer="lbfgs_lite", max_iters=None, lr=None,
                 dummy_init="normal", label_init="bias", sigma_mode="per_layer", q_schedule="harmonic",
                 reduction="elementwise", seed=0):
        self.distance = distance
        self.optimizer = optimizer
        self.max_iters = max_iters
        self.lr = lr
        self.dummy_init = dummy_init
        self.label_init = label_init
        self.sigma_mode = sigma_mode
        self.q_schedule = q_schedule
        self.reduction = reduction
        self.seed = seed

    def config(self) -> AttackConfig:
        check_choice(self.distance, {"sapag", "dlg", "euclidean"}, "distance")
        return AttackConfig(distance=self.distance, optimizer=self.optimizer, max_iters=self.max_iters,
                            lr=self.lr, dummy_init=self.dummy_init, label_init=self.label_init,
                            sigma_mode=self.sigma_mode, q_schedule=self.q_schedule,
                            reduction=self.reduction, seed=self.seed, log_every=0)

    def fit(self, snapshot, weights, init=None):
        self.result_ = run_attack(snapshot.spec, weights, snapshot, self.config(), init=init)
        self.X_ = self.result_.X_recon
        self.y_ = self.result_.predicted_label
        self.loss_trace_ = self.result_.loss_trace
        return self

    def transform(self, snapshot, weights):
        return self.fit(snapshot, weights).X_

    fit_transform = transform

    def predict(self, snapshot=None, weights=None):
        """Recovered labels; reruns the attack when a new snapshot is given."""
        if snapshot is not None:
            self.fit(snapshot, weights)
        check_is_fitted(self, "y_")
        return self.y_


class TokenRecovery(TransformerMixin, BaseEstimator):
    """Pseudoinverse token lookup: ``fit(W)`` on the embedding table, ``transform(E)`` gives ids."""

    def __init__(self, ridge=1e-10):
        self.ridge = ridge

    def fit(self, W, y=None):
        W = check_finite_array(W, "W", ndim=2)
        self.embed_matrix_ = W
        self.pinv_ = pseudoinverse(W, self.ridge)
        return self

    def decision_function(self, E):
        check_is_fitted(self, "pinv_")
        E = check_finite_array(np.atleast_2d(E), "E", ndim=2)
        return token_scores(E, self.embed_matrix_, self.pinv_)

    def transform(self, E):
        return np.argmax(self.decision_function(E), axis=1)

    predict = transform
