"""First- and quasi-second-order optimizers over a flat parameter vector.

Each optimizer exposes ``step(x, f, g, evaluate, project)`` returning the new
point together with its objective value and gradient. ``evaluate(x)`` returns
``(f, g)``; ``project(x)`` maps a candidate back onto the feasible set.
"""

from __future__ import annotations

import logging
from collections import deque

import numpy as np

log = logging.getLogger(__name__)


def _identity(x):
    return x


class LineSearchError(RuntimeError):
    """Backtracking could not find a decrease."""


class Adam:
    """Adam with bias correction; ``decoupled=True`` gives AdamW."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, decoupled=False):
        if not lr > 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = None
        self.v = None

    def update(self, x, g):
        """Pure moment update, no evaluation."""
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        if self.weight_decay and not self.decoupled:
            g = g + self.weight_decay * x
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        if self.weight_decay and self.decoupled:
            x = x * (1 - self.lr * self.weight_decay)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self, x, f, g, evaluate, project=_identity):
        x_new = project(self.update(x, g))
        f_new, g_new = evaluate(x_new)
        return x_new, f_new, g_new


def AdamW(lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    return Adam(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, decoupled=True)


class LBFGSLite:
    """Limited-memory BFGS with Armijo backtracking.

    The step starts at ``lr`` and is halved at most ``max_halvings`` times.
    If that fails, the history is cleared and a small gradient step is taken.
    """

    def __init__(self, lr=1.0, history=20, max_halvings=20, c1=1e-4, fallback_lr=1e-3):
        if not lr > 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.s_hist = deque(maxlen=history)
        self.y_hist = deque(maxlen=history)
        self.max_halvings = max_halvings
        self.c1 = c1
        self.fallback_lr = fallback_lr
        self.fallbacks = 0

    def direction(self, g):
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q

    def line_search(self, x, f, g, d, evaluate, project):
        t = self.lr
        for _ in range(self.max_halvings + 1):
            x_new = project(x + t * d)
            f_new, g_new = evaluate(x_new)
            if f_new <= f + self.c1 * min(0.0, g @ (x_new - x)):
                return x_new, f_new, g_new
            t *= 0.5
        raise LineSearchError("no sufficient decrease after backtracking")

    def step(self, x, f, g, evaluate, project=_identity):
        d = self.direction(g)
        if not g @ d < 0:
            self.s_hist.clear()
            self.y_hist.clear()
            d = -g
        try:
            x_new, f_new, g_new = self.line_search(x, f, g, d, evaluate, project)
        except LineSearchError:
            self.fallbacks += 1
            log.debug("line search failed; gradient fallback step")
            self.s_hist.clear()
            self.y_hist.clear()
            x_new = project(x - self.fallback_lr * g)
            f_new, g_new = evaluate(x_new)
            return x_new, f_new, g_new
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * max(1.0, np.sqrt((s @ s) * (y @ y))):
            self.s_hist.append(s)
            self.y_hist.append(y)
        else:
            # negative curvature: a stale history keeps a stale step scale
            self.s_hist.clear()
            self.y_hist.clear()
        return x_new, f_new, g_new


def make_optimizer(name: str, lr: float | None = None, **kw):
    if name == "adamw":
        return AdamW(lr=lr or 1e-3, **kw)
    if name == "adam":
        return Adam(lr=lr or 1e-3, **kw)
    if name == "lbfgs_lite":
        return LBFGSLite(lr=lr or 1.0, **kw)
    raise ValueError(f"unknown optimizer {name!r}")
