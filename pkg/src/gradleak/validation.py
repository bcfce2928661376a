"""Input checks shared by the estimators and the experiment driver."""

from __future__ import annotations

import numpy as np


def check_finite_array(x, name: str = "X", ndim: int | None = None) -> np.ndarray:
    """Float64 copy of ``x``; rejects NaN/Inf and, if given, the wrong rank."""
    a = np.asarray(x, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def check_input_batch(X, input_shape, name: str = "X") -> np.ndarray:
    """Promote a single item to a batch of one and check the per-item shape."""
    a = check_finite_array(X, name)
    shape = tuple(input_shape)
    if a.shape == shape:
        a = a[None]
    if a.shape[1:] != shape:
        raise ValueError(f"{name} items must have shape {shape}, got {a.shape[1:]}")
    return a


def check_unit_range(X, name: str = "X") -> np.ndarray:
    a = check_finite_array(X, name)
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return a


def check_labels(y, num_classes: int, n: int | None = None) -> np.ndarray:
    """Accept integer labels or a ``(n, C)`` score matrix; return one-hot rows."""
    a = np.asarray(y)
    if a.ndim == 2:
        if a.shape[1] != num_classes:
            raise ValueError(f"label matrix needs {num_classes} columns, got {a.shape[1]}")
        out = check_finite_array(a, "y")
    else:
        a = np.atleast_1d(a)
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.mod(a, 1) == 0):
                raise ValueError("integer class labels expected")
            a = a.astype(np.int64)
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"labels must be in [0, {num_classes})")
        out = np.zeros((a.size, num_classes))
        out[np.arange(a.size), a] = 1.0
    if n is not None and out.shape[0] != n:
        raise ValueError(f"got {out.shape[0]} labels for {n} inputs")
    return out


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
