"""Deterministic synthetic image classes used when no image directory is given."""

from __future__ import annotations

import numpy as np

KINDS = ("stripes", "checkerboard", "disk", "gradient")
SIZES = (4, 8, 16)


def _stripes(size, rng, canonical):
    period = 2 if canonical else int(rng.choice([2, 4] if size > 4 else [2]))
    phase = 0 if canonical else int(rng.integers(period))
    vertical = True if canonical else bool(rng.integers(2))
    idx = np.arange(size)
    line = (((idx + phase) // (period // 2)) % 2).astype(float)
    img = np.tile(line, (size, 1))
    return img if vertical else img.T


def _checkerboard(size, rng, canonical):
    cell = 1 if canonical else int(rng.choice([1, 2] if size > 4 else [1]))
    shift = 0 if canonical else int(rng.integers(2))
    i, j = np.indices((size, size))
    return (((i // cell) + (j // cell) + shift) % 2).astype(float)


def _disk(size, rng, canonical):
    c = (size - 1) / 2.0
    if canonical:
        cy, cx, r = c, c, size / 3.0
    else:
        cy, cx = c + rng.uniform(-size / 8, size / 8, size=2)
        r = rng.uniform(size / 4.0, size / 2.5)
    i, j = np.indices((size, size))
    return ((i - cy) ** 2 + (j - cx) ** 2 <= r * r).astype(float)


def _gradient(size, rng, canonical):
    angle = 0.0 if canonical else rng.uniform(0, 2 * np.pi)
    i, j = np.indices((size, size)) / max(size - 1, 1)
    v = np.cos(angle) * j + np.sin(angle) * i
    v = v - v.min()
    return v / v.max() if v.max() > 0 else v


_MAKERS = {"stripes": _stripes, "checkerboard": _checkerboard, "disk": _disk, "gradient": _gradient}


def builtin_patterns(kind: str = "mixed", size: int = 8, seed: int = 0, per_class: int = 1, channels: int = 1):
    """Return ``(X, labels)`` with ``X`` shaped ``(N, channels, size, size)`` in ``[0, 1]``.

    ``kind="mixed"`` yields ``per_class`` items of every class (labels 0..3 in
    ``KINDS`` order); a single kind yields ``per_class`` items of that class.
    The first item of each class is the canonical pattern; later items are
    seeded variations.
    """
    if size not in SIZES:
        raise ValueError(f"size must be one of {SIZES}")
    if kind != "mixed" and kind not in KINDS:
        raise ValueError(f"unknown pattern kind {kind!r}")
    rng = np.random.default_rng(seed)
    kinds = KINDS if kind == "mixed" else (kind,)
    images, labels = [], []
    for k in kinds:
        for n in range(per_class):
            img = _MAKERS[k](size, rng, canonical=(n == 0))
            if channels > 1:
                tint = np.ones(channels) if n == 0 else rng.uniform(0.4, 1.0, size=channels)
                img = img[None] * tint[:, None, None]
            else:
                img = img[None]
            images.append(img)
            labels.append(KINDS.index(k))
    return np.stack(images).astype(np.float64), np.asarray(labels, dtype=np.int64)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out
