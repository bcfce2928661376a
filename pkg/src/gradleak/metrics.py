"""Reconstruction quality: MSE, PSNR, global SSIM and batch assignment."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

K1, K2 = 0.01, 0.03
EXHAUSTIVE_MAX = 8


def _pair(a, b, op):
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(x_recon, x_truth) -> float:
    a, b = _pair(x_recon, x_truth, "mse")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err: float, max_value: float = 1.0) -> float:
    if err <= 0:
        return math.inf
    return 20.0 * math.log10(max_value) - 10.0 * math.log10(err)


def psnr(x_recon, x_truth, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect match."""
    return psnr_from_mse(mse(x_recon, x_truth), max_value)


def _ssim_single(a, b, data_range):
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    var_a = ((a - mu_a) ** 2).mean()
    var_b = ((b - mu_b) ** 2).mean()
    cov = ((a - mu_a) * (b - mu_b)).mean()
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(x_recon, x_truth, data_range: float = 1.0) -> float:
    """Single-window SSIM using whole-image population moments.

    A 3-D input is read as ``(C, H, W)`` and the per-channel values are averaged.
    """
    a, b = _pair(x_recon, x_truth, "ssim")
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[c], b[c], data_range) for c in range(a.shape[0])]))
    return float(_ssim_single(a, b, data_range))


@dataclass
class MetricReport:
    mse: float
    psnr: float
    ssim: float
    assignment: list
    per_item: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if isinstance(v, float) and math.isinf(v) else v

        return {
            "mse": self.mse,
            "psnr_db": enc(self.psnr),
            "ssim": self.ssim,
            "assignment": list(self.assignment),
            "per_item": [{k: enc(v) for k, v in item.items()} for item in self.per_item],
        }


def cost_matrix(recon_batch, truth_batch) -> np.ndarray:
    """``C[i, j]`` = MSE between recon item ``i`` and truth item ``j``."""
    r, t = _pair(recon_batch, truth_batch, "match_batch")
    r = r.reshape(len(r), -1)
    t = t.reshape(len(t), -1)
    return ((r[:, None, :] - t[None, :, :]) ** 2).mean(axis=-1)


def best_assignment(cost: np.ndarray) -> list:
    """Recon index ``i`` -> truth index ``perm[i]`` minimising total cost.

    Exhaustive (first minimum in lexicographic order) up to 8 items; greedy
    nearest-unmatched above that.
    """
    b = cost.shape[0]
    if b <= EXHAUSTIVE_MAX:
        best, best_cost = None, math.inf
        rows = np.arange(b)
        for perm in itertools.permutations(range(b)):
            c = cost[rows, perm].sum()
            if c < best_cost:
                best, best_cost = perm, c
        return list(best)
    assignment = [-1] * b
    free = set(range(b))
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), b)
        if assignment[i] == -1 and j in free:
            assignment[i] = j
            free.discard(j)
    return assignment


def match_batch(recon_batch, truth_batch, max_value: float = 1.0) -> MetricReport:
    r, t = _pair(recon_batch, truth_batch, "match_batch")
    assignment = best_assignment(cost_matrix(r, t))
    items = []
    for i, j in enumerate(assignment):
        e = mse(r[i], t[j])
        items.append({"recon": i, "truth": j, "mse": e, "psnr": psnr_from_mse(e, max_value), "ssim": ssim(r[i], t[j], max_value)})
    e = float(np.mean([it["mse"] for it in items]))
    return MetricReport(
        mse=e,
        psnr=psnr_from_mse(e, max_value),
        ssim=float(np.mean([it["ssim"] for it in items])),
        assignment=assignment,
        per_item=items,
    )
