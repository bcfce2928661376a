"""Gradient inversion attacks on a small double-backprop autodiff engine."""

from .attack import AttackConfig, ReconstructionResult, run_attack, run_attack_batched
from .distance import DistanceSpec, distance
from .estimators import GradientInversionAttack, TokenRecovery, VictimClient
from .experiment import run_experiment
from .metrics import MetricReport, match_batch, mse, psnr, ssim
from .models import ModelSpec, WeightInit, forward, init_weights
from .tensor import Tensor, grad, no_grad
from .text import Vocabulary, pseudoinverse, recover_tokens, run_text_attack
from .victim import GradientSnapshot, capture, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "DistanceSpec", "GradientInversionAttack", "GradientSnapshot", "MetricReport", "ModelSpec",
    "ReconstructionResult", "Tensor", "TokenRecovery", "VictimClient", "Vocabulary", "WeightInit", "capture",
    "distance", "forward", "grad", "init_weights", "match_batch", "mse", "no_grad", "pseudoinverse", "psnr",
    "recover_tokens", "run_attack", "run_attack_batched", "run_experiment", "run_text_attack", "ssim", "train",
]
