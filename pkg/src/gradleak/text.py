"""Token recovery: attack in embedding space, then map embeddings back to the vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, run_attack
from .models import ModelSpec

RIDGE = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, cond: float):
        super().__init__(f"normal matrix is singular beyond ridge rescue (condition ~ {cond:.3e})")
        self.cond = cond


@dataclass
class Vocabulary:
    tokens: list
    embed_matrix: np.ndarray  # (vocab_size, d)

    def __post_init__(self):
        self.embed_matrix = np.asarray(self.embed_matrix, dtype=np.float64)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token strings must be unique")
        if self.embed_matrix.shape[0] != len(self.tokens):
            raise ValueError("embedding rows must match vocabulary size")
        if self.embed_matrix.shape[0] <= self.embed_matrix.shape[1]:
            raise ValueError("vocabulary must be larger than the embedding dimension")

    @property
    def dim(self) -> int:
        return self.embed_matrix.shape[1]

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def random(cls, tokens, dim: int, seed: int = 0, lo: float = -0.5, hi: float = 0.5) -> "Vocabulary":
        """Uniformly initialised embedding table."""
        rng = np.random.default_rng(seed)
        return cls(list(tokens), rng.uniform(lo, hi, size=(len(tokens), dim)))

    @classmethod
    def from_file(cls, path, dim: int, seed: int = 0) -> "Vocabulary":
        """One token per line; index = line number. Blank lines are skipped."""
        tokens = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
        return cls.random(tokens, dim, seed)

    def ids(self, words) -> list:
        index = {t: i for i, t in enumerate(self.tokens)}
        return [index[w] for w in words]

    def embed(self, token_ids) -> np.ndarray:
        return self.embed_matrix[np.asarray(token_ids, dtype=np.int64)]


@dataclass
class TextReconstruction:
    recovered_ids: list
    recovered_tokens: list
    token_scores: np.ndarray  # (seq_len, vocab_size)
    match_mask: list | None = None
    truth_tokens: list | None = None
    attack: object = field(default=None, repr=False)

    @property
    def matches(self) -> int:
        return int(sum(self.match_mask)) if self.match_mask is not None else 0

    def to_dict(self) -> dict:
        positions = []
        for i, tok in enumerate(self.recovered_tokens):
            entry = {"recovered": tok}
            if self.truth_tokens is not None:
                entry["truth"] = self.truth_tokens[i]
                entry["match"] = bool(self.match_mask[i])
            positions.append(entry)
        return {"positions": positions}

    def render(self) -> str:
        """Plain-text rendering; matching tokens are wrapped in ``*``."""
        words = []
        for i, tok in enumerate(self.recovered_tokens):
            words.append(f"*{tok}*" if self.match_mask is not None and self.match_mask[i] else tok)
        lines = ["recovered: " + " ".join(words)]
        if self.truth_tokens is not None:
            lines.append("truth:     " + " ".join(self.truth_tokens))
            lines.append(f"matched:   {self.matches}/{len(self.recovered_tokens)}")
        return "\n".join(lines)


def pseudoinverse(W, ridge: float = RIDGE) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a tall full-column-rank matrix.

    Solves the ridge-stabilised normal equations ``(W^T W + ridge I) X = W^T``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] < W.shape[1]:
        raise ValueError(f"pseudoinverse expects a tall matrix, got {W.shape}")
    normal = W.T @ W + ridge * np.eye(W.shape[1])
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError(cond)
    return np.linalg.solve(normal, W.T)


def token_scores(E, W, W_pinv=None) -> np.ndarray:
    """Per-position vocabulary scores for reconstructed embeddings ``E``.

    The pseudoinverse coefficients ``E W^+`` are divided by the square root of
    each token's leverage ``diag(W W^+)``. By Cauchy-Schwarz the exact
    embedding of token ``t`` then scores highest at ``t``.
    """
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    W = np.asarray(W, dtype=np.float64)
    if E.shape[1] != W.shape[1]:
        raise ValueError(f"embedding dim {E.shape[1]} does not match vocabulary dim {W.shape[1]}")
    P = W_pinv if W_pinv is not None else pseudoinverse(W)
    coeff = E @ P
    leverage = np.einsum("ij,ji->i", W, P)
    return coeff / np.sqrt(np.maximum(leverage, np.finfo(float).tiny))


def recover_tokens(E_recon, vocab: Vocabulary, truth_ids=None) -> TextReconstruction:
    """Argmax token per position; ties go to the lowest vocabulary index."""
    scores = token_scores(E_recon, vocab.embed_matrix)
    ids = [int(i) for i in np.argmax(scores, axis=1)]
    rec = TextReconstruction(ids, [vocab.tokens[i] for i in ids], scores)
    if truth_ids is not None:
        truth_ids = list(truth_ids)
        if len(truth_ids) != len(ids):
            raise ValueError("truth length differs from reconstruction length")
        rec.match_mask = [a == b for a, b in zip(ids, truth_ids)]
        rec.truth_tokens = [vocab.tokens[i] for i in truth_ids]
    return rec


def text_label(token_ids, num_classes: int) -> np.ndarray:
    """Synthetic class target: the last token's id modulo ``num_classes``, one-hot."""
    y = np.zeros((1, num_classes))
    y[0, int(token_ids[-1]) % num_classes] = 1.0
    return y


def run_text_attack(spec: ModelSpec, weights, vocab: Vocabulary, snapshot, cfg: AttackConfig,
                    truth_ids=None, **kw) -> TextReconstruction:
    """Optimise an unconstrained dummy embedding, then recover tokens from the best iterate.

    ``truth_ids`` is only used to score the recovered tokens afterwards.
    """
    if spec.is_image:
        raise ValueError("text attack needs a text model spec")
    if spec.input_shape[1] != vocab.dim:
        raise ValueError("model embedding dim does not match vocabulary")
    result = run_attack(spec, weights, snapshot, cfg, **kw)
    rec = recover_tokens(result.X_recon[0], vocab, truth_ids)
    rec.attack = result
    return rec
