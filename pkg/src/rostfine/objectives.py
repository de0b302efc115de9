"""Training objectives over grade distributions.

MSE and JS-divergence both operate on normalized 5-bin distributions; the
per-sample loss averages over whichever heads are active.  The optional
diversity penalty is the mean absolute cosine similarity over embedding
pairs, pushing the feature vectors toward mutual orthogonality.  KL and JS
smooth their inputs with a small epsilon so one-hot labels do not produce
infinite divergences.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from rostfine.tensor import Tensor

GRADES = 5


@dataclass
class LossConfig:
    loss_kind: str = "mse"
    alpha: float = 0.0
    kl_epsilon: float = 1e-8

    def __post_init__(self):
        if self.loss_kind not in ("mse", "js"):
            raise ValueError(f"loss_kind must be 'mse' or 'js', got {self.loss_kind!r}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")
        if not 0 < self.kl_epsilon <= 1e-3:
            raise ValueError("kl_epsilon must lie in (0, 1e-3]")


def _as_distribution(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.shape != (GRADES,):
        raise ValueError(f"grade distributions have length {GRADES}, got shape {t.shape}")
    return t


def mse(predicted, target) -> Tensor:
    """Mean squared error over the five grade bins."""
    p = _as_distribution(predicted)
    y = _as_distribution(target)
    diff = p - y
    return (diff * diff).mean()


def kl(p, q, eps: float = 1e-8) -> Tensor:
    """Smoothed Kullback-Leibler divergence, natural log."""
    p = _as_distribution(p)
    q = _as_distribution(q)
    if np.any(p.data < 0) or np.any(q.data < 0):
        raise ValueError("distributions must be non-negative")
    ps = (p + eps) / (1.0 + GRADES * eps)
    qs = (q + eps) / (1.0 + GRADES * eps)
    return (ps * (ps.log() - qs.log())).sum()


def js(p, q, eps: float = 1e-8) -> Tensor:
    """Jensen-Shannon divergence: symmetric, bounded by ln 2."""
    p = _as_distribution(p)
    q = _as_distribution(q)
    m = (p + q) * 0.5
    return kl(p, m, eps) * 0.5 + kl(q, m, eps) * 0.5


def diversity(v_i: Tensor, v_j: Tensor) -> Tensor:
    """Absolute cosine similarity between two embeddings, in [0, 1]."""
    if not np.any(v_i.data) or not np.any(v_j.data):
        raise ValueError("cosine similarity is undefined for a zero vector")
    dot = (v_i * v_j).sum()
    norm_i = (v_i * v_i).sum().sqrt()
    norm_j = (v_j * v_j).sum().sqrt()
    return (dot / (norm_i * norm_j)).abs()


def head_loss(predictions: dict[str, Tensor], target, kind: str, eps: float = 1e-8) -> Tensor:
    """Base objective: MSE or JS averaged over the active heads."""
    if not predictions:
        raise ValueError("no active heads")
    fn = mse if kind == "mse" else js
    names = sorted(predictions)
    if kind == "mse":
        terms = [fn(predictions[n], target) for n in names]
    else:
        terms = [fn(predictions[n], target, eps) for n in names]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def diversity_loss(embeddings: dict[str, Tensor]) -> Tensor | None:
    """Mean absolute cosine over embedding pairs; None below two features."""
    names = sorted(embeddings)
    if len(names) < 2:
        return None
    terms = [diversity(embeddings[a], embeddings[b]) for a, b in combinations(names, 2)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def total_loss(output, target, config: LossConfig) -> Tensor:
    """Base loss plus the alpha-weighted diversity penalty."""
    if output.predictions:
        base = head_loss(output.predictions, target, config.loss_kind, config.kl_epsilon)
    else:
        # sum/concat aggregation: single combined prediction
        fn = mse if config.loss_kind == "mse" else js
        base = fn(output.final, target) if config.loss_kind == "mse" \
            else fn(output.final, target, config.kl_epsilon)
    if config.alpha == 0:
        return base
    div = diversity_loss(output.embeddings)
    if div is None:
        return base
    return base + div * config.alpha
