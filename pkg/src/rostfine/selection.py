"""Patch selection from summary-token attention.

Scores every patch by how strongly the summary token attends to it in the
last two encoder layers, then keeps the top K patch embeddings per frame.
Selection indices are constants within a step (top-k is piecewise
constant); gradients flow through the gathered embeddings into the
encoder tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from rostfine.tensor import Tensor


@dataclass
class SelectedPatches:
    """Top-K patch embeddings per frame with their provenance.

    embeddings: (T*K, d) tensor, frame-major, within a frame by descending
    score; indices: (T, K) patch indices into each frame's raster order.
    """

    embeddings: Tensor
    indices: np.ndarray


def aggregate_cls_scores(attn: Sequence[np.ndarray]) -> np.ndarray:
    """Per-patch scores: summary-row attention summed over the last two layers.

    attn is the per-layer stack of head-averaged spatial maps, each of
    shape (T, 1+N, 1+N).  Returns a (T, N) array with entries in [0, 2].
    """
    if len(attn) < 2:
        raise ValueError(f"need attention maps from at least two layers, got {len(attn)}")
    last, prev = attn[-1], attn[-2]
    return prev[:, 0, 1:] + last[:, 0, 1:]


def select_topk(scores: np.ndarray, tokens: Tensor, k: int) -> SelectedPatches:
    """Keep the K highest-scoring patch embeddings per frame.

    Ties break toward the lower patch index; within each frame the result
    is ordered by descending score.  ``tokens`` is the encoder output
    (row 0 is the summary token, then T*N patch rows frame-major).
    """
    frames, n = scores.shape
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    if tokens.shape[0] != 1 + frames * n:
        raise ValueError(
            f"tokens rows {tokens.shape[0]} do not match scores {frames}x{n}"
        )
    # stable argsort on negated scores: descending, ties by lower index
    order = np.argsort(-scores, axis=1, kind="stable")
    indices = order[:, :k]
    flat = (1 + np.arange(frames)[:, None] * n + indices).reshape(-1)
    return SelectedPatches(embeddings=tokens.gather_rows(flat), indices=indices)
