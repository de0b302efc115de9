"""Attention rollout heatmaps and grayscale PGM export.

Rollout multiplies residual-adjusted attention matrices layer by layer:
each map is averaged with the identity and row-renormalized, then the
products accumulate token-to-token influence.  The heatmap is the summary
row restricted to patch columns, renormalized to sum to one.
"""

from __future__ import annotations

import numpy as np

from rostfine.netpbm import write_pgm


class RolloutError(ValueError):
    """Attention stack is malformed for rollout."""


class DegenerateHeatmapError(RolloutError):
    """All summary-to-patch mass vanished; nothing to visualize."""


def attention_rollout(attn) -> np.ndarray:
    """Patch heatmap (N values, sums to 1) from one frame's per-layer maps."""
    maps = [np.asarray(a, dtype=float) for a in attn]
    if not maps:
        raise RolloutError("empty attention stack")
    size = maps[0].shape[0]
    rollout = None
    for layer, a in enumerate(maps):
        if a.ndim != 2 or a.shape != (size, size):
            raise RolloutError(f"layer {layer} map has shape {a.shape}, expected ({size}, {size})")
        if np.abs(a.sum(axis=-1) - 1.0).max() > 1e-4:
            raise RolloutError(f"layer {layer} attention rows are not stochastic")
        adjusted = 0.5 * a + 0.5 * np.eye(size)
        adjusted /= adjusted.sum(axis=-1, keepdims=True)
        rollout = adjusted if rollout is None else adjusted @ rollout
    heat = rollout[0, 1:]
    total = heat.sum()
    if total <= 0.0:
        raise DegenerateHeatmapError("summary token kept all mass; heatmap is all zeros")
    return heat / total


def heatmap_to_image(heatmap, grid: tuple[int, int], patch: int) -> np.ndarray:
    """Nearest-neighbor upsample of the patch grid, min-max scaled to 0..255.

    A constant heatmap maps to mid-gray (128) since min-max scaling is
    degenerate there.
    """
    rows, cols = grid
    heatmap = np.asarray(heatmap, dtype=float)
    if heatmap.size != rows * cols:
        raise ValueError(f"heatmap of {heatmap.size} values does not fill a {rows}x{cols} grid")
    cells = heatmap.reshape(rows, cols)
    lo, hi = cells.min(), cells.max()
    if hi > lo:
        scaled = np.round((cells - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.full_like(cells, 128.0)
    return np.kron(scaled, np.ones((patch, patch))).astype(np.uint8)


def export_heatmap(heatmap, grid: tuple[int, int], patch: int, path) -> None:
    """Write the upsampled heatmap as a binary (P5) PGM file."""
    write_pgm(path, heatmap_to_image(heatmap, grid, patch))
