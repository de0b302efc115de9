"""Fine-grained branches over selected patches, plus the prediction heads.

The spatial branch re-attends within each frame's selected patches (one
shared block stack applied to every frame, summary token attached) and
averages the per-frame summary outputs.  The temporal branch attends once
across all selected patches of the whole clip and keeps the final summary
row.  Each active feature gets an independent affine head onto the 5-grade
simplex; 'sum' and 'concat' aggregation instead use a single dedicated
head over combined features.
"""

from __future__ import annotations

import numpy as np

from rostfine.encoder import LayerNorm, Linear, Mlp, ModelConfig, SelfAttention
from rostfine.selection import SelectedPatches
from rostfine.tensor import Tensor, concat, softmax, tile_rows

GRADES = 5


class BranchBlock:
    """Pre-LN attention + MLP block; strict mode drops the residuals."""

    def __init__(self, rng, cfg: ModelConfig, name: str):
        d = cfg.embed_dim
        dtype = cfg.np_dtype
        self.ln1 = LayerNorm(d, f"{name}.ln1", dtype)
        self.attn = SelfAttention(rng, d, cfg.heads, f"{name}.attn", dtype)
        self.ln2 = LayerNorm(d, f"{name}.ln2", dtype)
        self.mlp = Mlp(rng, d, int(d * cfg.mlp_ratio), f"{name}.mlp", dtype)

    def forward(self, x: Tensor, strict: bool) -> Tensor:
        if strict:
            out, _ = self.attn(self.ln1(x))
            return self.mlp(self.ln2(out))
        out, _ = self.attn(self.ln1(x))
        x = x + out
        return x + self.mlp(self.ln2(x))

    def parameters(self):
        out = {}
        for sub in (self.ln1, self.attn, self.ln2, self.mlp):
            out.update(sub.parameters())
        return out


class SpatialBranch:
    """Per-frame attention over selected patches; outputs one embedding."""

    def __init__(self, rng, cfg: ModelConfig, name: str = "fgs"):
        self.cfg = cfg
        self.blocks = [BranchBlock(rng, cfg, f"{name}.{i}") for i in range(cfg.depth)]

    def forward(self, selected: SelectedPatches, cls_token: Tensor) -> Tensor:
        cfg = self.cfg
        frames, k = selected.indices.shape
        d = cls_token.shape[-1]
        if selected.embeddings.shape[0] == 0:
            raise ValueError("spatial branch got an empty selection")
        per_frame = selected.embeddings.reshape((frames, k, d))
        seq = concat([tile_rows(cls_token.reshape((1, 1, d)), frames), per_frame], axis=1)
        for block in self.blocks:
            seq = block.forward(seq, cfg.strict_equations)
        cls_out = seq.slice_along(1, 0, 1).reshape((frames, d))
        if cfg.strict_equations:
            # literal 1/(K*T) factor over the T frame terms
            return cls_out.sum(axis=0) * (1.0 / (k * frames))
        return cls_out.mean(axis=0)

    def parameters(self):
        out = {}
        for block in self.blocks:
            out.update(block.parameters())
        return out


class TemporalBranch:
    """One attention pass across all selected patches of the clip."""

    def __init__(self, rng, cfg: ModelConfig, name: str = "fgt"):
        self.cfg = cfg
        self.blocks = [BranchBlock(rng, cfg, f"{name}.{i}") for i in range(cfg.depth)]

    def forward(self, selected: SelectedPatches, cls_token: Tensor) -> Tensor:
        if selected.embeddings.shape[0] == 0:
            raise ValueError("temporal branch got an empty selection")
        d = cls_token.shape[-1]
        seq = concat([cls_token, selected.embeddings], axis=0)
        seq = seq.reshape((1, seq.shape[0], d))
        for block in self.blocks:
            seq = block.forward(seq, self.cfg.strict_equations)
        return seq.slice_along(1, 0, 1).reshape((d,))

    def parameters(self):
        out = {}
        for block in self.blocks:
            out.update(block.parameters())
        return out


class GradeHead:
    """Affine map from an embedding onto the 5-grade simplex."""

    def __init__(self, rng, din: int, name: str, dtype=np.float64):
        self.proj = Linear(rng, din, GRADES, name, dtype)

    def __call__(self, v: Tensor) -> Tensor:
        logits = self.proj(v.reshape((1, v.size))).reshape((GRADES,))
        return softmax(logits, axis=-1)

    def parameters(self):
        return self.proj.parameters()


def project_heads(embeddings: dict[str, Tensor], heads: dict[str, GradeHead]) -> dict[str, Tensor]:
    """Run each feature embedding through its own head."""
    return {name: heads[name](v) for name, v in embeddings.items()}


def aggregate(
    predictions: dict[str, Tensor],
    embeddings: dict[str, Tensor],
    strategy: str,
    combined_head: GradeHead | None = None,
) -> Tensor:
    """Final predicted grade distribution.

    mean: elementwise average of the per-head distributions (stays on the
    simplex); sum/concat: combine the feature embeddings and apply the
    dedicated head, bypassing the per-head outputs.
    """
    if strategy == "mean":
        names = sorted(predictions)
        total = predictions[names[0]]
        for name in names[1:]:
            total = total + predictions[name]
        return total * (1.0 / len(names))
    if strategy in ("sum", "concat"):
        if combined_head is None:
            raise ValueError(f"strategy '{strategy}' needs its dedicated head")
        names = sorted(embeddings)
        vs = [embeddings[n] for n in names]
        if strategy == "sum":
            merged = vs[0]
            for v in vs[1:]:
                merged = merged + v
        else:
            merged = concat([v.reshape((1, v.size)) for v in vs], axis=1).reshape((-1,))
        return combined_head(merged)
    raise ValueError(f"unknown aggregation strategy '{strategy}'")
