"""The assembled video model: encoder -> patch selection -> branches -> heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rostfine.branches import GradeHead, SpatialBranch, TemporalBranch, aggregate, project_heads
from rostfine.encoder import Encoder, ModelConfig, patchify
from rostfine.selection import SelectedPatches, aggregate_cls_scores, select_topk
from rostfine.tensor import Tensor


@dataclass
class ModelOutput:
    """Everything one forward pass produces."""

    embeddings: dict[str, Tensor]          # active subset of {g, s, t} -> (d,)
    predictions: dict[str, Tensor]         # per-head grade distributions
    final: Tensor                          # aggregated grade distribution, (5,)
    attn: list = field(default_factory=list)      # per-layer spatial maps
    selected: SelectedPatches | None = None

    def cosines(self) -> dict[str, float]:
        """Absolute pairwise cosine similarities of the active embeddings."""
        names = sorted(self.embeddings)
        out = {}
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                va, vb = self.embeddings[a].data, self.embeddings[b].data
                denom = np.linalg.norm(va) * np.linalg.norm(vb)
                out[f"{a}{b}"] = float(abs(np.dot(va, vb)) / denom)
        return out


class RoSTFine:
    """Grade-distribution video model with role-separated feature branches."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        self.needs_selection = "s" in cfg.features or "t" in cfg.features
        self.spatial = SpatialBranch(rng, cfg) if "s" in cfg.features else None
        self.temporal = TemporalBranch(rng, cfg) if "t" in cfg.features else None
        self.heads: dict[str, GradeHead] = {}
        self.combined_head: GradeHead | None = None
        if cfg.aggregation == "mean":
            for name in cfg.features:
                self.heads[name] = GradeHead(rng, cfg.embed_dim, f"head.{name}", cfg.np_dtype)
        else:
            din = cfg.embed_dim * (len(cfg.features) if cfg.aggregation == "concat" else 1)
            self.combined_head = GradeHead(rng, din, f"head.{cfg.aggregation}", cfg.np_dtype)

    def forward_clip(self, clip: np.ndarray) -> ModelOutput:
        return self.forward(patchify(clip, self.cfg.patch))

    def forward(self, patches: np.ndarray) -> ModelOutput:
        cfg = self.cfg
        enc = self.encoder.forward(patches)
        cls_token = enc.tokens.slice_along(0, 0, 1)     # (1, d)

        embeddings: dict[str, Tensor] = {}
        selected = None
        if "g" in cfg.features:
            embeddings["g"] = cls_token.reshape((cfg.embed_dim,))
        if self.needs_selection:
            scores = aggregate_cls_scores(enc.attn)
            selected = select_topk(scores, enc.tokens, cfg.top_k)
            if self.spatial is not None:
                embeddings["s"] = self.spatial.forward(selected, cls_token)
            if self.temporal is not None:
                embeddings["t"] = self.temporal.forward(selected, cls_token)

        if cfg.aggregation == "mean":
            predictions = project_heads(embeddings, self.heads)
        else:
            predictions = {}
        final = aggregate(predictions, embeddings, cfg.aggregation, self.combined_head)
        return ModelOutput(
            embeddings=embeddings,
            predictions=predictions,
            final=final,
            attn=enc.attn,
            selected=selected,
        )

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.parameters())
        if self.spatial is not None:
            out.update(self.spatial.parameters())
        if self.temporal is not None:
            out.update(self.temporal.parameters())
        for head in self.heads.values():
            out.update(head.parameters())
        if self.combined_head is not None:
            out.update(self.combined_head.parameters())
        return out
