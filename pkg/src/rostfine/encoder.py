"""Video encoder: patchify, embed, divided space-time attention blocks.

The encoder turns a T x H x W x 3 clip into (1 + N*T) token embeddings.
Each block runs temporal attention (same patch position across frames,
summary token excluded), then spatial attention (within a frame, summary
token shared across frames with its updates averaged), then an MLP.  All
sublayers use pre-normalization with residual connections by default; the
``strict_equations`` switch drops the residuals and applies the literal
MLP(LN(MHSA(LN(x)))) composition instead.

Per-layer spatial attention maps (head-averaged, one per frame) are
recorded for patch selection and rollout visualization; they are plain
numpy arrays detached from the gradient graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from rostfine.tensor import (
    ShapeError,
    Tensor,
    concat,
    layer_norm,
    linear,
    softmax,
    tile_rows,
)

FEATURE_NAMES = ("g", "s", "t")
AGGREGATIONS = ("mean", "sum", "concat")
LOSS_KINDS = ("mse", "js")


@dataclass
class ModelConfig:
    """All model hyperparameters; validated on construction."""

    frames: int = 8              # T
    height: int = 32             # frame height in pixels
    width: int = 32
    patch: int = 8               # P, patch side length
    embed_dim: int = 32          # d
    depth: int = 2               # L, encoder depth and branch depth
    heads: int = 4               # attention heads
    mlp_ratio: float = 4.0
    top_k: int = 4               # K, patches kept per frame
    alpha: float = 0.0           # diversity loss weight
    loss_kind: str = "mse"
    aggregation: str = "mean"
    features: tuple[str, ...] = ("g", "s", "t")
    strict_equations: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.features = tuple(self.features)
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.height % self.patch != 0 or self.width % self.patch != 0:
            raise ValueError(
                f"frame size {self.height}x{self.width} must be divisible by patch {self.patch}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2 (patch selection reads the last two layers)")
        if not 1 <= self.top_k <= self.patches_per_frame:
            raise ValueError(f"top_k must be in [1, {self.patches_per_frame}], got {self.top_k}")
        if not (np.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError("alpha must be finite and >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if not self.features or any(f not in FEATURE_NAMES for f in self.features):
            raise ValueError(f"features must be a non-empty subset of {FEATURE_NAMES}")
        if len(set(self.features)) != len(self.features):
            raise ValueError("features must not repeat")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    @property
    def patches_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def tokens(self) -> int:
        return 1 + self.patches_per_frame * self.frames

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass
class EncoderOutput:
    """Token embeddings plus the per-layer spatial attention stack."""

    tokens: Tensor                      # (1 + N*T, d)
    attn: list = field(default_factory=list)  # L arrays of shape (T, 1+N, 1+N)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def projection_init(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Fan-in-scaled truncated normal for weight matrices.

    Plain SGD from scratch stalls under a flat tiny std: the signal (and
    its gradient) shrinks with every 0.02-scale matmul.  Scaling by
    1/sqrt(fan_in) keeps activations O(1) through the stack.
    """
    return trunc_normal(rng, shape, std=1.0 / np.sqrt(shape[0]), dtype=dtype)


class Linear:
    def __init__(self, rng, din: int, dout: int, name: str, dtype=np.float64):
        self.w = Tensor(projection_init(rng, (din, dout), dtype=dtype), requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)

    def parameters(self):
        return {self.w.name: self.w, self.b.name: self.b}


class LayerNorm:
    def __init__(self, d: int, name: str, dtype=np.float64):
        self.gamma = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}


class SelfAttention:
    """Multi-head self-attention over batched (B, S, d) sequences."""

    def __init__(self, rng, d: int, heads: int, name: str, dtype=np.float64):
        self.heads = heads
        self.q = Linear(rng, d, d, f"{name}.q", dtype)
        self.k = Linear(rng, d, d, f"{name}.k", dtype)
        self.v = Linear(rng, d, d, f"{name}.v", dtype)
        self.o = Linear(rng, d, d, f"{name}.o", dtype)

    def __call__(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        batch, seq, d = x.shape
        h = self.heads
        dh = d // h
        scale = 1.0 / np.sqrt(dh)

        def split(t: Tensor) -> Tensor:
            # (B, S, d) -> (B*h, S, dh)
            return t.reshape((batch, seq, h, dh)).transpose((0, 2, 1, 3)).reshape((batch * h, seq, dh))

        q = split(self.q(x)) * scale
        k = split(self.k(x))
        v = split(self.v(x))
        attn = softmax(q @ k.transpose((0, 2, 1)), axis=-1)
        ctx = attn @ v
        merged = ctx.reshape((batch, h, seq, dh)).transpose((0, 2, 1, 3)).reshape((batch, seq, d))
        maps = attn.data.reshape(batch, h, seq, seq).mean(axis=1)
        return self.o(merged), maps

    def parameters(self):
        out = {}
        for lin in (self.q, self.k, self.v, self.o):
            out.update(lin.parameters())
        return out


class Mlp:
    def __init__(self, rng, d: int, hidden: int, name: str, dtype=np.float64):
        self.fc1 = Linear(rng, d, hidden, f"{name}.fc1", dtype)
        self.fc2 = Linear(rng, hidden, d, f"{name}.fc2", dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def parameters(self):
        return {**self.fc1.parameters(), **self.fc2.parameters()}


class PatchEmbedder:
    """Learnable projection, positional table and summary token ([CLS])."""

    def __init__(self, rng, cfg_like, name: str = "embed"):
        cfg = cfg_like
        d, p = cfg.embed_dim, cfg.patch
        dtype = cfg.np_dtype
        tokens = 1 + cfg.patches_per_frame * cfg.frames
        # fan-in of the projection is the patch vector length 3*P*P
        self.projection = Tensor(
            trunc_normal(rng, (d, 3 * p * p), std=1.0 / np.sqrt(3 * p * p), dtype=dtype),
            requires_grad=True, name=f"{name}.projection"
        )
        self.positions = Tensor(
            trunc_normal(rng, (tokens, d), dtype=dtype), requires_grad=True, name=f"{name}.positions"
        )
        self.cls = Tensor(
            trunc_normal(rng, (1, d), dtype=dtype), requires_grad=True, name=f"{name}.cls"
        )
        self.tokens = tokens

    def parameters(self):
        return {t.name: t for t in (self.projection, self.positions, self.cls)}


def patchify(clip: np.ndarray, patch: int) -> np.ndarray:
    """Split a (T, H, W, 3) clip into N*T flattened patch vectors.

    Patches are raster-ordered within each frame and frame-major overall;
    each vector is channel-major then row-major, length 3*P*P.
    """
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[-1] != 3:
        raise ShapeError(f"expected a (T, H, W, 3) clip, got {clip.shape}")
    t, h, w, _ = clip.shape
    if h % patch != 0 or w % patch != 0:
        raise ShapeError(f"frame size {h}x{w} must be divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    # (T, gh, P, gw, P, 3) -> (T, gh, gw, 3, P, P) -> (N*T, 3*P*P)
    blocks = clip.reshape(t, gh, patch, gw, patch, 3).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(blocks).reshape(t * gh * gw, 3 * patch * patch)


def unpatchify(patches: np.ndarray, frames: int, height: int, width: int, patch: int) -> np.ndarray:
    """Inverse of patchify; used by tests to prove reconstruction."""
    gh, gw = height // patch, width // patch
    blocks = patches.reshape(frames, gh, gw, 3, patch, patch).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(blocks).reshape(frames, height, width, 3)


def embed(patches: np.ndarray, embedder: PatchEmbedder) -> Tensor:
    """Project patch vectors and add positional embeddings; row 0 is [CLS]."""
    d, inp = embedder.projection.shape
    if patches.shape[1] != inp:
        raise ShapeError(f"patch vectors of length {patches.shape[1]}, embedder expects {inp}")
    if patches.shape[0] != embedder.tokens - 1:
        raise ShapeError(
            f"{patches.shape[0]} patches but positional table holds {embedder.tokens - 1}"
        )
    x = Tensor(np.asarray(patches, dtype=embedder.projection.dtype))
    body = x @ embedder.projection.transpose((1, 0)) + embedder.positions.slice_along(0, 1, embedder.tokens)
    head = embedder.cls + embedder.positions.slice_along(0, 0, 1)
    return concat([head, body], axis=0)


class EncoderBlock:
    """One divided space-time attention block."""

    def __init__(self, rng, cfg: ModelConfig, index: int, name: str = "enc"):
        d = cfg.embed_dim
        dtype = cfg.np_dtype
        hidden = int(d * cfg.mlp_ratio)
        base = f"{name}.{index}"
        self.ln_t = LayerNorm(d, f"{base}.ln_t", dtype)
        self.attn_t = SelfAttention(rng, d, cfg.heads, f"{base}.attn_t", dtype)
        self.ln_s = LayerNorm(d, f"{base}.ln_s", dtype)
        self.attn_s = SelfAttention(rng, d, cfg.heads, f"{base}.attn_s", dtype)
        self.ln_m = LayerNorm(d, f"{base}.ln_m", dtype)
        self.mlp = Mlp(rng, d, hidden, f"{base}.mlp", dtype)

    def forward(self, x: Tensor, frames: int, n: int, strict: bool) -> tuple[Tensor, np.ndarray]:
        d = x.shape[-1]

        # temporal attention over frames at the same patch position; [CLS] passes through
        xn = self.ln_t(x)
        per_pos = xn.slice_along(0, 1, 1 + n * frames).reshape((frames, n, d)).transpose((1, 0, 2))
        t_out, _ = self.attn_t(per_pos)
        t_patches = t_out.transpose((1, 0, 2)).reshape((frames * n, d))
        if strict:
            x = concat([x.slice_along(0, 0, 1), t_patches], axis=0)
        else:
            zero = Tensor(np.zeros((1, d), dtype=x.dtype))
            x = x + concat([zero, t_patches], axis=0)

        # spatial attention within each frame; shared [CLS], updates averaged
        xn = self.ln_s(x)
        cls_n = xn.slice_along(0, 0, 1).reshape((1, 1, d))
        frames_n = xn.slice_along(0, 1, 1 + n * frames).reshape((frames, n, d))
        seq = concat([tile_rows(cls_n, frames), frames_n], axis=1)
        s_out, maps = self.attn_s(seq)
        cls_upd = s_out.slice_along(1, 0, 1).reshape((frames, d)).mean(axis=0, keepdims=True)
        patch_upd = s_out.slice_along(1, 1, 1 + n).reshape((frames * n, d))
        if strict:
            x = concat([cls_upd, patch_upd], axis=0)
        else:
            x = x + concat([cls_upd, patch_upd], axis=0)

        # MLP
        if strict:
            x = self.mlp(self.ln_m(x))
        else:
            x = x + self.mlp(self.ln_m(x))
        return x, maps

    def parameters(self):
        out = {}
        for sub in (self.ln_t, self.attn_t, self.ln_s, self.attn_s, self.ln_m, self.mlp):
            out.update(sub.parameters())
        return out


class Encoder:
    """Patch embedding followed by a stack of divided attention blocks."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, depth: int | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.embedder = PatchEmbedder(rng, cfg)
        self.blocks = [EncoderBlock(rng, cfg, i) for i in range(depth if depth is not None else cfg.depth)]

    def forward_clip(self, clip: np.ndarray) -> EncoderOutput:
        return self.forward(patchify(clip, self.cfg.patch))

    def forward(self, patches: np.ndarray) -> EncoderOutput:
        cfg = self.cfg
        x = embed(patches, self.embedder)
        maps: list[np.ndarray] = []
        for i, block in enumerate(self.blocks):
            try:
                x, m = block.forward(x, cfg.frames, cfg.patches_per_frame, cfg.strict_equations)
            except FloatingPointError as exc:
                raise type(exc)(f"{exc} (encoder layer {i})") from exc
            maps.append(m)
        return EncoderOutput(tokens=x, attn=maps)

    def parameters(self):
        out = dict(self.embedder.parameters())
        for block in self.blocks:
            out.update(block.parameters())
        return out
