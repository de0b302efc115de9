"""Preprocessing and data handling.

Raw microscope videos arrive as directories of P6 PPM frames.  A target
is tagged with a box in frame 0 and followed by normalized cross
correlation template matching: each frame searches a window around the
previous center, the template refreshes from every new best match, and
zero-variance windows fall back to the previous center with the frame
flagged.  Tracked clips are 16 uniformly sampled frames of fixed-size
crops scaled to [0, 1].

The synthetic generator replaces the (private) clinical recordings for
tests and experiments: each sample is a moving bright ellipse with an
oscillating tail over noise, a latent quality in [0, 1] drives size
regularity, motion smoothness and brightness, and 40 simulated votes are
drawn from a fixed quality-to-grade propensity map.

On disk a dataset is one directory per sample holding ``clip.bin``
(magic "RSTF\\0CLP", u32 version, u32 T/H/W/C, float32 little-endian
payload) plus a top-level ``labels.csv`` with columns
``sample_id,countA,countB,countC,countD,countE``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

CLIP_MAGIC = b"RSTF\x00CLP"
CLIP_VERSION = 1
LABELS_HEADER = ["sample_id", "countA", "countB", "countC", "countD", "countE"]
VOTERS = 40

# fixed quality->grade propensity map (versioned so labels stay stable)
LABEL_MAP_VERSION = 1
GRADE_QUALITY_CENTERS = np.array([0.9, 0.7, 0.5, 0.3, 0.1])
GRADE_QUALITY_SPREAD = 0.11
TABLE_PROFILE = (45 / 615, 194 / 615, 356 / 615, 9 / 615, 11 / 615)


class DatasetError(Exception):
    """Base for on-disk dataset problems."""


class NotAClipError(DatasetError):
    """clip.bin does not start with the clip magic."""


class UnsupportedClipVersionError(DatasetError):
    """clip.bin format version is not readable."""


class CorruptClipError(DatasetError):
    """clip.bin header dims disagree with the payload."""


class LabelSchemaError(DatasetError):
    """labels.csv violates the column schema."""


class MissingLabelError(DatasetError):
    """A sample directory has no labels.csv row."""


class MissingClipError(DatasetError):
    """A labels.csv row has no sample directory."""


@dataclass
class GradeDistribution:
    """Expert-vote histogram over grades A..E plus its normalization."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (5,):
            raise ValueError(f"expected 5 vote counts, got shape {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("vote counts must be non-negative")
        if self.counts.sum() == 0:
            raise ValueError("vote counts must not be all zero")

    @property
    def probs(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def normalize_counts(counts) -> np.ndarray:
    """Vote counts -> probabilities; errors on an all-zero histogram."""
    return GradeDistribution(np.asarray(counts)).probs


@dataclass
class Sample:
    sample_id: str
    clip: np.ndarray          # (T, H, W, C) float32 in [0, 1]
    label: GradeDistribution
    patches: np.ndarray | None = None   # cache for training

    @property
    def probs(self) -> np.ndarray:
        return self.label.probs


@dataclass
class Trajectory:
    centers: np.ndarray       # (T, 2) float, (x, y) per frame
    flags: np.ndarray         # (T,) bool, True where matching fell back


# -- template tracking ---------------------------------------------------------


def _to_gray(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        return frames.mean(axis=-1)
    return frames


def _ncc_scores(window: np.ndarray, template: np.ndarray) -> np.ndarray | None:
    """Normalized cross-correlation of template over every valid position."""
    th, tw = template.shape
    t0 = template - template.mean()
    t_ss = float(np.sum(t0 * t0))
    if t_ss <= 1e-12:
        return None
    cross = fftconvolve(window, t0[::-1, ::-1], mode="valid")
    # per-window sums via integral images
    ones = np.ones((th, tw))
    win_sum = fftconvolve(window, ones, mode="valid")
    win_sq = fftconvolve(window * window, ones, mode="valid")
    win_ss = win_sq - win_sum * win_sum / (th * tw)
    win_ss = np.maximum(win_ss, 0.0)
    denom = np.sqrt(t_ss * win_ss)
    scores = np.where(denom > 1e-9, cross / np.maximum(denom, 1e-30), -np.inf)
    if np.all(np.isneginf(scores)):
        return None
    return scores


def track_template(frames: np.ndarray, init_box, search_radius: int = 20) -> Trajectory:
    """Follow the init-box target through all frames.

    ``init_box`` is (x, y, w, h) in frame-0 pixel coordinates.  Returns
    the per-frame box centers; flagged frames kept the previous center
    because every candidate window had zero variance.
    """
    gray = _to_gray(frames)
    t, height, width = gray.shape
    x, y, w, h = (int(v) for v in init_box)
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise ValueError(f"init_box {init_box} is outside the {width}x{height} frame")

    template = gray[0, y:y + h, x:x + w].copy()
    top_left = np.array([x, y], dtype=np.intp)
    centers = np.empty((t, 2), dtype=np.float64)
    flags = np.zeros(t, dtype=bool)
    centers[0] = (x + w / 2.0, y + h / 2.0)

    for i in range(1, t):
        x0 = max(0, top_left[0] - search_radius)
        y0 = max(0, top_left[1] - search_radius)
        x1 = min(width, top_left[0] + w + search_radius)
        y1 = min(height, top_left[1] + h + search_radius)
        window = gray[i, y0:y1, x0:x1]
        scores = _ncc_scores(window, template)
        if scores is None:
            flags[i] = True
        else:
            best = np.unravel_index(np.argmax(scores), scores.shape)
            top_left = np.array([x0 + best[1], y0 + best[0]], dtype=np.intp)
            template = gray[i, top_left[1]:top_left[1] + h, top_left[0]:top_left[0] + w].copy()
        centers[i] = (top_left[0] + w / 2.0, top_left[1] + h / 2.0)
    return Trajectory(centers=centers, flags=flags)


# -- clip building -----------------------------------------------------------------


def subsample_indices(source_frames: int, out_frames: int = 16) -> np.ndarray:
    """Uniform frame picks: round(i * (T-1) / (out-1)), strictly increasing."""
    if source_frames < out_frames:
        raise ValueError(f"cannot pick {out_frames} frames from {source_frames}")
    if out_frames == 1:
        return np.array([0], dtype=np.intp)
    i = np.arange(out_frames, dtype=np.float64)
    return np.round(i * (source_frames - 1) / (out_frames - 1)).astype(np.intp)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of an (H, W) or (H, W, C) array."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    if image.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def build_clip(
    frames: np.ndarray,
    trajectory: Trajectory,
    out_frames: int = 16,
    crop: int = 150,
    out_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Crop around the trajectory and subsample to a fixed-length clip.

    Picks ``out_frames`` uniformly spaced source frames, crops a
    ``crop`` x ``crop`` window centered on the tracked position (clamped
    inside the frame), scales intensities to [0, 1], and optionally
    resizes each crop to ``out_size`` (height, width).
    """
    frames = np.asarray(frames)
    t, height, width = frames.shape[:3]
    if trajectory.centers.shape[0] != t:
        raise ValueError("trajectory must cover every source frame")
    if crop > height or crop > width:
        raise ValueError(f"crop {crop} exceeds the {width}x{height} frame")
    picks = subsample_indices(t, out_frames)
    channels = frames.shape[3] if frames.ndim == 4 else 1
    out = np.empty((out_frames, crop, crop, channels), dtype=np.float64)
    for row, idx in enumerate(picks):
        cx, cy = trajectory.centers[idx]
        x0 = int(np.clip(round(cx - crop / 2.0), 0, width - crop))
        y0 = int(np.clip(round(cy - crop / 2.0), 0, height - crop))
        window = frames[idx, y0:y0 + crop, x0:x0 + crop]
        if window.ndim == 2:
            window = window[..., None]
        out[row] = window
    if np.issubdtype(frames.dtype, np.integer):
        out /= 255.0
    if out_size is not None and out_size != (crop, crop):
        resized = np.empty((out_frames, out_size[0], out_size[1], channels))
        for row in range(out_frames):
            resized[row] = resize_bilinear(out[row], out_size[0], out_size[1])
        out = resized
    if channels == 1:
        out = np.repeat(out, 3, axis=-1)
    return out.astype(np.float32)


def prepare_clip(clip: np.ndarray, frames: int, height: int, width: int) -> np.ndarray:
    """Adapt a stored clip to the model geometry (subsample + resize)."""
    clip = np.asarray(clip, dtype=np.float64)
    if clip.shape[0] != frames:
        clip = clip[subsample_indices(clip.shape[0], frames)]
    if clip.shape[1:3] != (height, width):
        resized = np.empty((frames, height, width, clip.shape[3]))
        for i in range(frames):
            resized[i] = resize_bilinear(clip[i], height, width)
        clip = resized
    if clip.shape[3] == 1:
        clip = np.repeat(clip, 3, axis=-1)
    return clip


# -- synthetic data ------------------------------------------------------------------


@dataclass
class SynthSpec:
    samples: int = 100
    frames: int = 16
    height: int = 32
    width: int = 32
    profile: tuple = TABLE_PROFILE

    def __post_init__(self):
        if self.samples < 1 or self.frames < 1:
            raise ValueError("samples and frames must be positive")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8 pixels")
        profile = np.asarray(self.profile, dtype=float)
        if profile.shape != (5,) or np.any(profile < 0) or abs(profile.sum() - 1.0) > 1e-9:
            raise ValueError("profile must be 5 non-negative values summing to 1")
        self.profile = tuple(float(v) for v in profile)


def _vote_weights(quality: float) -> np.ndarray:
    logits = -(((quality - GRADE_QUALITY_CENTERS) / GRADE_QUALITY_SPREAD) ** 2)
    w = np.exp(logits)
    return w / w.sum()


def _render_sample(rng: np.random.Generator, spec: SynthSpec, quality: float) -> np.ndarray:
    t, h, w = spec.frames, spec.height, spec.width
    jitter = 1.6 * (1.0 - quality)
    wobble = 0.3 * (1.0 - quality)
    brightness = 0.45 + 0.5 * quality

    clip = rng.normal(0.10, 0.03, size=(t, h, w))
    cx = w * rng.uniform(0.35, 0.65)
    cy = h * rng.uniform(0.35, 0.65)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(0.4, 0.9)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    a0 = 0.16 * min(h, w)
    b0 = 0.10 * min(h, w)
    tail_len = 0.4 * min(h, w)
    tail_phase = rng.uniform(0.0, 2.0 * np.pi)

    ys, xs = np.mgrid[0:h, 0:w]
    for i in range(t):
        px = cx + vx * i + rng.normal(0.0, jitter)
        py = cy + vy * i + rng.normal(0.0, jitter)
        px = float(np.clip(px, 2.0, w - 3.0))
        py = float(np.clip(py, 2.0, h - 3.0))
        a = a0 * (1.0 + wobble * np.sin(2.0 * np.pi * i / t) + rng.normal(0.0, wobble * 0.2))
        b = b0 * (1.0 + wobble * np.cos(2.0 * np.pi * i / t))
        a, b = max(a, 1.0), max(b, 0.8)
        dx = (xs - px) * np.cos(angle) + (ys - py) * np.sin(angle)
        dy = -(xs - px) * np.sin(angle) + (ys - py) * np.cos(angle)
        head = np.exp(-0.5 * ((dx / a) ** 2 + (dy / b) ** 2) * 4.0)
        clip[i] += brightness * head

        # oscillating tail behind the head
        s = np.linspace(0.0, 1.0, 60)
        sway = (1.5 + 2.0 * (1.0 - quality)) * np.sin(6.0 * s + tail_phase + 0.8 * i)
        tail_x = px - np.cos(angle) * (a + s * tail_len) - np.sin(angle) * sway
        tail_y = py - np.sin(angle) * (a + s * tail_len) + np.cos(angle) * sway
        ix = np.clip(np.round(tail_x).astype(int), 0, w - 1)
        iy = np.clip(np.round(tail_y).astype(int), 0, h - 1)
        clip[i, iy, ix] = np.maximum(clip[i, iy, ix], 0.3 + 0.25 * quality)

    clip = np.clip(clip, 0.0, 1.0)
    return np.repeat(clip[..., None], 3, axis=-1).astype(np.float32)


def synthesize_dataset(spec: SynthSpec, seed: int) -> list[Sample]:
    """Deterministic synthetic dataset of (clip, grade distribution) pairs."""
    return synthesize_range(spec, seed, 0, spec.samples)


def synthesize_range(spec: SynthSpec, seed: int, start: int, stop: int) -> list[Sample]:
    """Samples [start, stop) of the dataset; per-sample seed streams make
    the result independent of how the range is chunked."""
    streams = np.random.SeedSequence(seed).spawn(spec.samples)
    profile = np.asarray(spec.profile)
    samples = []
    for i in range(start, stop):
        rng = np.random.default_rng(streams[i])
        grade = int(rng.choice(5, p=profile))
        quality = float(np.clip(
            GRADE_QUALITY_CENTERS[grade] + rng.uniform(-0.07, 0.07), 0.0, 1.0
        ))
        counts = rng.multinomial(VOTERS, _vote_weights(quality))
        clip = _render_sample(rng, spec, quality)
        samples.append(Sample(
            sample_id=f"sample_{i:05d}",
            clip=clip,
            label=GradeDistribution(counts),
        ))
    return samples


def render_blob_video(
    n_frames: int,
    height: int,
    width: int,
    start: tuple[float, float],
    motion: str = "linear",
    velocity: tuple[float, float] = (2.0, 2.0),
    amplitude: float = 6.0,
    period: float = 20.0,
    radius: float = 5.0,
    noise: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Bright blob simulator with known ground-truth centers.

    motion 'linear' moves at ``velocity`` px/frame; 'sinusoidal' adds a
    vertical sine of the given amplitude/period on top of the horizontal
    drift.  Returns (frames uint8 (T, H, W, 3), centers float (T, 2)).
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width]
    frames = np.empty((n_frames, height, width, 3), dtype=np.uint8)
    centers = np.empty((n_frames, 2))
    for i in range(n_frames):
        if motion == "linear":
            cx = start[0] + velocity[0] * i
            cy = start[1] + velocity[1] * i
        elif motion == "sinusoidal":
            cx = start[0] + velocity[0] * i
            cy = start[1] + amplitude * np.sin(2.0 * np.pi * i / period)
        else:
            raise ValueError(f"unknown motion '{motion}'")
        centers[i] = (cx, cy)
        blob = np.exp(-0.5 * (((xs - cx) / radius) ** 2 + ((ys - cy) / radius) ** 2))
        frame = 40.0 + 180.0 * blob
        if noise > 0:
            frame = frame + rng.normal(0.0, noise, size=frame.shape)
        frames[i] = np.clip(frame, 0, 255).astype(np.uint8)[..., None]
    return frames, centers


# -- dataset files ----------------------------------------------------------------


def write_clip(path, clip: np.ndarray) -> None:
    clip = np.asarray(clip, dtype=np.float32)
    if clip.ndim != 4:
        raise ValueError(f"clips are (T, H, W, C), got shape {clip.shape}")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<5I", CLIP_VERSION, *clip.shape))
        fh.write(np.ascontiguousarray(clip, dtype="<f4").tobytes())


def read_clip(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(CLIP_MAGIC))
        if magic != CLIP_MAGIC:
            raise NotAClipError(f"{path} is not a clip file")
        header = fh.read(20)
        if len(header) != 20:
            raise CorruptClipError(f"{path}: truncated header")
        version, t, h, w, c = struct.unpack("<5I", header)
        if version != CLIP_VERSION:
            raise UnsupportedClipVersionError(f"unsupported clip version {version}")
        payload = fh.read()
    expected = t * h * w * c * 4
    if len(payload) != expected:
        raise CorruptClipError(
            f"{path}: header promises {expected} payload bytes, file has {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c).copy()


def write_dataset(root, samples: list[Sample]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ordered = sorted(samples, key=lambda s: s.sample_id)
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LABELS_HEADER)
        for sample in ordered:
            writer.writerow([sample.sample_id, *map(int, sample.label.counts)])
    for sample in ordered:
        sample_dir = root / sample.sample_id
        sample_dir.mkdir(exist_ok=True)
        write_clip(sample_dir / "clip.bin", sample.clip)


def read_dataset(root) -> list[Sample]:
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise LabelSchemaError(f"{labels_path} does not exist")
    labels: dict[str, GradeDistribution] = {}
    with open(labels_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != LABELS_HEADER:
        raise LabelSchemaError(f"labels.csv line 1: expected header {','.join(LABELS_HEADER)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 6:
            raise LabelSchemaError(f"labels.csv line {lineno}: expected 6 columns, got {len(row)}")
        try:
            counts = [int(v) for v in row[1:]]
            labels[row[0]] = GradeDistribution(np.array(counts))
        except ValueError as exc:
            raise LabelSchemaError(f"labels.csv line {lineno}: {exc}") from exc

    sample_dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    for name in sample_dirs:
        if name not in labels:
            raise MissingLabelError(f"sample directory '{name}' has no labels.csv row")
    samples = []
    for sample_id in sorted(labels):
        clip_path = root / sample_id / "clip.bin"
        if not clip_path.exists():
            raise MissingClipError(f"labels.csv names '{sample_id}' but {clip_path} is missing")
        samples.append(Sample(sample_id=sample_id, clip=read_clip(clip_path), label=labels[sample_id]))
    return samples


def read_ppm_video(directory) -> np.ndarray:
    """Load a directory of P6 PPM frames (sorted by filename) as one array."""
    from rostfine.netpbm import read_ppm

    directory = Path(directory)
    frame_paths = sorted(directory.glob("*.ppm"))
    if not frame_paths:
        raise DatasetError(f"no .ppm frames in {directory}")
    frames = [read_ppm(p) for p in frame_paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise DatasetError(f"frames disagree on size: {sorted(shapes)}")
    return np.stack(frames)
