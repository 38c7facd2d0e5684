"""Event-frame encoding, clip sampling and the event-specific augmentations
used to build the two contrastive views of a sample."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .events_io import EventStream

__all__ = [
    "EncoderConfig",
    "AugmentConfig",
    "ClipSpec",
    "EventFrame",
    "Video",
    "Clip",
    "TwoViews",
    "encode_frames",
    "event_drop",
    "make_two_views",
    "augment_video_views",
    "sample_clip_random",
    "sample_clips_uniform",
    "derive_seed",
    "area_resize",
    "save_frames_dir",
    "load_frames_dir",
]

CHANNEL_LAYOUTS = {"two_channel": 2, "three_channel": 3}


@dataclass(frozen=True)
class EncoderConfig:
    rho_usec: int = 50_000
    spatial_size: int = 64
    channel_layout: str = "two_channel"
    normalization: str = "clamp_k"
    clamp_k: int = 8

    def __post_init__(self):
        if self.rho_usec <= 0:
            raise ValueError("rho_usec must be positive")
        if self.spatial_size <= 0:
            raise ValueError("spatial_size must be positive")
        if self.channel_layout not in CHANNEL_LAYOUTS:
            raise ValueError(f"unknown channel_layout {self.channel_layout!r}")
        if self.normalization not in ("none", "clamp_k"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "clamp_k" and self.clamp_k < 1:
            raise ValueError("clamp_k must be >= 1")

    @property
    def channels(self) -> int:
        return CHANNEL_LAYOUTS[self.channel_layout]


@dataclass(frozen=True)
class AugmentConfig:
    drop_prob: float = 0.1
    rho_choices: tuple[int, ...] = (25_000, 50_000, 100_000)
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rho_choices", tuple(int(r) for r in self.rho_choices))
        object.__setattr__(self, "crop_scale_range", tuple(float(c) for c in self.crop_scale_range))
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")
        if not self.rho_choices:
            raise ValueError("rho_choices must not be empty")
        if any(r <= 0 for r in self.rho_choices):
            raise ValueError("rho_choices must be positive")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class ClipSpec:
    """Length of a clip and, optionally, a fixed start time within the stream.
    ``start_usec=None`` draws the start at random."""

    n: int = 16
    start_usec: int | None = None


@dataclass(eq=False)
class EventFrame:
    data: np.ndarray  # (S, S, C), row = y, col = x
    index: int
    t_start: int
    t_end: int


@dataclass(eq=False)
class Video:
    frames: list[EventFrame]
    source_id: str = ""
    label: int = -1

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a video needs at least one frame")

    def __len__(self):
        return len(self.frames)

    def to_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


@dataclass(eq=False)
class Clip:
    frames: list[EventFrame]
    start_index: int = 0

    def __len__(self):
        return len(self.frames)

    def to_array(self) -> np.ndarray:
        """``(n, S, S, C)`` float32 array."""
        return np.stack([f.data for f in self.frames]).astype(np.float32, copy=False)


class TwoViews(NamedTuple):
    view1: Clip
    view2: Clip
    trace: dict


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed from a base seed and any number of keys, so per-sample
    randomness does not depend on worker scheduling."""
    h = hashlib.blake2b(digest_size=8)
    for key in keys:
        h.update(repr(key).encode())
        h.update(b"\x00")
    return (int(seed) ^ int.from_bytes(h.digest(), "little")) & (2**64 - 1)


# -- resampling --------------------------------------------------------------


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """``(dst, src)`` matrix averaging each output cell's footprint exactly."""
    edges = np.arange(dst + 1) * (src / dst)
    m = np.zeros((dst, src))
    for i in range(dst):
        a, b = edges[i], edges[i + 1]
        j0, j1 = int(math.floor(a)), min(int(math.ceil(b)), src)
        for j in range(j0, j1):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / (src / dst)


_AREA_CACHE: dict[tuple[int, int], np.ndarray] = {}


def area_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted resampling of ``(..., H, W, C)`` grids (mean preserving)."""
    h, w = grid.shape[-3], grid.shape[-2]
    if (h, w) == (out_h, out_w):
        return grid
    mats = []
    for src, dst in ((h, out_h), (w, out_w)):
        if (src, dst) not in _AREA_CACHE:
            _AREA_CACHE[(src, dst)] = _area_matrix(src, dst)
        mats.append(_AREA_CACHE[(src, dst)])
    return np.einsum("ih,...hwc,jw->...ijc", mats[0], grid, mats[1], optimize=True)


# -- encoding ----------------------------------------------------------------


def _count_frames(stream: EventStream, rho: int, num_frames: int) -> np.ndarray:
    """Raw per-polarity counts, ``(T, H, W, 2)`` with channel 0 = positive."""
    H, W = stream.height, stream.width
    k = stream.t // rho
    keep = k < num_frames
    channel = 1 - stream.p[keep].astype(np.int64)
    flat = ((k[keep] * H + stream.y[keep]) * W + stream.x[keep]) * 2 + channel
    counts = np.bincount(flat, minlength=num_frames * H * W * 2)
    return counts.reshape(num_frames, H, W, 2).astype(np.float64)


def _finish(counts: np.ndarray, config: EncoderConfig, crop=None, flip=False) -> np.ndarray:
    """Crop, flip, resize, add channels and normalise ``(T, H, W, 2)`` counts."""
    if crop is not None:
        top, left, ch, cw = crop
        counts = counts[:, top : top + ch, left : left + cw]
    if flip:
        counts = counts[:, :, ::-1]
    S = config.spatial_size
    data = area_resize(counts, S, S)
    if config.channel_layout == "three_channel":
        data = np.concatenate([data, data.sum(axis=-1, keepdims=True)], axis=-1)
    if config.normalization == "clamp_k":
        data = np.minimum(data, config.clamp_k) / config.clamp_k
    return np.ascontiguousarray(data, dtype=np.float32)


def encode_frames(
    stream: EventStream,
    config: EncoderConfig,
    *,
    num_frames: int | None = None,
    source_id: str = "",
    label: int = -1,
) -> Video:
    """Aggregate events into frames of ``rho_usec`` microseconds.

    Frame ``k`` covers ``[k*rho, (k+1)*rho)``. Without ``num_frames`` the video
    has ``ceil(duration / rho)`` frames (one all-zero frame for an empty
    stream); with it, exactly ``num_frames`` frames and later events ignored.
    """
    rho = config.rho_usec
    if num_frames is None:
        num_frames = max(1, -(-stream.duration // rho))
    counts = _count_frames(stream, rho, num_frames)
    data = _finish(counts, config)
    frames = [EventFrame(data[k], k, k * rho, (k + 1) * rho) for k in range(num_frames)]
    return Video(frames, source_id=source_id, label=label)


def event_drop(stream: EventStream, p: float, seed: int) -> EventStream:
    """Keep each event independently with probability ``1 - p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop probability {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(stream)) >= p
    return stream.select(keep)


def _pad_frames(frames: list[EventFrame], n: int) -> list[EventFrame]:
    frames = list(frames[:n])
    last = frames[-1]
    while len(frames) < n:
        frames.append(EventFrame(last.data, len(frames), last.t_start, last.t_end))
    return frames


def _draw_crop(rng, height, width, scale_range):
    lo, hi = scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    side = math.sqrt(scale)
    ch = max(1, min(height, round(height * side)))
    cw = max(1, min(width, round(width * side)))
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    return scale, (top, left, ch, cw)


def _count_windows(stream: EventStream, starts: np.ndarray, length: int) -> np.ndarray:
    """Per-polarity counts ``(len(starts), H, W, 2)`` of windows ``[s, s + length)``."""
    H, W = stream.height, stream.width
    lo = np.searchsorted(stream.t, starts, side="left")
    hi = np.searchsorted(stream.t, starts + length, side="left")
    idx = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if len(starts) else np.zeros(0, int)
    frame = np.repeat(np.arange(len(starts)), hi - lo)
    channel = 1 - stream.p[idx].astype(np.int64)
    flat = ((frame * H + stream.y[idx]) * W + stream.x[idx]) * 2 + channel
    counts = np.bincount(flat, minlength=len(starts) * H * W * 2)
    return counts.reshape(len(starts), H, W, 2).astype(np.float64)


def make_two_views(
    stream: EventStream,
    clip_spec: ClipSpec,
    aug: AugmentConfig,
    encoder: EncoderConfig,
    seed: int | None = None,
) -> TwoViews:
    """Two independently augmented clips of the same frames in time.

    Frame ``t`` of both views starts at ``start + t * encoder.rho_usec``; each
    view aggregates its own window length ``rho_v`` drawn from
    ``aug.rho_choices``, so a coarser view's frame contains the finer view's
    frame at the same position. Each view also draws an event-drop
    realisation and one crop box / flip decision for all its frames. Frames
    starting past the end of the stream repeat the last real frame.
    """
    if not aug.rho_choices:
        raise ValueError("rho_choices must not be empty")
    n = clip_spec.n
    if n <= 0:
        raise ValueError("clip length must be positive")
    rng = np.random.default_rng(aug.seed if seed is None else seed)
    stride = encoder.rho_usec
    rhos = [int(rng.choice(aug.rho_choices)) for _ in range(2)]
    duration = stream.duration
    if clip_spec.start_usec is None:
        latest = max(0, duration - ((n - 1) * stride + max(rhos)))
        start = int(rng.integers(0, latest + 1))
    else:
        start = int(clip_spec.start_usec)
    count = min(n, max(1, -(-(duration - start) // stride)))
    starts = start + stride * np.arange(count, dtype=np.int64)

    views, trace = [], {"start_usec": start, "stride_usec": stride, "views": []}
    for rho in rhos:
        drop_seed = int(rng.integers(0, 2**63))
        scale, crop = _draw_crop(rng, stream.height, stream.width, aug.crop_scale_range)
        flip = bool(rng.random() < aug.hflip_prob)
        dropped = event_drop(stream, aug.drop_prob, drop_seed)
        counts = _count_windows(dropped, starts, rho)
        full_crop = crop == (0, 0, stream.height, stream.width)
        data = _finish(counts, encoder, None if full_crop else crop, flip)
        frames = [EventFrame(data[k], k, int(a), int(a) + rho) for k, a in enumerate(starts)]
        views.append(Clip(_pad_frames(frames, n), start_index=0))
        trace["views"].append(
            {
                "rho_usec": rho,
                "drop_seed": drop_seed,
                "crop_scale": scale,
                "crop_box": list(crop),
                "hflip": flip,
                "real_frames": count,
            }
        )
    return TwoViews(views[0], views[1], trace)


def augment_video_views(video: Video, n: int, aug: AugmentConfig, seed: int) -> TwoViews:
    """Two views of a pre-encoded video: a shared random clip, crop/flip per
    view. Event drop and window changes are impossible without raw events."""
    rng = np.random.default_rng(seed)
    clip = sample_clip_random(video, n, int(rng.integers(0, 2**63)))
    arr = clip.to_array()
    S_h, S_w = arr.shape[1], arr.shape[2]
    views, trace = [], {"start_index": clip.start_index, "views": []}
    for _ in range(2):
        scale, (top, left, ch, cw) = _draw_crop(rng, S_h, S_w, aug.crop_scale_range)
        flip = bool(rng.random() < aug.hflip_prob)
        out = arr[:, top : top + ch, left : left + cw]
        if flip:
            out = out[:, :, ::-1]
        out = area_resize(out, S_h, S_w).astype(np.float32)
        frames = [EventFrame(out[k], f.index, f.t_start, f.t_end) for k, f in enumerate(clip.frames)]
        views.append(Clip(frames, clip.start_index))
        trace["views"].append({"crop_scale": scale, "crop_box": [top, left, ch, cw], "hflip": flip})
    return TwoViews(views[0], views[1], trace)


# -- clip sampling -----------------------------------------------------------


def _clip_at(video: Video, n: int, start: int) -> Clip:
    if len(video) < n:
        return Clip(_pad_frames(video.frames, n), 0)
    return Clip(list(video.frames[start : start + n]), start)


def sample_clip_random(video: Video, n: int, seed: int, contiguous: bool = True) -> Clip:
    """Random clip of ``n`` frames; padded by last-frame repetition if the video
    is shorter. ``contiguous=False`` picks a sorted scattered subset instead."""
    if n <= 0:
        raise ValueError("clip length must be positive")
    T = len(video)
    if T < n:
        return _clip_at(video, n, 0)
    rng = np.random.default_rng(seed)
    if not contiguous:
        idx = np.sort(rng.choice(T, size=n, replace=False))
        return Clip([video.frames[i] for i in idx], int(idx[0]))
    return _clip_at(video, n, int(rng.integers(0, T - n + 1)))


def uniform_starts(T: int, n: int, k: int) -> list[int]:
    """``round(j * (T - n) / (k - 1))`` with halves rounded up, in exact integers."""
    if n <= 0 or k <= 0:
        raise ValueError("n and k must be positive")
    if T <= n or k == 1:
        return [0] * k
    span = T - n
    return [(2 * j * span + (k - 1)) // (2 * (k - 1)) for j in range(k)]


def sample_clips_uniform(video: Video, n: int, k: int) -> list[Clip]:
    return [_clip_at(video, n, s) for s in uniform_starts(len(video), n, k)]


# -- on-disk frames ----------------------------------------------------------


def save_frames_dir(video: Video, path, encoder: EncoderConfig | None = None) -> None:
    """Write ``000000.npy, 000001.npy, ...`` plus ``meta.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for f in video.frames:
        np.save(path / f"{f.index:06d}.npy", f.data)
    meta = {
        "source_id": video.source_id,
        "label": video.label,
        "windows": [[f.t_start, f.t_end] for f in video.frames],
        "encoder": asdict(encoder) if encoder else None,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))


def load_frames_dir(path, label: int | None = None) -> Video:
    """Load a directory of numbered ``.npy`` (H, W, C) frames with ``meta.json``."""
    path = Path(path)
    meta_path = path / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    files = sorted(p for p in path.iterdir() if p.suffix == ".npy")
    if not files:
        raise FileNotFoundError(f"no frame files in {path}")
    windows = meta.get("windows") or [[k, k + 1] for k in range(len(files))]
    frames = []
    for k, fp in enumerate(files):
        data = np.load(fp).astype(np.float32)
        if data.ndim != 3 or np.any(data < 0):
            raise ValueError(f"{fp}: frames must be non-negative (H, W, C) arrays")
        frames.append(EventFrame(data, k, int(windows[k][0]), int(windows[k][1])))
    return Video(
        frames,
        source_id=meta.get("source_id", os.path.basename(path)),
        label=meta.get("label", -1) if label is None else label,
    )
