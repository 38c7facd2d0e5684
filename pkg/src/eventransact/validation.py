"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np

from .events_io import EventStream
from .frames import Clip, Video


def check_event_inputs(X, *, allow_videos: bool = True) -> list:
    """List of :class:`EventStream` (or :class:`Video`) samples."""
    if isinstance(X, (EventStream, Video)):
        raise TypeError("expected a sequence of samples, got a single sample")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of event streams, got {type(X).__name__}") from None
    allowed = (EventStream, Video) if allow_videos else (EventStream,)
    for i, item in enumerate(items):
        if not isinstance(item, allowed):
            raise TypeError(f"sample {i} is {type(item).__name__}, expected {allowed[0].__name__}")
    if not items:
        raise ValueError("found 0 samples; at least 1 is required")
    return items


def check_clip_array(clip, n: int, size: int, channels: int) -> np.ndarray:
    """``(n, S, S, C)`` float array with finite, non-negative values."""
    arr = clip.to_array() if isinstance(clip, Clip) else np.asarray(clip, dtype=np.float32)
    expected = (n, size, size, channels)
    if arr.shape != expected:
        raise ValueError(f"clip shape {arr.shape} != {expected}")
    if not np.isfinite(arr).all() or (arr < 0).any():
        raise ValueError("clip values must be finite and non-negative")
    return arr


def check_probability(p: float, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name}={p} outside [0, 1]")
    return p
