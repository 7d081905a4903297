"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

from .data import VideoSequence
from .exceptions import DataError


def check_video(X, channels=None, frame_shape=None, name="video") -> np.ndarray:
    """Coerce one video to a float64 ``T x C x H x W`` array in [0, 1].

    3-d input is read as a single-channel ``T x H x W`` video.
    """
    if isinstance(X, tuple):
        X = X[0]
    if isinstance(X, VideoSequence):
        X = X.frames
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise DataError(f"{name}: expected T x C x H x W frames, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: contains NaN or infinite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError(f"{name}: intensities must lie in [0, 1]")
    if channels is not None and arr.shape[1] != channels:
        raise DataError(f"{name}: has {arr.shape[1]} channels, expected {channels}")
    if frame_shape is not None and arr.shape[2:] != tuple(frame_shape):
        raise DataError(f"{name}: frames are {arr.shape[2:]}, expected {tuple(frame_shape)}")
    return arr


def check_videos(X, **kwargs) -> list[np.ndarray]:
    """Accept one video (array or VideoSequence) or an iterable of videos."""
    if isinstance(X, (VideoSequence, tuple)) or (isinstance(X, np.ndarray) and X.ndim in (3, 4)):
        return [check_video(X, **kwargs)]
    videos = [check_video(v, name=f"video[{i}]", **kwargs) for i, v in enumerate(X)]
    if not videos:
        raise DataError("no videos given")
    return videos
