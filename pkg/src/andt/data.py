"""Video ingestion, clip windowing and the synthetic moving-dot generator.

On-disk layout::

    <root>/<scene>/<split>/<video_id>/frame_000000.png ...
    <root>/<scene>/<split>/<video_id>/labels.csv          (test split)

Frames may instead be stored as ``*.raw`` files: ``b"VRAW1"``, four
little-endian u32 (T, C, H, W), then T*C*H*W little-endian float32 values in
[0, 1]. Raw files in a video directory are concatenated in filename order.
"""

from __future__ import annotations

import csv
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DataError

logger = logging.getLogger(__name__)

__all__ = [
    "VideoSequence", "LabelSeries", "ClipWindow", "DatasetManifest", "SynthConfig",
    "build_manifest", "load_dataset", "load_video", "window_clips", "n_windows",
    "resize_bilinear", "synth_moving_dot", "parse_labels", "write_labels",
    "read_raw", "write_raw", "write_video", "parse_spans",
]

RAW_MAGIC = b"VRAW1"
_RAW_HEADER = struct.Struct("<5s4I")


@dataclass
class VideoSequence:
    """Frames ``T x C x H x W`` with intensities in [0, 1]."""

    frames: np.ndarray
    fps: float = 30.0
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise DataError(f"video frames must be T x C x H x W, got shape {f.shape}")
        if f.shape[0] < 1 or f.shape[1] not in (1, 3):
            raise DataError(f"video needs T >= 1 and C in (1, 3), got shape {f.shape}")
        if f.size and (f.min() < 0.0 or f.max() > 1.0):
            raise DataError(f"video {self.source_id!r} has intensities outside [0, 1]")
        self.frames = f

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class LabelSeries:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 1 or not np.isin(lab, (0, 1)).all():
            raise DataError("labels must be a 1-d sequence of 0/1 values")
        self.labels = lab.astype(np.int64)

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class ClipWindow:
    clip: np.ndarray
    target: np.ndarray
    target_index: int

    @property
    def start(self):
        return self.target_index - self.clip.shape[0]


@dataclass
class DatasetManifest:
    scene: str
    split: str
    videos: list = field(default_factory=list)
    label_files: list = field(default_factory=list)


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------

def parse_labels(path) -> LabelSeries:
    """Read a ``frame_index,label`` CSV into a dense, ordered label series."""
    path = Path(path)
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame_index", "label"]:
            raise DataError(f"{path}: expected header 'frame_index,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                idx, lab = int(row[0]), int(row[1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-integer field") from exc
            if lab not in (0, 1):
                raise DataError(f"{path}:{lineno}: label {lab} is not 0 or 1")
            if idx in rows:
                raise DataError(f"{path}:{lineno}: duplicate frame_index {idx}")
            rows[idx] = lab
    if sorted(rows) != list(range(len(rows))):
        missing = sorted(set(range(max(rows, default=-1) + 1)) - set(rows))
        raise DataError(f"{path}: frame indices are not dense from 0 (missing {missing[:5]})")
    return LabelSeries(np.array([rows[i] for i in range(len(rows))], dtype=np.int64))


def write_labels(path, labels) -> None:
    lab = labels.labels if isinstance(labels, LabelSeries) else np.asarray(labels)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("frame_index,label\n")
        for i, v in enumerate(lab):
            fh.write(f"{i},{int(v)}\n")


# --------------------------------------------------------------------------
# frame files
# --------------------------------------------------------------------------

def write_raw(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim == 3:
        frames = frames[None]
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, *frames.shape))
        fh.write(frames.tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _RAW_HEADER.size:
        raise DataError(f"{path}: too short for a VRAW1 header")
    magic, t, c, h, w = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = t * c * h * w * 4
    payload = data[_RAW_HEADER.size:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w).astype(np.float64)


def _read_png(path) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            gray = img.mode in ("1", "L", "LA")
            arr = np.asarray(img.convert("L" if gray else "RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode frame {path}: {exc}") from exc
    if gray:
        return arr[None] / 255.0
    return arr.transpose(2, 0, 1) / 255.0


def _write_png(path, frame: np.ndarray) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _convert_channels(frames, channels):
    c = frames.shape[1]
    if channels is None or channels == c:
        return frames
    if channels == 1:
        return frames.mean(axis=1, keepdims=True)
    if channels == 3 and c == 1:
        return np.repeat(frames, 3, axis=1)
    raise DataError(f"cannot convert {c}-channel frames to {channels} channels")


def load_video(video_dir, size=None, channels=None, fps=30.0) -> VideoSequence:
    """Decode one video directory (PNG frames or raw files).

    ``size`` is ``(H, W)`` or an int; frames are resized bilinearly when the
    source geometry differs.
    """
    video_dir = Path(video_dir)
    pngs = sorted(video_dir.glob("*.png"))
    raws = sorted(video_dir.glob("*.raw"))
    if pngs:
        frames = np.stack([_read_png(p) for p in pngs])
    elif raws:
        frames = np.concatenate([read_raw(p) for p in raws])
    else:
        raise DataError(f"{video_dir}: no .png or .raw frames found")
    frames = _convert_channels(frames, channels)
    if size is not None:
        out_h, out_w = (size, size) if np.isscalar(size) else size
        if frames.shape[2:] != (out_h, out_w):
            frames = resize_bilinear(frames, out_h, out_w)
    frames = np.clip(frames, 0.0, 1.0)
    return VideoSequence(frames, fps=fps, source_id=video_dir.name)


def build_manifest(root, scene, split) -> DatasetManifest:
    split_dir = Path(root) / scene / split
    if not split_dir.is_dir():
        raise DataError(f"dataset split directory {split_dir} does not exist")
    videos = sorted(p for p in split_dir.iterdir() if p.is_dir())
    if not videos:
        raise DataError(f"{split_dir}: no video directories")
    labels = []
    for v in videos:
        lf = v / "labels.csv"
        if lf.is_file():
            labels.append(lf)
        elif split == "test":
            raise DataError(f"test video {v} has no labels.csv")
        else:
            labels.append(None)
    return DatasetManifest(scene, split, videos, labels)


def load_dataset(root, scene, split, size=None, channels=None, n_jobs=1):
    """Load every video of one scene split as ``(VideoSequence, LabelSeries | None)``.

    Output order follows the manifest (sorted video directory names) even
    when ``n_jobs > 1``.
    """
    manifest = build_manifest(root, scene, split)

    def one(item):
        vdir, lfile = item
        seq = load_video(vdir, size=size, channels=channels)
        lab = None
        if lfile is not None:
            lab = parse_labels(lfile)
            if len(lab) != len(seq):
                raise DataError(
                    f"{vdir}: {len(lab)} labels for {len(seq)} frames (label/frame count mismatch)")
        return seq, lab

    items = list(zip(manifest.videos, manifest.label_files))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]


def write_video(video_dir, seq: VideoSequence, labels=None, fmt="raw") -> None:
    video_dir = Path(video_dir)
    video_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "raw":
        write_raw(video_dir / "frames.raw", seq.frames)
    elif fmt == "png":
        for i, frame in enumerate(seq.frames):
            _write_png(video_dir / f"frame_{i:06d}.png", frame)
    else:
        raise ValueError(f"unknown frame format {fmt!r}")
    if labels is not None:
        write_labels(video_dir / "labels.csv", labels)


# --------------------------------------------------------------------------
# windowing and resizing
# --------------------------------------------------------------------------

def n_windows(total, length, stride=1):
    if total <= length:
        return 0
    return (total - length - 1) // stride + 1


def window_clips(seq, length, stride=1) -> list[ClipWindow]:
    """Slide a ``length``-frame input window; each window targets the next frame."""
    if stride < 1 or length < 1:
        raise ValueError("length and stride must be positive")
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq)
    total = frames.shape[0]
    if total <= length:
        logger.warning("video with %d frames is too short for %d-frame windows", total, length)
        return []
    return [ClipWindow(frames[s:s + length], frames[s + length], s + length)
            for s in range(0, n_windows(total, length, stride) * stride, stride)]


def _interp_matrix(n_in, n_out):
    # half-pixel centres (align_corners=False), clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes using half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    h, w = frame.shape[-2:]
    if (h, w) == (out_h, out_w):
        return np.array(frame, dtype=np.float64)
    rows = _interp_matrix(h, out_h)
    cols = _interp_matrix(w, out_w)
    return rows @ np.asarray(frame, dtype=np.float64) @ cols.T


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """A bright disk drifting across a dark torus.

    Normal frames advance the disk by ``velocity``; frames inside an anomaly
    span move it by ``-velocity``. Spans are half-open ``(start, stop)`` frame
    ranges.
    """

    size: int = 64
    radius: float = 5.0
    velocity: tuple = (2.0, 1.0)
    n_frames: int = 200
    anomaly_spans: tuple = ()
    seed: int = 0
    channels: int = 1
    background: float = 0.0
    start: tuple | None = None
    fps: float = 30.0


def parse_spans(text: str) -> list[tuple[int, int]]:
    """Parse ``"40:60,120:140"`` into half-open spans."""
    spans = []
    if not text or not text.strip():
        return spans
    for part in text.split(","):
        try:
            a, b = part.split(":")
            spans.append((int(a), int(b)))
        except ValueError as exc:
            raise ValueError(f"bad span {part!r}; expected START:STOP") from exc
    return spans


def _render_disk(size, cx, cy, radius, background):
    coords = np.arange(size) + 0.5
    dx = np.abs(coords[None, :] - cx)
    dy = np.abs(coords[:, None] - cy)
    dx = np.minimum(dx, size - dx)
    dy = np.minimum(dy, size - dy)
    dist = np.sqrt(dx * dx + dy * dy)
    cover = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return background + (1.0 - background) * cover


def synth_moving_dot(config: SynthConfig | None = None, **kwargs):
    """Generate ``(VideoSequence, LabelSeries)`` for a moving-dot scene."""
    cfg = config if config is not None else SynthConfig(**kwargs)
    if cfg.n_frames < 1 or cfg.size < 1:
        raise ValueError("n_frames and size must be positive")
    labels = np.zeros(cfg.n_frames, dtype=np.int64)
    for a, b in cfg.anomaly_spans:
        if not (0 <= a < b <= cfg.n_frames):
            raise ValueError(f"anomaly span ({a}, {b}) outside [0, {cfg.n_frames}]")
        labels[a:b] = 1
    rng = np.random.default_rng(cfg.seed)
    start = rng.uniform(0, cfg.size, size=2) if cfg.start is None else np.asarray(cfg.start, float)
    vel = np.asarray(cfg.velocity, dtype=np.float64)
    steps = np.where(labels[:, None] == 1, -vel, vel)
    steps[0] = 0.0
    pos = np.mod(start + np.cumsum(steps, axis=0), cfg.size)
    frames = np.empty((cfg.n_frames, cfg.channels, cfg.size, cfg.size))
    for i, (x, y) in enumerate(pos):
        frames[i] = _render_disk(cfg.size, x, y, cfg.radius, cfg.background)
    return VideoSequence(frames, fps=cfg.fps, source_id=f"synth_{cfg.seed}"), LabelSeries(labels)
