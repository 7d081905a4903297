"""Objective, optimizer, training loop and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import ClipWindow, VideoSequence, n_windows
from .exceptions import (CheckpointChecksumError, CheckpointError, CheckpointTruncatedError,
                         CheckpointVersionError, ConfigError, DataError, DimensionError, NumericFault)
from .numerics import DifferentiableOp, finite_diff_check

logger = logging.getLogger(__name__)

__all__ = [
    "MODES", "TrainConfig", "AdamState", "TrainHistory", "Checkpoint",
    "prediction_loss", "prediction_loss_grad", "build_target", "adam_update",
    "fit", "train", "save_checkpoint", "load_checkpoint", "full_model_gradcheck",
    "CHECKPOINT_VERSION",
]

MODES = ("prediction-1", "reconstruction-1", "reconstruction-6")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "prediction-1"
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 1
    seed: int = 0
    precision: str = "float64"
    clip_norm: float | None = None
    stride: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.stride < 1:
            raise ConfigError("epochs, batch_size and stride must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be 'float32' or 'float64'")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    step_loss: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    fingerprint: str = ""


@dataclass
class Checkpoint:
    model_config: M.ModelConfig
    params: M.ModelParams
    opt_state: AdamState = field(default_factory=AdamState)
    history: TrainHistory = field(default_factory=TrainHistory)
    train_config: TrainConfig | None = None
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# objective and targets
# --------------------------------------------------------------------------

def prediction_loss(pred, target) -> float:
    """Mean squared intensity error between predicted and true frames."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    d = pred - target
    return float(np.mean(d * d, dtype=np.float64))


def prediction_loss_grad(pred, target):
    """Loss value and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    d = pred - target
    return float(np.mean(d * d, dtype=np.float64)), (2.0 / d.size) * d


def build_target(window: ClipWindow, mode: str, config: M.ModelConfig | None = None):
    """Return ``(model input clip, loss target)`` for one window.

    * ``prediction-1``: the T input frames and the next frame.
    * ``reconstruction-1``: the target frame repeated T times, and itself.
    * ``reconstruction-6``: the T frames ending at the target frame, and
      those same frames (stacked as ``T*C x H x W``).
    """
    clip = window.clip
    t_len = clip.shape[0]
    if config is not None:
        if t_len != config.n_frames:
            raise ConfigError(f"window has {t_len} frames, model expects {config.n_frames}")
        want = t_len if mode == "reconstruction-6" else 1
        if config.out_frames != want:
            raise ConfigError(f"mode {mode} needs out_frames={want}, model has {config.out_frames}")
    if mode == "prediction-1":
        return clip, window.target
    if mode == "reconstruction-1":
        return np.repeat(window.target[None], t_len, axis=0), window.target
    if mode == "reconstruction-6":
        stack = np.concatenate([clip[1:], window.target[None]], axis=0)
        return stack, stack.reshape((-1,) + stack.shape[2:])
    raise ConfigError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def adam_update(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs are untouched."""
    step = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_p[name] = p
            new_m[name] = state.m.get(name, np.zeros_like(p))
            new_v[name] = state.v.get(name, np.zeros_like(p))
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_m[name] = np.asarray(m, dtype=p.dtype)
        new_v[name] = np.asarray(v, dtype=p.dtype)
        new_p[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return new_p, AdamState(new_m, new_v, step)


def _clip_grads(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def _videos(dataset):
    out = []
    for item in dataset:
        seq = item[0] if isinstance(item, tuple) else item
        if not isinstance(seq, VideoSequence):
            seq = VideoSequence(np.asarray(seq))
        out.append(seq)
    return out


def _window_index(videos, length, stride):
    idx = []
    for vi, seq in enumerate(videos):
        for k in range(n_windows(len(seq), length, stride)):
            idx.append((vi, k * stride))
    return idx


def assemble_batch(videos, index, length, mode, dtype):
    inputs, targets = [], []
    for vi, start in index:
        frames = videos[vi].frames
        w = ClipWindow(frames[start:start + length], frames[start + length], start + length)
        x, y = build_target(w, mode)
        inputs.append(x)
        targets.append(y.reshape((-1,) + y.shape[-2:]))
    return np.stack(inputs).astype(dtype, copy=False), np.stack(targets).astype(dtype, copy=False)


def _check_mode(model_cfg, train_cfg):
    want = model_cfg.n_frames if train_cfg.mode == "reconstruction-6" else 1
    if model_cfg.out_frames != want:
        raise ConfigError(
            f"mode {train_cfg.mode} needs out_frames={want}; model config has {model_cfg.out_frames}")


def train(dataset, model_cfg: M.ModelConfig, train_cfg: TrainConfig, params: M.ModelParams | None = None,
          state: AdamState | None = None, max_steps: int | None = None):
    """Run the optimisation loop; returns ``(params, AdamState, TrainHistory)``.

    ``max_steps`` stops early after that many updates (the epoch in progress
    is recorded with the batches seen so far).
    """
    _check_mode(model_cfg, train_cfg)
    videos = _videos(dataset)
    if not videos:
        raise DataError("training dataset is empty")
    for seq in videos:
        if seq.frames.shape[1:] != (model_cfg.channels, model_cfg.height, model_cfg.width):
            raise DimensionError(
                f"video {seq.source_id!r} frames {seq.frames.shape[1:]} do not match model "
                f"{(model_cfg.channels, model_cfg.height, model_cfg.width)}")
    index = _window_index(videos, model_cfg.n_frames, train_cfg.stride)
    if not index:
        raise DataError("no training windows: every video is too short for the input length")

    dtype = train_cfg.dtype
    params = (params if params is not None else M.init_params(model_cfg, seed=train_cfg.seed)).astype(dtype)
    state = state if state is not None else AdamState()
    fingerprint = hashlib.sha256(json.dumps(
        {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, sort_keys=True).encode()).hexdigest()[:16]
    history = TrainHistory(fingerprint=fingerprint)
    rng = np.random.default_rng(train_cfg.seed)
    weights, buffers = params.weights, params.buffers
    bs = train_cfg.batch_size
    steps = 0
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(index))
        losses = []
        for bi in range(0, len(order), bs):
            batch = [index[j] for j in order[bi:bi + bs]]
            x, y = assemble_batch(videos, batch, model_cfg.n_frames, train_cfg.mode, dtype)
            cur = M.ModelParams(weights, buffers)
            pred, cache, new_buffers = M.forward(cur, x, model_cfg, training=True)
            loss, dpred = prediction_loss_grad(pred, y)
            if not np.isfinite(loss):
                raise NumericFault(f"non-finite loss at epoch {epoch}, batch {bi // bs}")
            grads = M.backward(dpred.astype(dtype, copy=False), cache, model_cfg)
            if train_cfg.clip_norm is not None:
                grads = _clip_grads(grads, train_cfg.clip_norm)
            weights, state = adam_update(weights, grads, state, train_cfg.learning_rate)
            buffers = new_buffers
            losses.append(loss)
            history.step_loss.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        history.epoch_loss.append(float(np.mean(losses)))
        history.wall_time.append(time.perf_counter() - t0)
        logger.info("epoch %d: loss %.6g (%d batches)", epoch, history.epoch_loss[-1], len(losses))
        if max_steps is not None and steps >= max_steps:
            break
    return M.ModelParams(weights, buffers), state, history


def fit(dataset, model_cfg: M.ModelConfig, train_cfg: TrainConfig, **kwargs):
    """Train on normal videos only; returns ``(ModelParams, TrainHistory)``."""
    params, _, history = train(dataset, model_cfg, train_cfg, **kwargs)
    return params, history


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# magic b"ANDT" | u32 version | u32 len | JSON header | tensor records | u32 crc32
# record: u16 name len | name | u8 dtype len | dtype str | u8 ndim | u32 * ndim | payload

CHECKPOINT_MAGIC = b"ANDT"
CHECKPOINT_VERSION = 1


def _tensor_record(name, arr):
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<").str.encode()
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(dt)) + dt + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def _collect_tensors(ckpt: Checkpoint):
    tensors = []
    for k in sorted(ckpt.params.weights):
        tensors.append(("w/" + k, ckpt.params.weights[k]))
    for k in sorted(ckpt.params.buffers):
        tensors.append(("b/" + k, ckpt.params.buffers[k]))
    for k in sorted(ckpt.opt_state.m):
        tensors.append(("m/" + k, ckpt.opt_state.m[k]))
    for k in sorted(ckpt.opt_state.v):
        tensors.append(("v/" + k, ckpt.opt_state.v[k]))
    return tensors


def save_checkpoint(ckpt: Checkpoint, path, version=CHECKPOINT_VERSION) -> None:
    """Write a checkpoint. Wall-clock times are not stored so reruns are byte-identical."""
    records = b"".join(_tensor_record(n, a) for n, a in _collect_tensors(ckpt))
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "history": {"epoch_loss": ckpt.history.epoch_loss, "step_loss": ckpt.history.step_loss,
                    "fingerprint": ckpt.history.fingerprint},
        "opt_step": ckpt.opt_state.step,
        "extra": ckpt.extra,
        "n_tensors": len(_collect_tensors(ckpt)),
        "payload_bytes": len(records),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<II", version, len(hb)) + hb + records
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path) -> Checkpoint:
    data = open(path, "rb").read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        if len(data) < 12 and CHECKPOINT_MAGIC.startswith(data[:4]):
            raise CheckpointTruncatedError(f"{path}: file ends inside the header")
        raise CheckpointError(f"{path}: not an ANDT checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    if len(data) < 12 + hlen + 4:
        raise CheckpointTruncatedError(f"{path}: file ends inside the config block")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        expected = 12 + hlen + int(header["payload_bytes"]) + 4
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        if zlib.crc32(data[:-4]) & 0xFFFFFFFF != struct.unpack_from("<I", data, len(data) - 4)[0]:
            raise CheckpointChecksumError(f"{path}: checksum mismatch") from exc
        raise CheckpointError(f"{path}: malformed config block") from exc
    if len(data) < expected:
        raise CheckpointTruncatedError(f"{path}: {len(data)} bytes, expected {expected}")
    body, (crc,) = data[:expected - 4], struct.unpack_from("<I", data, expected - 4)
    if len(data) != expected or zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch")

    off = 12 + hlen
    groups = {"w": {}, "b": {}, "m": {}, "v": {}}
    for _ in range(header["n_tensors"]):
        (nl,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nl].decode("utf-8")
        off += nl
        (dl,) = struct.unpack_from("<B", data, off)
        off += 1
        dt = np.dtype(data[off:off + dl].decode())
        off += dl
        (nd,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", data, off)
        off += 4 * nd
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        off += nbytes
        kind, key = name.split("/", 1)
        groups[kind][key] = arr.astype(dt.newbyteorder("="))
    hist = header["history"]
    tc = header.get("train_config")
    return Checkpoint(
        model_config=M.ModelConfig.from_dict(header["model_config"]),
        params=M.ModelParams(groups["w"], groups["b"]),
        opt_state=AdamState(groups["m"], groups["v"], header["opt_step"]),
        history=TrainHistory(hist["epoch_loss"], hist["step_loss"], [], hist["fingerprint"]),
        train_config=TrainConfig.from_dict(tc) if tc else None,
        extra=header.get("extra", {}),
    )


# --------------------------------------------------------------------------
# whole-model gradient check
# --------------------------------------------------------------------------

def full_model_gradcheck(config: M.ModelConfig | None = None, tolerance=1e-3, seed=0, batch=2, step=1e-5):
    """Finite-difference check of the loss gradient for every weight group.

    Weights are initialised and then perturbed so no group sits at a trivial
    value; batch norm runs in training mode. Returns a list of
    ``(group name, relative error)`` and the overall report.
    """
    cfg = config or M.tiny_config()
    rng = np.random.default_rng(seed)
    params = M.init_params(cfg, seed=seed)
    names = sorted(params.weights)
    for n in names:
        params.weights[n] = params.weights[n] + 0.3 * rng.standard_normal(params.weights[n].shape)
    clips = rng.uniform(0, 1, (batch,) + cfg.grid.clip_shape)
    target = rng.uniform(0, 1, (batch, cfg.channels * cfg.out_frames, cfg.height, cfg.width))
    buffers = params.buffers

    def fwd(*arrays):
        p = M.ModelParams(dict(zip(names, arrays)), buffers)
        pred, cache, _ = M.forward(p, clips, cfg, training=True)
        loss, dpred = prediction_loss_grad(pred, target)
        return np.array(loss), (cache, dpred)

    def bwd(dout, cache):
        c, dpred = cache
        grads = M.backward(dpred * float(dout), c, cfg)
        return tuple(grads[n] for n in names)

    op = DifferentiableOp("full_model", fwd, bwd)
    report = finite_diff_check(op, [params.weights[n] for n in names], tolerance=tolerance, step=step, seed=seed)
    per_group = [(names[i], err) for i, err in sorted(report.errors.items())]
    return per_group, report
