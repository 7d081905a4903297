"""Tubelet Transformer encoder with a progressive-upsampling conv decoder.

A clip of ``T`` frames is cut into non-overlapping ``t x h x w`` tubelets,
linearly embedded, prefixed with a learnable class token and summed with a
learnable position table. A stack of pre-norm Transformer blocks processes
the sequence; the normalized class-token row is the clip feature ``p``. Two
fully-connected layers expand ``p`` to a ``C0 x base x base`` map that the
decoder upsamples (2x per stage) back to frame resolution.

All functions are pure over a :class:`ModelParams` instance. Clips are laid
out ``T x C x H x W`` (optionally with a leading batch axis).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .exceptions import ConfigError, DimensionError, NumericFault

__all__ = [
    "ModelConfig", "TubeletGrid", "ModelParams", "EncoderTrace",
    "tiny_config", "param_shapes", "init_params",
    "tubelet_tokenize", "tubelet_untokenize", "embed_sequence",
    "encoder_forward", "decoder_forward", "predict_next_frame",
    "forward", "backward", "extract_features",
]


@dataclass(frozen=True)
class ModelConfig:
    """Network geometry and hyper-parameters.

    The defaults are the best settings of the published ablations (16x16
    patches, 2 layers, 6 heads, MLP width 4096, 6 input frames) with a
    ``8 x 8 x 512`` decoder seed upsampled over 5 stages to ``256 x 256 x 3``.
    """

    n_frames: int = 6
    height: int = 256
    width: int = 256
    channels: int = 3
    tubelet_t: int = 2
    patch_h: int = 16
    patch_w: int = 16
    embed_dim: int = 768
    n_layers: int = 2
    n_heads: int = 6
    mlp_size: int = 4096
    mlp_activation: str = "gelu"
    fc_hidden: int = 2048
    decoder_base: int = 8
    decoder_channels: tuple = (512, 256, 128, 64, 32, 32)
    out_frames: int = 1
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        self.validate()

    @property
    def n_stages(self):
        return len(self.decoder_channels) - 1

    @property
    def grid(self):
        return TubeletGrid.from_config(self)

    def validate(self):
        for name in ("n_frames", "height", "width", "tubelet_t", "patch_h", "patch_w",
                     "embed_dim", "n_heads", "mlp_size", "fc_hidden", "decoder_base", "out_frames"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.n_frames % self.tubelet_t:
            raise ConfigError(f"tubelet depth {self.tubelet_t} does not divide n_frames {self.n_frames}")
        if self.height % self.patch_h or self.width % self.patch_w:
            raise ConfigError(
                f"patch {self.patch_h}x{self.patch_w} does not divide frame {self.height}x{self.width}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.mlp_activation not in ("gelu", "relu"):
            raise ConfigError("mlp_activation must be 'gelu' or 'relu'")
        if len(self.decoder_channels) < 1 or min(self.decoder_channels) < 1:
            raise ConfigError("decoder_channels needs at least one positive width")
        side = self.decoder_base * 2 ** self.n_stages
        if side != self.height or side != self.width:
            raise ConfigError(
                f"decoder base {self.decoder_base} x 2^{self.n_stages} = {side} does not match "
                f"frame {self.height}x{self.width}")
        if self.out_frames not in (1, self.n_frames):
            raise ConfigError("out_frames must be 1 or n_frames")
        if self.dropout != 0.0:
            raise ConfigError("dropout is reserved; only 0.0 is supported")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def tiny_config(**overrides):
    """Smallest useful geometry: 2 frames of 8x8 grey, width 8, one block."""
    base = dict(n_frames=2, height=8, width=8, channels=1, tubelet_t=1, patch_h=4, patch_w=4,
                embed_dim=8, n_layers=1, n_heads=2, mlp_size=16, fc_hidden=16,
                decoder_base=2, decoder_channels=(4, 4, 3))
    base.update(overrides)
    return ModelConfig(**base)


@dataclass(frozen=True)
class TubeletGrid:
    n_t: int
    n_h: int
    n_w: int
    t: int
    h: int
    w: int
    channels: int

    @classmethod
    def from_config(cls, cfg: ModelConfig):
        return cls(cfg.n_frames // cfg.tubelet_t, cfg.height // cfg.patch_h, cfg.width // cfg.patch_w,
                   cfg.tubelet_t, cfg.patch_h, cfg.patch_w, cfg.channels)

    @property
    def n_tokens(self):
        return self.n_t * self.n_h * self.n_w

    @property
    def token_dim(self):
        return self.t * self.h * self.w * self.channels

    @property
    def clip_shape(self):
        return (self.n_t * self.t, self.channels, self.n_h * self.h, self.n_w * self.w)


@dataclass
class ModelParams:
    """Learnable arrays plus non-learned buffers (batch-norm running stats)."""

    weights: dict
    buffers: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype):
        return ModelParams({k: v.astype(dtype) for k, v in self.weights.items()},
                           {k: v.astype(dtype) for k, v in self.buffers.items()})

    def __getitem__(self, name):
        if name in self.weights:
            return self.weights[name]
        return self.buffers[name]


@dataclass
class EncoderTrace:
    z: list            # z_0 ... z_L
    z_mid: list        # z'_1 ... z'_L
    p: np.ndarray


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig):
    """Return ``(weight_shapes, buffer_shapes)`` without allocating anything."""
    g = cfg.grid
    k = cfg.embed_dim
    w = {
        "embed.E": (g.token_dim, k),
        "embed.cls": (1, k),
        "embed.pos": (g.n_tokens + 1, k),
    }
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}."
        w.update({
            pre + "ln1.gamma": (k,), pre + "ln1.beta": (k,),
            pre + "attn.wq": (k, k), pre + "attn.wk": (k, k),
            pre + "attn.wv": (k, k), pre + "attn.wo": (k, k),
            pre + "ln2.gamma": (k,), pre + "ln2.beta": (k,),
            pre + "mlp.w1": (k, cfg.mlp_size), pre + "mlp.b1": (cfg.mlp_size,),
            pre + "mlp.w2": (cfg.mlp_size, k), pre + "mlp.b2": (k,),
        })
    w["enc.ln.gamma"] = (k,)
    w["enc.ln.beta"] = (k,)
    ch = cfg.decoder_channels
    seed_size = cfg.decoder_base * cfg.decoder_base * ch[0]
    w.update({
        "dec.fc1.w": (k, cfg.fc_hidden), "dec.fc1.b": (cfg.fc_hidden,),
        "dec.fc2.w": (cfg.fc_hidden, seed_size), "dec.fc2.b": (seed_size,),
    })
    buf = {}
    for i in range(cfg.n_stages):
        pre = f"dec.stage{i}."
        w[pre + "conv"] = (ch[i + 1], ch[i], 3, 3)
        w[pre + "bn.gamma"] = (ch[i + 1],)
        w[pre + "bn.beta"] = (ch[i + 1],)
        buf[pre + "bn.running_mean"] = (ch[i + 1],)
        buf[pre + "bn.running_var"] = (ch[i + 1],)
    out_ch = cfg.channels * cfg.out_frames
    w["dec.out.w"] = (out_ch, ch[-1], 1, 1)
    w["dec.out.b"] = (out_ch,)
    return w, buf


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, seed: int | None = None, dtype=np.float64) -> ModelParams:
    """Truncated-normal (2 sigma) weights, zero biases/betas, unit gammas."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    wshapes, bshapes = param_shapes(cfg)
    weights = {}
    for name, shape in wshapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            weights[name] = np.ones(shape, dtype=dtype)
        elif leaf in ("beta", "b", "b1", "b2"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            weights[name] = _truncated_normal(rng, shape, cfg.init_std).astype(dtype)
    buffers = {}
    for name, shape in bshapes.items():
        fill = np.zeros if name.endswith("running_mean") else np.ones
        buffers[name] = fill(shape, dtype=dtype)
    return ModelParams(weights, buffers)


# --------------------------------------------------------------------------
# tokenization and embedding
# --------------------------------------------------------------------------

def _check_grid(shape, grid: TubeletGrid):
    t_, c, h, w = shape
    if c != grid.channels or t_ % grid.t or h % grid.h or w % grid.w:
        raise DimensionError(
            f"clip {shape} is not divisible into {grid.t}x{grid.h}x{grid.w} tubelets with {grid.channels} channels")
    if (t_ // grid.t, h // grid.h, w // grid.w) != (grid.n_t, grid.n_h, grid.n_w):
        raise DimensionError(f"clip {shape} does not match grid {grid}")


def tubelet_tokenize(clip: np.ndarray, grid: TubeletGrid) -> np.ndarray:
    """Split ``T x C x H x W`` (or batched) clips into flattened tubelets.

    Tokens are ordered time-major, then row, then column. Each token is
    flattened in (time, row, column, channel) order.
    """
    single = clip.ndim == 4
    cb = clip[None] if single else clip
    if cb.ndim != 5:
        raise DimensionError(f"expected T x C x H x W clip, got {clip.shape}")
    _check_grid(cb.shape[1:], grid)
    b = cb.shape[0]
    g = grid
    x = cb.reshape(b, g.n_t, g.t, g.channels, g.n_h, g.h, g.n_w, g.w)
    x = x.transpose(0, 1, 4, 6, 2, 5, 7, 3)
    tokens = x.reshape(b, g.n_tokens, g.token_dim)
    return tokens[0] if single else tokens


def tubelet_untokenize(tokens: np.ndarray, grid: TubeletGrid, clip_shape=None) -> np.ndarray:
    """Exact inverse of :func:`tubelet_tokenize`."""
    g = grid
    if clip_shape is not None and tuple(clip_shape[-4:]) != g.clip_shape:
        raise DimensionError(f"clip shape {clip_shape} does not match grid {g.clip_shape}")
    single = tokens.ndim == 2
    tb = tokens[None] if single else tokens
    if tb.shape[1:] != (g.n_tokens, g.token_dim):
        raise DimensionError(f"tokens {tokens.shape} do not match grid ({g.n_tokens}, {g.token_dim})")
    b = tb.shape[0]
    x = tb.reshape(b, g.n_t, g.n_h, g.n_w, g.t, g.h, g.w, g.channels)
    x = x.transpose(0, 1, 4, 7, 2, 5, 3, 6)
    clip = x.reshape((b,) + g.clip_shape)
    return clip[0] if single else clip


def embed_sequence(tokens, params: ModelParams):
    """``z_0 = [x_cls; x_1 E; ...; x_N E] + E_pos``."""
    return _embed_forward(tokens, params)[0]


def _embed_forward(tokens, params):
    E = params["embed.E"]
    if tokens.shape[-1] != E.shape[0]:
        raise DimensionError(f"token width {tokens.shape[-1]} does not match projection {E.shape}")
    proj = tokens @ E
    cls = np.broadcast_to(params["embed.cls"], tokens.shape[:-2] + params["embed.cls"].shape)
    z0 = np.concatenate([cls, proj], axis=-2) + params["embed.pos"]
    return z0, tokens


def _embed_backward(dz0, tokens, grads):
    t2 = tokens.reshape(-1, tokens.shape[-1])
    d2 = dz0[..., 1:, :].reshape(-1, dz0.shape[-1])
    grads["embed.E"] = t2.T @ d2
    lead = tuple(range(dz0.ndim - 2))
    grads["embed.cls"] = dz0[..., :1, :].sum(axis=lead) if lead else dz0[:1, :].copy()
    grads["embed.pos"] = dz0.sum(axis=lead) if lead else dz0.copy()


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

def _act_forward(cfg, x):
    return nx.gelu_forward(x) if cfg.mlp_activation == "gelu" else nx.relu_forward(x)


def _act_backward(cfg, d, cache):
    return (nx.gelu_backward if cfg.mlp_activation == "gelu" else nx.relu_backward)(d, cache)[0]


def _encoder_forward(z0, params, cfg):
    caches = []
    zs = [z0]
    mids = []
    z = z0
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}."
        h1, c_ln1 = nx.layer_norm_forward(z, params[pre + "ln1.gamma"], params[pre + "ln1.beta"], cfg.ln_eps)
        a, c_att = nx.mha_forward(h1, params[pre + "attn.wq"], params[pre + "attn.wk"],
                                  params[pre + "attn.wv"], params[pre + "attn.wo"], cfg.n_heads)
        zm = a + z
        h2, c_ln2 = nx.layer_norm_forward(zm, params[pre + "ln2.gamma"], params[pre + "ln2.beta"], cfg.ln_eps)
        u, c_fc1 = nx.linear_forward(h2, params[pre + "mlp.w1"], params[pre + "mlp.b1"])
        g, c_act = _act_forward(cfg, u)
        m, c_fc2 = nx.linear_forward(g, params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        z = m + zm
        if not (np.all(np.isfinite(zm)) and np.all(np.isfinite(z))):
            raise NumericFault(f"non-finite activation in encoder layer {layer}")
        caches.append((c_ln1, c_att, c_ln2, c_fc1, c_act, c_fc2))
        mids.append(zm)
        zs.append(z)
    p, c_ln = nx.layer_norm_forward(z[..., 0, :], params["enc.ln.gamma"], params["enc.ln.beta"], cfg.ln_eps)
    return p, EncoderTrace(zs, mids, p), (caches, c_ln, z.shape)


def _encoder_backward(dp, cache, cfg, grads):
    caches, c_ln, zshape = cache
    d0, grads["enc.ln.gamma"], grads["enc.ln.beta"] = nx.layer_norm_backward(dp, c_ln)
    dz = np.zeros(zshape, dtype=dp.dtype)
    dz[..., 0, :] = d0
    for layer in reversed(range(cfg.n_layers)):
        pre = f"enc{layer}."
        c_ln1, c_att, c_ln2, c_fc1, c_act, c_fc2 = caches[layer]
        dg, grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = nx.linear_backward(dz, c_fc2)
        du = _act_backward(cfg, dg, c_act)
        dh2, grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = nx.linear_backward(du, c_fc1)
        dzm, grads[pre + "ln2.gamma"], grads[pre + "ln2.beta"] = nx.layer_norm_backward(dh2, c_ln2)
        dzm = dzm + dz
        dh1, grads[pre + "attn.wq"], grads[pre + "attn.wk"], grads[pre + "attn.wv"], grads[pre + "attn.wo"] = \
            nx.mha_backward(dzm, c_att)
        dzp, grads[pre + "ln1.gamma"], grads[pre + "ln1.beta"] = nx.layer_norm_backward(dh1, c_ln1)
        dz = dzp + dzm
    return dz


def encoder_forward(z0, params: ModelParams, cfg: ModelConfig):
    """Run the pre-norm encoder; returns ``(p, EncoderTrace)``."""
    p, trace, _ = _encoder_forward(z0, params, cfg)
    return p, trace


# --------------------------------------------------------------------------
# decoder
# --------------------------------------------------------------------------

def _decoder_forward(p, params, cfg, training):
    single = p.ndim == 1
    pb = p[None] if single else p
    b = pb.shape[0]
    h, c_fc1 = nx.linear_forward(pb, params["dec.fc1.w"], params["dec.fc1.b"])
    h, c_r1 = nx.relu_forward(h)
    x, c_fc2 = nx.linear_forward(h, params["dec.fc2.w"], params["dec.fc2.b"])
    x = x.reshape(b, cfg.decoder_channels[0], cfg.decoder_base, cfg.decoder_base)
    stage_caches = []
    new_buffers = {}
    for i in range(cfg.n_stages):
        pre = f"dec.stage{i}."
        x, c_up = nx.upsample_forward(x)
        x, c_conv = nx.conv2d_forward(x, params[pre + "conv"], 1, 1)
        x, c_bn, (rm, rv) = nx.batch_norm_forward(
            x, params[pre + "bn.gamma"], params[pre + "bn.beta"],
            params[pre + "bn.running_mean"], params[pre + "bn.running_var"],
            training, cfg.bn_eps, cfg.bn_momentum)
        new_buffers[pre + "bn.running_mean"] = rm
        new_buffers[pre + "bn.running_var"] = rv
        x, c_relu = nx.relu_forward(x)
        stage_caches.append((c_up, c_conv, c_bn, c_relu))
    x, c_out = nx.conv2d_forward(x, params["dec.out.w"], 1, 0)
    x = x + params["dec.out.b"][None, :, None, None]
    y, c_sig = nx.sigmoid_forward(x)
    if single:
        y = y[0]
    cache = (single, c_fc1, c_r1, c_fc2, stage_caches, c_out, c_sig)
    return y, cache, new_buffers


def _decoder_backward(dy, cache, cfg, grads):
    single, c_fc1, c_r1, c_fc2, stage_caches, c_out, c_sig = cache
    if single:
        dy = dy[None]
    (dx,) = nx.sigmoid_backward(dy, c_sig)
    grads["dec.out.b"] = dx.sum(axis=(0, 2, 3))
    dx, grads["dec.out.w"] = nx.conv2d_backward(dx, c_out)
    for i in reversed(range(cfg.n_stages)):
        pre = f"dec.stage{i}."
        c_up, c_conv, c_bn, c_relu = stage_caches[i]
        (dx,) = nx.relu_backward(dx, c_relu)
        dx, grads[pre + "bn.gamma"], grads[pre + "bn.beta"] = nx.batch_norm_backward(dx, c_bn)
        dx, grads[pre + "conv"] = nx.conv2d_backward(dx, c_conv)
        (dx,) = nx.upsample_backward(dx, c_up)
    dx = dx.reshape(dx.shape[0], -1)
    dh, grads["dec.fc2.w"], grads["dec.fc2.b"] = nx.linear_backward(dx, c_fc2)
    (dh,) = nx.relu_backward(dh, c_r1)
    dp, grads["dec.fc1.w"], grads["dec.fc1.b"] = nx.linear_backward(dh, c_fc1)
    return dp[0] if single else dp


def decoder_forward(p, params: ModelParams, cfg: ModelConfig, training=False):
    """Expand the feature ``p`` (``K`` or ``B x K``) into an output frame stack.

    Returns ``C' x H x W`` (or ``B x C' x H x W``) with ``C' = C * out_frames``;
    values lie in [0, 1].
    """
    return _decoder_forward(p, params, cfg, training)[0]


# --------------------------------------------------------------------------
# full model
# --------------------------------------------------------------------------

def forward(params: ModelParams, clips: np.ndarray, cfg: ModelConfig, training=False):
    """Batched forward pass over ``B x T x C x H x W`` clips.

    Returns ``(frames, cache, new_buffers)`` where ``frames`` is
    ``B x C*out_frames x H x W`` and ``new_buffers`` holds the updated
    batch-norm running statistics (unchanged when ``training`` is False).
    """
    if clips.ndim != 5:
        raise DimensionError(f"expected B x T x C x H x W clips, got {clips.shape}")
    tokens = tubelet_tokenize(clips, cfg.grid)
    z0, c_emb = _embed_forward(tokens, params)
    p, _, c_enc = _encoder_forward(z0, params, cfg)
    y, c_dec, new_buffers = _decoder_forward(p, params, cfg, training)
    return y, (c_emb, c_enc, c_dec, p), new_buffers


def backward(dframes: np.ndarray, cache, cfg: ModelConfig) -> dict:
    """Gradients of every weight given the cotangent of :func:`forward`'s output."""
    c_emb, c_enc, c_dec, _ = cache
    grads = {}
    dp = _decoder_backward(dframes, c_dec, cfg, grads)
    dz0 = _encoder_backward(dp, c_enc, cfg, grads)
    _embed_backward(dz0, c_emb, grads)
    return grads


def predict_next_frame(clip: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Inference-mode prediction for one ``T x C x H x W`` clip (or a batch)."""
    single = clip.ndim == 4
    y, _, _ = forward(params, clip[None] if single else clip, cfg, training=False)
    return y[0] if single else y


def extract_features(clips: np.ndarray, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Encoder output feature ``p`` for each clip in a batch (``B x K``)."""
    tokens = tubelet_tokenize(clips, cfg.grid)
    p, _, _ = _encoder_forward(_embed_forward(tokens, params)[0], params, cfg)
    return p
