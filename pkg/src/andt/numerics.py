"""Dense array kernels with hand-written vector-Jacobian products.

Arrays are plain ``numpy.ndarray`` objects. Every differentiable op comes as a
pair: ``<op>_forward(...)`` returns ``(out, cache)`` and ``<op>_backward(dout,
cache)`` returns the cotangent of each differentiable input. Functions are
pure: nothing is mutated in place, so they are safe to call concurrently.

Reductions (means, variances) accumulate in float64 even for float32 inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .exceptions import DegenerateBatchError, DimensionError, ConfigError, GradCheckAborted

__all__ = [
    "matmul", "matmul_forward", "matmul_backward",
    "linear_forward", "linear_backward",
    "layer_norm", "layer_norm_forward", "layer_norm_backward",
    "softmax", "softmax_forward", "softmax_backward",
    "gelu_forward", "gelu_backward", "relu_forward", "relu_backward",
    "sigmoid_forward", "sigmoid_backward",
    "multi_head_attention", "mha_forward", "mha_backward",
    "conv2d", "conv2d_forward", "conv2d_backward",
    "upsample_nn_2x", "upsample_forward", "upsample_backward",
    "batch_norm", "batch_norm_forward", "batch_norm_backward",
    "DifferentiableOp", "GradCheckReport", "finite_diff_check",
    "OP_REGISTRY", "run_op_suite",
]


def _mean64(x, axis, keepdims=True):
    return np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64)


# --------------------------------------------------------------------------
# matmul / linear
# --------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of an ``m x k`` and a ``k x n`` array."""
    return matmul_forward(a, b)[0]


def matmul_forward(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b, (a, b)


def matmul_backward(dout, cache):
    a, b = cache
    return dout @ b.T, a.T @ dout


def linear_forward(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    dx = dout @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


# --------------------------------------------------------------------------
# layer norm
# --------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-6):
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_forward(x, gamma, beta, eps=1e-6):
    """Normalize each last-axis slice with its population variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last extent {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    if eps < 0:
        raise ConfigError("layer_norm: eps must be non-negative")
    mu = _mean64(x, -1)
    xc = x - mu
    var = _mean64(xc * xc, -1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype, copy=False)
    out = gamma * xhat + beta
    return out, (xhat, inv.astype(x.dtype, copy=False), gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=lead)
    dbeta = dout.sum(axis=lead)
    dxhat = dout * gamma
    dx = (inv / d) * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# softmax and pointwise nonlinearities
# --------------------------------------------------------------------------

def softmax(x, axis=-1):
    return softmax_forward(x, axis)[0]


def softmax_forward(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(dout, cache):
    y, axis = cache
    return (y * (dout - (dout * y).sum(axis=axis, keepdims=True)),)


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward(x):
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    return x * cdf, (x, cdf)


def gelu_backward(dout, cache):
    x, cdf = cache
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return (dout * (cdf + x * pdf),)


def relu_forward(x):
    mask = x > 0
    return x * mask, (mask,)


def relu_backward(dout, cache):
    (mask,) = cache
    return (dout * mask,)


def sigmoid_forward(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, (out,)


def sigmoid_backward(dout, cache):
    (y,) = cache
    return (dout * y * (1.0 - y),)


# --------------------------------------------------------------------------
# multi-head self-attention
# --------------------------------------------------------------------------

def multi_head_attention(z, wq, wk, wv, wo, heads):
    return mha_forward(z, wq, wk, wv, wo, heads)[0]


def mha_forward(z, wq, wk, wv, wo, heads):
    """Self-attention over the second-to-last axis of ``z`` (``... x S x K``).

    Each head attends with ``softmax(Q_h K_h^T / sqrt(K / heads))``; head
    outputs are concatenated and projected by ``wo``.
    """
    k_dim = z.shape[-1]
    if heads < 1 or k_dim % heads:
        raise ConfigError(f"multi_head_attention: width {k_dim} not divisible by heads={heads}")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (k_dim, k_dim):
            raise DimensionError(f"multi_head_attention: {name} has shape {w.shape}, expected {(k_dim, k_dim)}")
    lead = z.shape[:-2]
    s = z.shape[-2]
    dh = k_dim // heads
    zb = z.reshape((-1, s, k_dim))

    def split(a):
        return a.reshape(a.shape[0], s, heads, dh).transpose(0, 2, 1, 3)

    q = split(zb @ wq)
    k = split(zb @ wk)
    v = split(zb @ wv)
    scale = 1.0 / np.sqrt(dh)
    att, _ = softmax_forward((q @ k.transpose(0, 1, 3, 2)) * scale, -1)
    o = (att @ v).transpose(0, 2, 1, 3).reshape(zb.shape)
    out = (o @ wo).reshape(lead + (s, k_dim))
    cache = (zb, q, k, v, att, o, wq, wk, wv, wo, heads, scale, z.shape)
    return out, cache


def mha_backward(dout, cache):
    zb, q, k, v, att, o, wq, wk, wv, wo, heads, scale, zshape = cache
    b, s, k_dim = zb.shape
    dh = k_dim // heads
    dy = dout.reshape(b, s, k_dim)
    dwo = o.reshape(-1, k_dim).T @ dy.reshape(-1, k_dim)
    do = (dy @ wo.T).reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    def merge(a):
        return a.transpose(0, 2, 1, 3).reshape(b * s, k_dim)

    dq, dk, dv = merge(dq), merge(dk), merge(dv)
    z2 = zb.reshape(-1, k_dim)
    dwq = z2.T @ dq
    dwk = z2.T @ dk
    dwv = z2.T @ dv
    dz = (dq @ wq.T + dk @ wk.T + dv @ wv.T).reshape(zshape)
    return dz, dwq, dwk, dwv, dwo


# --------------------------------------------------------------------------
# convolution and upsampling
# --------------------------------------------------------------------------

def conv2d(x, kernels, stride=1, padding=0):
    return conv2d_forward(x, kernels, stride, padding)[0]


def _conv_out(n, k, stride, padding, axis):
    span = n + 2 * padding - k
    if span < 0:
        raise DimensionError(f"conv2d: kernel extent {k} exceeds padded {axis} extent {n + 2 * padding}")
    if span % stride:
        raise DimensionError(
            f"conv2d: output {axis} extent ({n}+2*{padding}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def conv2d_forward(x, kernels, stride=1, padding=0):
    """Cross-correlation of ``C_in x H x W`` (optionally batched) input."""
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: expected (B,)C,H,W input and 4-d kernels, got {x.shape} and {kernels.shape}")
    b, c, h, w = xb.shape
    co, ci, kh, kw = kernels.shape
    if ci != c:
        raise DimensionError(f"conv2d: input channels {c} do not match kernels {kernels.shape}")
    ho = _conv_out(h, kh, stride, padding, "height")
    wo = _conv_out(w, kw, stride, padding, "width")
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) -> (B*Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    kmat = kernels.reshape(co, -1)
    out = (cols @ kmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)
    if single:
        out = out[0]
    return out, (cols, kernels, xp.shape, x.shape, stride, padding, single)


def conv2d_backward(dout, cache):
    cols, kernels, xp_shape, x_shape, stride, padding, single = cache
    db = dout[None] if single else dout
    b, co, ho, wo = db.shape
    _, ci, kh, kw = kernels.shape
    dmat = db.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    dk = (dmat.T @ cols).reshape(kernels.shape)
    dcols = (dmat @ kernels.reshape(co, -1)).reshape(b, ho, wo, ci, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    if single:
        dxp = dxp[0]
    return dxp.reshape(x_shape), dk


def upsample_nn_2x(x):
    return upsample_forward(x)[0]


def upsample_forward(x):
    """Nearest-neighbour 2x upsampling of the last two axes."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1), (x.shape,)


def upsample_backward(dout, cache):
    (shape,) = cache
    h, w = shape[-2:]
    return (dout.reshape(shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training=True, eps=1e-5, momentum=0.1):
    out, _, stats = batch_norm_forward(x, gamma, beta, running_mean, running_var, training, eps, momentum)
    return out, stats


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training=True, eps=1e-5, momentum=0.1):
    """Per-channel normalization of a ``B x C x H x W`` array.

    Returns ``(out, cache, (new_running_mean, new_running_var))``. In training
    mode the batch statistics (population variance) are used and the running
    statistics are blended as ``(1 - momentum) * old + momentum * batch``; in
    inference mode the running statistics are used and returned unchanged.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm: expected B x C x H x W, got {x.shape}")
    c = x.shape[1]
    for name, a in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if a.shape != (c,):
            raise DimensionError(f"batch_norm: {name} has shape {a.shape}, expected {(c,)}")
    axes = (0, 2, 3)
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DegenerateBatchError("batch_norm: training mode needs at least 2 values per channel")
        mean = _mean64(x, axes, keepdims=False)
        var = _mean64((x - mean[None, :, None, None]) ** 2, axes, keepdims=False)
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var
        new_rm = new_rm.astype(running_mean.dtype, copy=False)
        new_rv = new_rv.astype(running_var.dtype, copy=False)
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - mean.astype(x.dtype, copy=False)[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma, training), (new_rm, new_rv)


def batch_norm_backward(dout, cache):
    xhat, inv, gamma, training = cache
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma[None, :, None, None]
    g = inv[None, :, None, None]
    if not training:
        return dxhat * g, dgamma, dbeta
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = (g / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DifferentiableOp:
    """A forward/backward pair acting on a tuple of array inputs.

    ``forward(*inputs)`` returns ``(out, cache)``; ``backward(dout, cache)``
    returns one cotangent per input (``None`` for inputs that are not
    differentiated).
    """

    name: str
    forward: Callable
    backward: Callable


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    errors: dict = field(default_factory=dict)
    tolerance: float = 1e-4
    passed: bool = False

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{self.op_name:<24s} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} {flag}"


def _rel_error(analytic, numeric, floor=1e-8):
    diff = np.linalg.norm((analytic - numeric).ravel())
    return float(diff / max(np.linalg.norm(numeric.ravel()), floor))


def finite_diff_check(op: DifferentiableOp, inputs: Sequence[np.ndarray], tolerance=1e-4,
                      step=1e-5, seed=0) -> GradCheckReport:
    """Compare ``op.backward`` against central differences.

    The output is reduced to a scalar by a fixed random projection ``<r, out>``;
    its gradient with respect to every input element is estimated with central
    differences and compared to ``op.backward(r, cache)`` by norm-wise relative
    error. Inputs must be float64.
    """
    inputs = [np.array(a, dtype=np.float64, copy=True) for a in inputs]
    for a in inputs:
        if a.dtype != np.float64:
            raise TypeError("finite_diff_check requires float64 inputs")
    out, cache = op.forward(*inputs)
    if not np.all(np.isfinite(out)):
        raise GradCheckAborted(f"{op.name}: forward produced non-finite values")
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(np.shape(out))
    grads = op.backward(proj, cache)

    def objective(args):
        val = float(np.sum(op.forward(*args)[0] * proj))
        if not np.isfinite(val):
            raise GradCheckAborted(f"{op.name}: non-finite objective during perturbation")
        return val

    errors = {}
    for idx, (x, g) in enumerate(zip(inputs, grads)):
        if g is None:
            continue
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise GradCheckAborted(f"{op.name}: backward produced non-finite cotangent for input {idx}")
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = objective(inputs)
            flat[j] = orig - step
            fm = objective(inputs)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * step)
        errors[idx] = _rel_error(g.reshape(x.shape), num)
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(op.name, worst, errors, tolerance, worst <= tolerance)


# Registered ops with random input factories; used by the gradcheck command.

def _rand_shape(rng, ndim, lo=2, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _away_from_zero(rng, shape):
    return np.sign(rng.standard_normal(shape)) * (0.1 + np.abs(rng.standard_normal(shape)))


def _mk_matmul(rng):
    m, k, n = _rand_shape(rng, 3)
    return [rng.standard_normal((m, k)), rng.standard_normal((k, n))]


def _mk_linear(rng):
    lead = _rand_shape(rng, 2)
    k, n = _rand_shape(rng, 2)
    return [rng.standard_normal(lead + (k,)), rng.standard_normal((k, n)), rng.standard_normal(n)]


def _mk_layer_norm(rng):
    shape = _rand_shape(rng, 2) + (int(rng.integers(3, 9)),)
    d = shape[-1]
    return [rng.standard_normal(shape), 1.0 + 0.1 * rng.standard_normal(d), rng.standard_normal(d)]


def _mk_pointwise(rng):
    return [rng.standard_normal(_rand_shape(rng, 3))]


def _mk_relu(rng):
    return [_away_from_zero(rng, _rand_shape(rng, 3))]


def _mk_mha(rng):
    heads = int(rng.integers(1, 3))
    k = heads * int(rng.integers(2, 4))
    s = int(rng.integers(1, 5))
    b = int(rng.integers(1, 3))
    ws = [rng.standard_normal((k, k)) * 0.5 for _ in range(4)]
    return [rng.standard_normal((b, s, k))] + ws + [heads]


def _mk_conv(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    ksz = int(rng.choice([1, 3]))
    c_in, c_out = _rand_shape(rng, 2, 1, 3)
    n = stride * int(rng.integers(2, 4)) + ksz - 2 * padding
    n = max(n, ksz)
    while (n + 2 * padding - ksz) % stride:
        n += 1
    return [rng.standard_normal((int(rng.integers(1, 3)), c_in, n, n)),
            rng.standard_normal((c_out, c_in, ksz, ksz)), stride, padding]


def _mk_upsample(rng):
    return [rng.standard_normal(_rand_shape(rng, 3, 1, 4))]


def _mk_batch_norm(rng):
    b, c, h, w = _rand_shape(rng, 4, 2, 4)
    return [rng.standard_normal((b, c, h, w)) * 2 + 1, 1.0 + 0.1 * rng.standard_normal(c),
            rng.standard_normal(c)]


def _static_tail(forward, backward, n_static, name):
    # trailing inputs are hyper-parameters (heads, stride, ...) and are not differentiated
    def fwd(*args):
        return forward(*args)

    def bwd(dout, cache):
        return tuple(backward(dout, cache)) + (None,) * n_static

    return DifferentiableOp(name, fwd, bwd)


def _bn_train_forward(x, gamma, beta):
    c = x.shape[1]
    out, cache, _ = batch_norm_forward(x, gamma, beta, np.zeros(c), np.ones(c), True, 1e-5, 0.1)
    return out, cache


def _bn_infer_forward(x, gamma, beta):
    c = x.shape[1]
    rm = np.linspace(-0.5, 0.5, c)
    rv = np.linspace(0.5, 2.0, c)
    out, cache, _ = batch_norm_forward(x, gamma, beta, rm, rv, False, 1e-5, 0.1)
    return out, cache


def _mha_op():
    def fwd(z, wq, wk, wv, wo, heads):
        return mha_forward(z, wq, wk, wv, wo, int(heads))
    return _static_tail(fwd, mha_backward, 1, "multi_head_attention")


def _conv_op():
    def fwd(x, k, stride, padding):
        return conv2d_forward(x, k, int(stride), int(padding))
    return _static_tail(fwd, conv2d_backward, 2, "conv2d")


def _float_inputs(op, inputs):
    """Split float64 array inputs from trailing integer hyper-parameters."""
    arrays = [a for a in inputs if isinstance(a, np.ndarray)]
    static = [a for a in inputs if not isinstance(a, np.ndarray)]
    if not static:
        return op, arrays

    def fwd(*arrs):
        return op.forward(*arrs, *static)

    def bwd(dout, cache):
        return op.backward(dout, cache)[:len(arrays)]

    return DifferentiableOp(op.name, fwd, bwd), arrays


OP_REGISTRY: dict[str, tuple[DifferentiableOp, Callable]] = {
    "matmul": (DifferentiableOp("matmul", matmul_forward, matmul_backward), _mk_matmul),
    "linear": (DifferentiableOp("linear", linear_forward, linear_backward), _mk_linear),
    "layer_norm": (DifferentiableOp("layer_norm", layer_norm_forward, layer_norm_backward), _mk_layer_norm),
    "softmax": (DifferentiableOp("softmax", softmax_forward, softmax_backward), _mk_pointwise),
    "gelu": (DifferentiableOp("gelu", gelu_forward, gelu_backward), _mk_pointwise),
    "relu": (DifferentiableOp("relu", relu_forward, relu_backward), _mk_relu),
    "sigmoid": (DifferentiableOp("sigmoid", sigmoid_forward, sigmoid_backward), _mk_pointwise),
    "multi_head_attention": (_mha_op(), _mk_mha),
    "conv2d": (_conv_op(), _mk_conv),
    "upsample_nn_2x": (DifferentiableOp("upsample_nn_2x", upsample_forward, upsample_backward), _mk_upsample),
    "batch_norm_train": (DifferentiableOp("batch_norm_train", _bn_train_forward, batch_norm_backward),
                         _mk_batch_norm),
    "batch_norm_infer": (DifferentiableOp("batch_norm_infer", _bn_infer_forward, batch_norm_backward),
                         _mk_batch_norm),
}


def run_op_suite(tolerance=1e-4, seeds=range(10), step=1e-5) -> list[GradCheckReport]:
    """Check every registered op on random shapes, one report per op.

    The report carries the worst relative error over all seeds.
    """
    reports = []
    for name, (op, make) in OP_REGISTRY.items():
        worst = 0.0
        errors = {}
        for seed in seeds:
            rng = np.random.default_rng(1000 + seed)
            wrapped, arrays = _float_inputs(op, make(rng))
            rep = finite_diff_check(wrapped, arrays, tolerance=tolerance, step=step, seed=seed)
            errors[seed] = rep.max_rel_error
            worst = max(worst, rep.max_rel_error)
        reports.append(GradCheckReport(name, worst, errors, tolerance, worst <= tolerance))
    return reports
