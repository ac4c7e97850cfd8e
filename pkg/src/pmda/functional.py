"""Differentiable primitives over :class:`~pmda.tensor.Tensor`.

Every function returns a new tensor; when any operand requires a gradient the
result carries a backward closure mapping the output gradient to one gradient
per operand (``None`` for constants).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidLabelError, InvalidShapeError, InvalidStatisticsError
from .tensor import Tensor, as_tensor, make_result

DEFAULT_EPS = 1e-5
IGNORE_INDEX = 255


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data / b.data, (a, b), bw, "div")


def scale(x, s):
    x = as_tensor(x)
    s = float(s)

    def bw(g):
        return (g * s,)

    return make_result(x.data * x.data.dtype.type(s), (x,), bw, "scale")


def square(x):
    x = as_tensor(x)

    def bw(g):
        return (2 * g * x.data,)

    return make_result(x.data * x.data, (x,), bw, "square")


def sqrt(x):
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):  # negative input surfaces as NonFiniteError below
        out = np.sqrt(x.data)

    def bw(g):
        return (g / (2 * out),)

    return make_result(out, (x,), bw, "sqrt")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise InvalidShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), bw, "reshape")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise InvalidShapeError(f"concat: {e}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_result(out, tensors, bw, "concat")


def batch_slice(x, start, stop):
    """Rows ``start:stop`` along the batch axis."""
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return make_result(x.data[start:stop].copy(), (x,), bw, "batch_slice")


def l2norm(x):
    """Euclidean norm of all entries (a scalar)."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data.astype(np.float64) ** 2)).astype(x.dtype)

    def bw(g):
        if n == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / n,)

    return make_result(np.asarray(n), (x,), bw, "l2norm")


def matvec(m, v):
    m, v = as_tensor(m), as_tensor(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise InvalidShapeError(f"matvec: {m.shape} x {v.shape}")

    def bw(g):
        return np.outer(g, v.data), m.data.T @ g

    return make_result(m.data @ v.data, (m, v), bw, "matvec")


# ------------------------------------------------------------- spatial ops

def _check_4d(x, op):
    if x.ndim != 4:
        raise InvalidShapeError(f"{op}: expected B x C x H x W, got {x.shape}")


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Zero-padded 2-D cross-correlation; output is B x Cout x H' x W'."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_4d(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise InvalidShapeError(f"conv2d: kernel must be Cout x Cin x k x k, got {kernel.shape}")
    if stride < 1 or pad < 0:
        raise InvalidShapeError(f"conv2d: bad stride {stride} / pad {pad}")
    b, cin, h, w = x.shape
    cout, kcin, k, _ = kernel.shape
    if kcin != cin:
        raise InvalidShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise InvalidShapeError(f"conv2d: kernel {k} larger than padded input {h}x{w}+{pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise InvalidShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, cin * k * k)
    wmat = kernel.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(np.ascontiguousarray(out), parents, bw, "conv2d")


def maxpool2x2(x):
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped.

    The gradient goes to the first maximal element of each window in
    row-major order.
    """
    x = as_tensor(x)
    _check_4d(x, "maxpool2x2")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise InvalidShapeError(f"maxpool2x2: input {h}x{w} too small")
    ho, wo = h // 2, w // 2
    blocks = x.data[:, :, :2 * ho, :2 * wo].reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        gx = np.zeros_like(x.data)
        gx[:, :, :2 * ho, :2 * wo] = gb
        return (gx,)

    return make_result(out, (x,), bw, "maxpool2x2")


def upsample_nearest2x(x):
    x = as_tensor(x)
    _check_4d(x, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    b, c, h, w = x.shape

    def bw(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw, "upsample_nearest2x")


def upsample_to(x, size):
    """Nearest upsampling by repeated doubling until spatial size ``size``."""
    while x.shape[2] < size[0]:
        x = upsample_nearest2x(x)
    if tuple(x.shape[2:]) != tuple(size):
        raise InvalidShapeError(f"cannot upsample {x.shape[2:]} to {size} by doubling")
    return x


# ------------------------------------------------------------ normalisation

def softmax_channels(x):
    """Softmax over axis 1."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (x,), bw, "softmax_channels")


def log_softmax_channels(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax_channels")


def channel_stats(x, eps=DEFAULT_EPS):
    """Per-sample, per-channel spatial mean and sqrt(biased variance + eps)."""
    x = as_tensor(x)
    _check_4d(x, "channel_stats")
    b, c, h, w = x.shape
    n = h * w
    mu = x.data.mean(axis=(2, 3))
    centered = x.data - mu[:, :, None, None]
    var = (centered * centered).mean(axis=(2, 3))
    sigma = np.sqrt(var + x.dtype.type(eps))

    def bw_mu(g):
        return (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),)

    def bw_sigma(g):
        return ((g / sigma)[:, :, None, None] * centered / n,)

    return (make_result(mu, (x,), bw_mu, "channel_mean"),
            make_result(sigma, (x,), bw_sigma, "channel_std"))


def adain(content, style_mu, style_sigma, eps=DEFAULT_EPS):
    """sigma_s * (x - mu(x)) / sigma(x) + mu_s, per sample and channel."""
    content, style_mu, style_sigma = as_tensor(content), as_tensor(style_mu), as_tensor(style_sigma)
    _check_4d(content, "adain")
    bc = content.shape[:2]
    if style_mu.shape != bc or style_sigma.shape != bc:
        raise InvalidShapeError(f"adain: style stats {style_mu.shape}/{style_sigma.shape} vs content {bc}")
    if not (style_sigma.data > 0).all():
        raise InvalidStatisticsError("adain: style sigma must be strictly positive")
    mu, sigma = channel_stats(content, eps)
    expand = lambda t: reshape(t, bc + (1, 1))  # noqa: E731
    normed = div(sub(content, expand(mu)), expand(sigma))
    return add(mul(normed, expand(style_sigma)), expand(style_mu))


# ------------------------------------------------------------------ losses

def softmax_cross_entropy(logits, target, ignore_index=IGNORE_INDEX):
    """Mean over non-ignored pixels of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    _check_4d(logits, "softmax_cross_entropy")
    target = np.asarray(target)
    b, c, h, w = logits.shape
    if target.shape != (b, h, w):
        raise InvalidShapeError(f"target shape {target.shape} != {(b, h, w)}")
    valid = np.ones(target.shape, bool) if ignore_index is None else target != ignore_index
    if ((target[valid] < 0) | (target[valid] >= c)).any():
        raise InvalidLabelError(f"labels must lie in [0, {c}) or equal {ignore_index}")
    n = int(valid.sum())
    tgt = np.where(valid, target, 0).astype(np.int64)
    logp = log_softmax_channels(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, tgt[:, None], 1.0, axis=1)
    onehot *= valid[:, None]
    return scale(sum(mul(logp, onehot)), -1.0 / max(n, 1))


def soft_cross_entropy(logits, soft_target):
    """Mean over pixels of -sum_c y_c log softmax(logits)_c; ``soft_target`` is constant."""
    logits = as_tensor(logits)
    _check_4d(logits, "soft_cross_entropy")
    y = np.asarray(soft_target, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise InvalidShapeError(f"soft target {y.shape} != logits {logits.shape}")
    b, _, h, w = logits.shape
    return scale(sum(mul(log_softmax_channels(logits), y)), -1.0 / (b * h * w))
