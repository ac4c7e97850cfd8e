"""AdaIN style transfer: decoder training, stylisation, pseudo-painting sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .data.dataset import Sample, require_nonempty, stack_images
from .errors import InvalidShapeError
from .networks import BOTTLENECK, TAP_NAMES, StyleDecoder, StyleEncoder
from .tensor import SGD, Adam, Tensor, no_grad

log = logging.getLogger(__name__)

STYLE_TAPS = TAP_NAMES[:4]
DEFAULT_LAMBDA = 10.0


@dataclass
class StyleTransferModel:
    encoder: StyleEncoder
    decoder: StyleDecoder
    lambda_style: float = DEFAULT_LAMBDA

    def __post_init__(self):
        self.encoder.set_trainable(False)

    @classmethod
    def create(cls, seed, widths=None, lambda_style=DEFAULT_LAMBDA, encoder=None):
        rng = np.random.default_rng(seed)
        enc_seed, dec_seed = (int(s) for s in rng.integers(0, 2 ** 31, 2))
        kw = {} if widths is None else {"widths": widths}
        encoder = encoder or StyleEncoder.create(enc_seed, **kw)
        return cls(encoder, StyleDecoder.create(dec_seed, widths=encoder.widths), lambda_style)


@dataclass
class StylizationRequest:
    content: np.ndarray
    style: np.ndarray
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


def _batch(x):
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    return Tensor(x[None] if x.ndim == 3 else x)


def st_losses(model, content, style):
    """(total, content, style) losses, each averaged over the batch.

    content: ||f(g(t)) - t||_2 at the bottleneck, with t the AdaIN output.
    style: sum over taps L1..L4 of ||mu diff||_2 + ||sigma diff||_2.
    """
    content, style = _batch(content), _batch(style)
    if content.shape != style.shape:
        raise InvalidShapeError(f"content {content.shape} and style {style.shape} differ")
    enc, dec = model.encoder, model.decoder
    with no_grad():
        fc = enc.encode(content, upto=BOTTLENECK)[BOTTLENECK]
        fs = enc.encode(style, upto=BOTTLENECK)
        style_stats = {name: F.channel_stats(fs[name]) for name in STYLE_TAPS}
        t = F.adain(fc, *style_stats[BOTTLENECK])
    out = dec.decode(t)
    fg = enc.encode(out, upto=BOTTLENECK)
    b = content.shape[0]
    loss_c = F.scale(_per_sample_norms(F.sub(fg[BOTTLENECK], t), b), 1.0 / b)
    terms = []
    for name in STYLE_TAPS:
        mu_g, sig_g = F.channel_stats(fg[name])
        mu_s, sig_s = style_stats[name]
        terms.append(_per_sample_norms(F.sub(mu_g, mu_s), b))
        terms.append(_per_sample_norms(F.sub(sig_g, sig_s), b))
    loss_s = terms[0]
    for term in terms[1:]:
        loss_s = F.add(loss_s, term)
    loss_s = F.scale(loss_s, 1.0 / b)
    total = F.add(loss_c, F.scale(loss_s, model.lambda_style))
    return total, loss_c, loss_s


def _per_sample_norms(diff, b):
    """Sum over the batch of each sample's Euclidean norm."""
    total = F.l2norm(F.batch_slice(diff, 0, 1))
    for i in range(1, b):
        total = F.add(total, F.l2norm(F.batch_slice(diff, i, i + 1)))
    return total


def _optimizer(kind, params, lr, momentum):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {kind!r}")


def pretrain_autoencoder(model, images, steps, lr=2e-3, seed=0, batch=8):
    """Fit encoder (to L4) and decoder as a plain autoencoder on ``images``.

    A random conv stack has no useful feature statistics, so the toy encoder
    is given a reconstruction objective before it is frozen. Returns the
    per-step MSE trace; the encoder ends frozen again.
    """
    images = require_nonempty(images, "autoencoder set")
    rng = np.random.default_rng(seed)
    model.encoder.set_trainable(True)
    opt = Adam(model.encoder.parameters() + model.decoder.parameters(), lr=lr)
    trace = []
    try:
        for step in range(steps):
            x = Tensor(stack_images(images, rng.integers(0, len(images), batch)))
            out = model.decoder.decode(model.encoder.encode(x, upto=BOTTLENECK)[BOTTLENECK])
            loss = F.mean(F.square(F.sub(out, x)))
            loss.backward()
            opt.step()
            trace.append(loss.item())
            if step % 100 == 0:
                log.debug("ae step %d: mse %.5f", step, trace[-1])
    finally:
        model.encoder.set_trainable(False)
    return trace


def train_style_transfer(model, content_set, style_set, steps, lr=1e-3, seed=0, batch=4,
                         optimizer="adam", momentum=0.9, clip=None):
    """Train the decoder over uniformly drawn content/style pairs.

    ``optimizer`` is "adam" (default) or "sgd" (momentum SGD).
    Returns the loss trace: one (total, content, style) triple per step.
    """
    content_set = require_nonempty(content_set, "content set")
    style_set = require_nonempty(style_set, "style set")
    rng = np.random.default_rng(seed)
    opt = _optimizer(optimizer, model.decoder.parameters(), lr, momentum)
    trace = []
    for step in range(steps):
        ci = rng.integers(0, len(content_set), batch)
        si = rng.integers(0, len(style_set), batch)
        total, lc, ls = st_losses(model, stack_images(content_set, ci), stack_images(style_set, si))
        total.backward()
        if clip is not None:
            _clip_grads(opt.params, clip)
        opt.step()
        trace.append((total.item(), lc.item(), ls.item()))
        if step % 100 == 0:
            log.debug("style step %d: total %.4f content %.4f style %.4f", step, *trace[-1])
    return trace


def _clip_grads(params, max_norm):
    norm = np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.float32(max_norm / norm)


def stylize(model, req):
    """g(alpha * AdaIN(f(c), f(s)) + (1 - alpha) * f(c)), clamped to [0, 1]."""
    single = np.asarray(req.content).ndim == 3
    content, style = _batch(req.content), _batch(req.style)
    with no_grad():
        fc = model.encoder.encode(content, upto=BOTTLENECK)[BOTTLENECK]
        fs = model.encoder.encode(style, upto=BOTTLENECK)[BOTTLENECK]
        t = F.adain(fc, *F.channel_stats(fs))
        mixed = F.add(F.scale(t, req.alpha), F.scale(fc, 1.0 - req.alpha))
        out = np.clip(model.decoder.decode(mixed).data, 0.0, 1.0)
    return out[0] if single else out


def make_pseudo_dataset(model, source, styles, alpha=0.5, seed=0):
    """Stylise each source image with one uniformly drawn style image.

    Labels are carried over untouched. Returns (samples, style indices).
    """
    require_nonempty(styles, "style set")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(styles), len(source))
    out = []
    for s, k in zip(source, picks):
        style_img = styles[k].image if isinstance(styles[k], Sample) else styles[k]
        img = stylize(model, StylizationRequest(s.image, style_img, alpha))
        out.append(Sample(img.astype(np.float32), s.labels, s.name))
    return out, [int(k) for k in picks]
