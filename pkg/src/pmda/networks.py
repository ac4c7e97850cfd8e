"""Toy-scale networks: style encoder/decoder, segmentation net, discriminator.

Parameters live in plain ``dict[str, Tensor]`` objects so they map one-to-one
onto weights-file entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import InvalidBatchError, InvalidShapeError
from .tensor import Tensor

ENCODER_WIDTHS = (8, 16, 32, 64, 64)
TAP_NAMES = ("L1", "L2", "L3", "L4", "L5")
BOTTLENECK = "L4"


def he_uniform(rng, shape):
    """Uniform(-b, b) with b = sqrt(6 / fan_in), i.e. std sqrt(2 / fan_in)."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(layout, seed):
    """Build a parameter dict from ``{name: shape}``; biases (1-D) start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in layout.items():
        data = np.zeros(shape, np.float32) if len(shape) == 1 else he_uniform(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _conv(params, name, x, pad=None):
    k = params[name + ".w"]
    p = k.shape[2] // 2 if pad is None else pad
    return F.conv2d(x, k, params[name + ".b"], stride=1, pad=p)


def _conv_layout(name, cin, cout, k):
    return {name + ".w": (cout, cin, k, k), name + ".b": (cout,)}


class Network:
    """Common parameter plumbing."""

    kind = "network"

    def __init__(self, params, config):
        self.params = params
        self.config = config

    def parameters(self):
        return list(self.params.values())

    def set_trainable(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def copy(self):
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return type(self)(params, dict(self.config))


class StyleEncoder(Network):
    """Five conv+relu stages with 2x2 max pooling between them.

    ``encode`` returns the post-relu activation of every stage under the names
    L1..L5; spatial size halves from one tap to the next.
    """

    kind = "style_encoder"

    @classmethod
    def create(cls, seed, widths=ENCODER_WIDTHS):
        widths = tuple(int(w) for w in widths)
        if len(widths) != 5:
            raise ValueError("the style encoder has exactly five taps")
        layout = {}
        cin = 3
        for i, w in enumerate(widths):
            layout.update(_conv_layout(f"enc{i + 1}", cin, w, 3))
            cin = w
        return cls(init_params(layout, seed), {"widths": list(widths)})

    @property
    def widths(self):
        return tuple(self.config["widths"])

    def encode(self, image, upto=None):
        if image.ndim != 4 or image.shape[1] != 3:
            raise InvalidShapeError(f"encoder expects B x 3 x H x W, got {image.shape}")
        if min(image.shape[2:]) < 16:
            raise InvalidShapeError(f"image {image.shape[2:]} too small for five taps (need >= 16)")
        feats = {}
        x = image
        for i, name in enumerate(TAP_NAMES):
            if i:
                x = F.maxpool2x2(x)
            x = F.relu(_conv(self.params, f"enc{i + 1}", x))
            feats[name] = x
            if name == upto:
                break
        return feats


class StyleDecoder(Network):
    """Inverts the encoder from the L4 tap: conv+relu, upsample, ..., final conv to RGB."""

    kind = "style_decoder"

    @classmethod
    def create(cls, seed, widths=ENCODER_WIDTHS):
        widths = tuple(int(w) for w in widths)
        chans = [widths[3], widths[2], widths[1], widths[0]]
        layout = {}
        for i in range(3):
            layout.update(_conv_layout(f"dec{i + 1}", chans[i], chans[i + 1], 3))
        layout.update(_conv_layout("dec_out", chans[3], 3, 3))
        return cls(init_params(layout, seed), {"widths": list(widths)})

    def decode(self, features):
        x = features
        for i in range(3):
            x = F.upsample_nearest2x(F.relu(_conv(self.params, f"dec{i + 1}", x)))
        return _conv(self.params, "dec_out", x)


class PAdaIN:
    """Random statistic swapping at SegNet hook points.

    With probability ``p`` per hook, the first half of the batch takes the
    channel statistics of the second half (``partner="half"``), or of itself
    (``partner="self"``, a no-op up to eps, useful as a control). The second
    half is left untouched, so in the confusion stage a [source; target] batch
    transfers target statistics onto the source images.
    """

    def __init__(self, p, rng, partner="half", eps=F.DEFAULT_EPS):
        if partner not in ("half", "self"):
            raise ValueError(f"unknown partner mode {partner!r}")
        self.p = float(p)
        self.rng = rng
        self.partner = partner
        self.eps = eps
        self.fired = []

    def check_batch(self, batch):
        if self.partner == "half" and batch % 2:
            raise InvalidBatchError(f"pAdaIN pairs batch halves; got odd batch {batch}")

    def __call__(self, x, layer):
        if self.p <= 0 or self.rng.random() >= self.p:
            return x
        self.fired.append(layer)
        if self.partner == "self":
            mu, sigma = F.channel_stats(x, self.eps)
            return F.adain(x, mu, sigma, self.eps)
        half = x.shape[0] // 2
        content = F.batch_slice(x, 0, half)
        style = F.batch_slice(x, half, x.shape[0])
        mu, sigma = F.channel_stats(style, self.eps)
        return F.concat([F.adain(content, mu, sigma, self.eps), style])


@dataclass
class SegOutput:
    logits: Tensor
    features: Tensor
    hooked: list = field(default_factory=list)


class SegNet(Network):
    """Conv stages with pooling, a 1x1 classifier on the deepest stage
    upsampled to input size, plus a 1x1 skip classifier on the first stage."""

    kind = "segnet"

    @classmethod
    def create(cls, seed, n_classes, widths=(16, 32, 32)):
        widths = [int(w) for w in widths]
        layout = {}
        cin = 3
        for i, w in enumerate(widths):
            layout.update(_conv_layout(f"seg{i + 1}", cin, w, 3))
            cin = w
        layout.update(_conv_layout("head", widths[-1], n_classes, 1))
        layout.update(_conv_layout("skip", widths[0], n_classes, 1))
        return cls(init_params(layout, seed), {"widths": widths, "n_classes": int(n_classes)})

    @property
    def n_classes(self):
        return self.config["n_classes"]

    @property
    def feature_channels(self):
        return self.config["widths"][-1]

    def forward(self, image, padain=None):
        if image.ndim != 4 or image.shape[1] != 3:
            raise InvalidShapeError(f"segnet expects B x 3 x H x W, got {image.shape}")
        n_stages = len(self.config["widths"])
        factor = 2 ** (n_stages - 1)
        h, w = image.shape[2:]
        if h % factor or w % factor:
            raise InvalidShapeError(f"image size {h}x{w} must be divisible by {factor}")
        if padain is not None:
            padain.check_batch(image.shape[0])
        hooked = []
        x = image
        first = None
        for i in range(n_stages):
            if i:
                x = F.maxpool2x2(x)
            x = _conv(self.params, f"seg{i + 1}", x)
            if padain is not None:
                x = padain(x, i)
            hooked.append(x)
            x = F.relu(x)
            if i == 0:
                first = x
        logits = F.add(F.upsample_to(_conv(self.params, "head", x), (h, w)), _conv(self.params, "skip", first))
        return SegOutput(logits, x, hooked)

    def __call__(self, image, padain=None):
        return self.forward(image, padain).logits


def seg_forward(net, image, padain_policy=None):
    """Per-pixel class scores B x |C| x H x W."""
    return net.forward(image, padain_policy).logits


class FineDiscriminator(Network):
    """Maps the SegNet's deepest feature map to 2|C| per-pixel domain x class scores."""

    kind = "discriminator"

    @classmethod
    def create(cls, seed, in_channels, n_classes, width=32):
        layout = {}
        layout.update(_conv_layout("disc1", in_channels, width, 3))
        layout.update(_conv_layout("disc_out", width, 2 * n_classes, 1))
        return cls(init_params(layout, seed),
                   {"in_channels": int(in_channels), "n_classes": int(n_classes), "width": int(width)})

    def __call__(self, features, size):
        x = F.relu(_conv(self.params, "disc1", features))
        return F.upsample_to(_conv(self.params, "disc_out", x), size)


NETWORK_KINDS = {cls.kind: cls for cls in (StyleEncoder, StyleDecoder, SegNet, FineDiscriminator)}
