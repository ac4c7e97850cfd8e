"""Supervised training of one segmentation net and single-model prediction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data.dataset import require_nonempty, stack_images, stack_labels
from .errors import InvalidBatchError
from .networks import PAdaIN, SegNet
from .tensor import SGD, Tensor, no_grad

log = logging.getLogger(__name__)

DEFAULT_PADAIN_P = 0.01


@dataclass
class SegModel:
    net: SegNet
    domain_id: int = -1           # -1 for a model not tied to a sub-domain
    training_meta: dict = field(default_factory=dict)

    @property
    def class_count(self):
        return self.net.n_classes

    def logits(self, images, batch=16):
        """Forward without recording a graph; images are N x 3 x H x W or 3 x H x W."""
        images = np.asarray(images, dtype=np.float32)
        single = images.ndim == 3
        if single:
            images = images[None]
        outs = []
        with no_grad():
            for i in range(0, len(images), batch):
                outs.append(self.net(Tensor(images[i:i + batch])).data)
        out = np.concatenate(outs)
        return out[0] if single else out


def class_scores(logits, mode="prob"):
    """Per-pixel scores over axis -3: softmax probabilities or raw logits."""
    logits = np.asarray(logits)
    if mode == "logit":
        return logits
    if mode != "prob":
        raise ValueError(f"unknown score mode {mode!r}")
    z = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def argmax_labels(scores):
    """Argmax over the class axis; np.argmax already returns the lowest index on ties."""
    return np.argmax(scores, axis=-3).astype(np.uint8)


def predict(model, image, mode="prob"):
    """Label map(s) from a single model; the score used is the same one fusion uses."""
    return argmax_labels(class_scores(model.logits(image), mode))


def train_supervised(net, dataset, steps, lr=0.05, batch=4, padain_p=0.0, seed=0, momentum=0.9,
                     domain_id=-1):
    """Momentum SGD on pixel-wise cross-entropy.

    With ``padain_p`` > 0 each hook point swaps statistics from the second half
    of the batch onto the first half with that probability.
    Returns (SegModel, per-step loss trace).
    """
    dataset = require_nonempty(dataset, "training set")
    if padain_p > 0 and batch % 2:
        raise InvalidBatchError(f"pAdaIN needs an even batch, got {batch}")
    rng = np.random.default_rng(seed)
    padain_rng = np.random.default_rng([seed, 1])
    policy = PAdaIN(padain_p, padain_rng) if padain_p > 0 else None
    opt = SGD(net.parameters(), lr=lr, momentum=momentum)
    trace = []
    for step in range(steps):
        idx = rng.integers(0, len(dataset), batch)
        logits = net(Tensor(stack_images(dataset, idx)), policy)
        loss = F.softmax_cross_entropy(logits, stack_labels(dataset, idx))
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if step % 100 == 0:
            log.debug("seg step %d: loss %.4f", step, trace[-1])
    meta = {"steps": steps, "lr": lr, "batch": batch, "padain_p": padain_p, "seed": seed}
    return SegModel(net, domain_id, meta), trace


def pixel_accuracy(model, dataset):
    preds = predict(model, stack_images(dataset))
    gts = stack_labels(dataset)
    keep = gts != F.IGNORE_INDEX
    return float((preds[keep] == gts[keep]).mean())
