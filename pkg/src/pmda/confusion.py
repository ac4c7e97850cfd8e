"""Fine-grained adversarial domain confusion for one sub-domain model.

The discriminator sees the SegNet's deepest feature map and predicts, per
pixel, a 2|C| vector: the first |C| entries mean "source, class c", the last
|C| mean "target, class c". Targets are the segmenter's own truncated soft
predictions placed in the half of the true domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data.dataset import require_nonempty, stack_images, stack_labels
from .errors import InvalidShapeError
from .networks import PAdaIN
from .seg_train import SegModel, class_scores
from .tensor import SGD, Tensor, no_grad

log = logging.getLogger(__name__)

SOFT_CAP = 0.9
DEFAULT_LAMBDA_ADV = 0.01


def make_soft_labels(logits):
    """Per-pixel softmax over the class axis, each entry capped at 0.9 (no renormalisation)."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.minimum(class_scores(logits.astype(np.float64), "prob"), SOFT_CAP).astype(np.float32)


def _check_pair(out, soft, what):
    if out.ndim != 4 or soft.ndim != 4 or out.shape[0] != soft.shape[0] or out.shape[2:] != soft.shape[2:] \
            or out.shape[1] != 2 * soft.shape[1]:
        raise InvalidShapeError(f"{what}: discriminator output {out.shape} does not pair with soft labels {soft.shape}")


def domain_targets(soft, domain):
    """Place soft labels in the source (domain 0) or target (domain 1) half of a 2|C| vector."""
    soft = np.asarray(soft, dtype=np.float32)
    zeros = np.zeros_like(soft)
    halves = (soft, zeros) if domain == 0 else (zeros, soft)
    return np.concatenate(halves, axis=1)


def loss_D(disc_out_src, disc_out_tgt, soft_src, soft_tgt):
    """Soft cross-entropy of the discriminator over every pixel of both batches."""
    soft_src, soft_tgt = np.asarray(soft_src), np.asarray(soft_tgt)
    _check_pair(disc_out_src, soft_src, "loss_D source")
    _check_pair(disc_out_tgt, soft_tgt, "loss_D target")
    if disc_out_src.shape[1:] != disc_out_tgt.shape[1:]:
        raise InvalidShapeError(f"loss_D: {disc_out_src.shape} vs {disc_out_tgt.shape}")
    logits = F.concat([disc_out_src, disc_out_tgt])
    target = np.concatenate([domain_targets(soft_src, 0), domain_targets(soft_tgt, 1)])
    return F.soft_cross_entropy(logits, target)


def loss_adv(disc_out_tgt, soft_tgt):
    """Target pixels scored against source-side targets: low when the discriminator is fooled."""
    soft_tgt = np.asarray(soft_tgt)
    _check_pair(disc_out_tgt, soft_tgt, "loss_adv")
    return F.soft_cross_entropy(disc_out_tgt, domain_targets(soft_tgt, 0))


def domain_accuracy(disc_out_src, disc_out_tgt):
    """Share of pixels whose summed source/target mass points at the true domain."""
    accs = []
    for out, domain in ((disc_out_src, 0), (disc_out_tgt, 1)):
        p = class_scores(np.asarray(out, dtype=np.float64), "prob")
        c = p.shape[1] // 2
        says_target = p[:, c:].sum(axis=1) > 0.5
        accs.append((says_target == bool(domain)).mean())
    return float(np.mean(accs))


@dataclass
class ConfusionTrace:
    seg_loss: list = field(default_factory=list)      # supervised CE on source
    adv_loss: list = field(default_factory=list)
    disc_loss: list = field(default_factory=list)
    disc_acc: list = field(default_factory=list)      # (step, held-out accuracy)

    def to_dict(self):
        return {"seg_loss": self.seg_loss, "adv_loss": self.adv_loss, "disc_loss": self.disc_loss,
                "disc_acc": [list(a) for a in self.disc_acc]}


def heldout_accuracy(net, disc, src_images, tgt_images):
    with no_grad():
        out_s = net.forward(Tensor(src_images))
        out_t = net.forward(Tensor(tgt_images))
        size = src_images.shape[2:]
        return domain_accuracy(disc(out_s.features, size).data, disc(out_t.features, size).data)


def confuse(model, source_set, target_set, disc, steps, lrs=(0.01, 0.01), padain_p=0.01, seed=0,
            lambda_adv=DEFAULT_LAMBDA_ADV, batch=4, momentum=0.9, heldout=None, eval_every=10):
    """Alternate discriminator and segmenter updates.

    Returns (refined SegModel, ConfusionTrace, trained discriminator).

    Each step draws ``batch`` labelled source and ``batch`` unlabelled target
    images and runs them through the SegNet as one [source; target] batch, so
    pAdaIN hooks move target statistics onto the source half. Then
    (i) the discriminator takes a step on loss_D over detached features, and
    (ii) the SegNet takes a step on source cross-entropy + lambda_adv * loss_adv.
    ``heldout`` is an optional (source images, target images) pair of arrays
    on which discriminator domain accuracy is logged every ``eval_every`` steps.
    Neither input network is modified.
    """
    source_set = require_nonempty(source_set, "source set")
    target_set = require_nonempty(target_set, "target set")
    net = model.net.copy()
    disc = disc.copy()
    seg_lr, disc_lr = lrs
    # the source stream uses the same generator layout as supervised training
    rng = np.random.default_rng(seed)
    tgt_rng = np.random.default_rng([seed, 2])
    policy = PAdaIN(padain_p, np.random.default_rng([seed, 1])) if padain_p > 0 else None
    seg_opt = SGD(net.parameters(), lr=seg_lr, momentum=momentum)
    disc_opt = SGD(disc.parameters(), lr=disc_lr, momentum=momentum)
    trace = ConfusionTrace()
    for step in range(steps):
        si = rng.integers(0, len(source_set), batch)
        ti = tgt_rng.integers(0, len(target_set), batch)
        images = np.concatenate([stack_images(source_set, si), stack_images(target_set, ti)])
        out = net.forward(Tensor(images), policy)
        size = images.shape[2:]
        soft = make_soft_labels(out.logits)
        soft_s, soft_t = soft[:batch], soft[batch:]

        # (i) discriminator on detached features
        d_out = disc(out.features.detach(), size)
        ld = loss_D(F.batch_slice(d_out, 0, batch), F.batch_slice(d_out, batch, 2 * batch), soft_s, soft_t)
        ld.backward()
        disc_opt.step()

        # (ii) segmenter: supervised source loss plus confusion of the updated discriminator
        seg_loss = F.softmax_cross_entropy(F.batch_slice(out.logits, 0, batch), stack_labels(source_set, si))
        total = seg_loss
        if lambda_adv:
            la = loss_adv(disc(F.batch_slice(out.features, batch, 2 * batch), size), soft_t)
            total = F.add(seg_loss, F.scale(la, lambda_adv))
            trace.adv_loss.append(la.item())
        else:
            trace.adv_loss.append(0.0)
        total.backward()
        seg_opt.step()
        disc_opt.zero_grad()  # the adversarial pass leaves gradients on the discriminator
        trace.seg_loss.append(seg_loss.item())
        trace.disc_loss.append(ld.item())
        if heldout is not None and (step + 1) % eval_every == 0:
            trace.disc_acc.append((step + 1, heldout_accuracy(net, disc, *heldout)))
        if step % 50 == 0:
            log.debug("confuse step %d: seg %.4f adv %.4f disc %.4f", step, trace.seg_loss[-1],
                      trace.adv_loss[-1], trace.disc_loss[-1])
    meta = dict(model.training_meta)
    meta["confusion"] = {"steps": steps, "lrs": list(lrs), "padain_p": padain_p, "seed": seed,
                         "lambda_adv": lambda_adv, "batch": batch}
    return SegModel(net, model.domain_id, meta), trace, disc
