"""Multi-domain inference: style-space k-NN weights over per-domain models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShapeError
from .seg_train import argmax_labels, class_scores
from .style_space import describe, embed, knn_weights

FUSE_MODES = ("prob", "logit")


def fuse(logit_maps, w, mode="prob"):
    """argmax_c sum_i w_i * s_i(c), s_i the softmax (or raw logits) of model i.

    Weighted terms are sorted along the model axis before summation, so the
    result does not depend on model order, and a one-hot weight reproduces
    that model's scores bit for bit. Ties go to the lowest class index.
    """
    maps = [np.asarray(m) for m in logit_maps]
    w = np.asarray(w, dtype=np.float64)
    if not maps:
        raise InvalidShapeError("no logit maps to fuse")
    if w.shape != (len(maps),):
        raise InvalidShapeError(f"{len(maps)} models but weight vector of shape {w.shape}")
    if any(m.shape != maps[0].shape for m in maps) or maps[0].ndim < 3:
        raise InvalidShapeError(f"logit maps differ in shape: {[m.shape for m in maps]}")
    if mode not in FUSE_MODES:
        raise ValueError(f"unknown fuse mode {mode!r}")
    terms = np.stack([wi * class_scores(m, mode).astype(np.float64) for wi, m in zip(w, maps)])
    combined = np.sort(terms, axis=0).sum(axis=0)
    return argmax_labels(combined)


@dataclass(frozen=True)
class Ensemble:
    models: list          # one SegModel per sub-domain, in domain-id order
    space: object         # fitted StyleSpace
    encoder: object       # StyleEncoder used for the descriptors
    k: int = 5
    mode: str = "prob"

    def __post_init__(self):
        if len(self.models) != self.space.n_domains:
            raise InvalidShapeError(f"{len(self.models)} models for {self.space.n_domains} style domains")
        counts = {m.class_count for m in self.models}
        if len(counts) != 1:
            raise InvalidShapeError(f"models disagree on class count: {sorted(counts)}")


def domain_weights(ens, image):
    return knn_weights(ens.space, embed(ens.space, describe(ens.encoder, image)), ens.k)


def infer(ens, image):
    """(fused label map, domain weight vector) for one 3 x H x W image."""
    w = domain_weights(ens, image)
    logits = [m.logits(image) for m in ens.models]
    return fuse(logits, w, ens.mode), w
