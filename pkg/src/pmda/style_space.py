"""Gram-matrix style descriptors, cosine-kernel KPCA and k-NN domain weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDescriptorError, InvalidKError, InvalidShapeError
from .networks import TAP_NAMES
from .tensor import Tensor, no_grad

EIG_RELATIVE_FLOOR = 1e-10


def gram(feature):
    """G = F F^T / (C H W) for the C x HW unfolding of a 1 x C x H x W map."""
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4 or f.shape[0] != 1:
        raise InvalidShapeError(f"gram expects a single 1 x C x H x W map, got {f.shape}")
    _, c, h, w = f.shape
    mat = f.reshape(c, h * w).astype(np.float64)
    return mat @ mat.T / (c * h * w)


@dataclass
class StyleDescriptor:
    vector: np.ndarray
    layer_offsets: list  # (start, stop) per tap, in tap order

    def block(self, i):
        start, stop = self.layer_offsets[i]
        c = int(round(np.sqrt(stop - start)))
        return self.vector[start:stop].reshape(c, c)


def describe(encoder, image):
    """Concatenated flattened Gram matrices of taps L1..L5 for one image."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    with no_grad():
        feats = encoder.encode(Tensor(image))
    parts, offsets, pos = [], [], 0
    for name in TAP_NAMES:
        g = gram(feats[name]).ravel()
        parts.append(g)
        offsets.append((pos, pos + g.size))
        pos += g.size
    return StyleDescriptor(np.concatenate(parts), offsets)


def _unit_rows(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        bad = int(np.flatnonzero(norms == 0)[0])
        raise InvalidDescriptorError(f"descriptor row {bad} has zero norm; cosine kernel undefined")
    return x / norms[:, None]


@dataclass
class StyleSpace:
    """A fitted cosine-kernel KPCA model with domain-tagged training embeddings."""

    train_unit: np.ndarray        # n x D, L2-normalised training descriptors
    domains: np.ndarray           # n ints
    n_domains: int
    kernel_col_mean: np.ndarray   # n, column means of the uncentred kernel
    kernel_mean: float            # grand mean of the uncentred kernel
    eigenvalues: np.ndarray       # all retained-rank eigenvalues, descending
    coefficients: np.ndarray      # n x d, eigenvectors scaled by 1/sqrt(eigenvalue)
    train_embedding: np.ndarray   # n x d
    explained_variance_ratio: float

    @property
    def d(self):
        return self.coefficients.shape[1]

    @property
    def n_train(self):
        return self.train_unit.shape[0]


def fit_kpca(descriptors, domains, d_max=32, variance_target=0.99, n_domains=None):
    """Fit centred KPCA with k(x, y) = <x, y> / (|x| |y|).

    The embedding dimension is the smallest m whose leading eigenvalues explain
    ``variance_target`` of the total, capped at ``d_max``.
    """
    x = _unit_rows(descriptors)
    n = x.shape[0]
    if n < 2:
        raise InvalidShapeError("KPCA needs at least two descriptors")
    domains = np.asarray(domains, dtype=np.int64)
    if domains.shape != (n,):
        raise InvalidShapeError(f"{n} descriptors but {domains.shape} domain ids")
    if n_domains is None:
        n_domains = int(domains.max()) + 1
    if domains.min() < 0 or domains.max() >= n_domains:
        raise ValueError(f"domain ids must lie in [0, {n_domains})")
    fit = kpca_from_kernel(x @ x.T, d_max, variance_target)
    return StyleSpace(
        train_unit=x,
        domains=domains,
        n_domains=int(n_domains),
        **fit,
    )


def kpca_from_kernel(k, d_max, variance_target):
    """Centre a precomputed kernel matrix and extract the leading components."""
    col_mean = k.mean(axis=0)
    grand = float(k.mean())
    kc = k - col_mean[None, :] - col_mean[:, None] + grand
    kc = (kc + kc.T) / 2
    vals, vecs = np.linalg.eigh(kc)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    vals = np.where(vals < EIG_RELATIVE_FLOOR * max(vals[0], 0.0), 0.0, vals)
    total = vals.sum()
    rank = int((vals > 0).sum())
    if total <= 0 or rank == 0:
        raise InvalidDescriptorError("all descriptors coincide in feature space; nothing to embed")
    cum = np.cumsum(vals) / total
    m = int(np.searchsorted(cum, variance_target - 1e-12) + 1)
    d = max(1, min(d_max, m, rank))
    coeff = vecs[:, :d] / np.sqrt(vals[:d])[None, :]
    return dict(
        kernel_col_mean=col_mean,
        kernel_mean=grand,
        eigenvalues=vals[:rank],
        coefficients=coeff,
        train_embedding=kc @ coeff,
        explained_variance_ratio=float(min(cum[d - 1], 1.0)),
    )


def centered_kernel(space, descriptors):
    """Centred kernel rows between new descriptors and the training set."""
    q = _unit_rows(descriptors)
    kx = q @ space.train_unit.T
    return kx - kx.mean(axis=1, keepdims=True) - space.kernel_col_mean[None, :] + space.kernel_mean


def embed(space, descriptor):
    """Out-of-sample projection; accepts one descriptor or a stack of them."""
    vec = descriptor.vector if isinstance(descriptor, StyleDescriptor) else np.asarray(descriptor)
    single = vec.ndim == 1
    out = centered_kernel(space, vec) @ space.coefficients
    return out[0] if single else out


def neighbours(space, query_embedding, k):
    if not 1 <= k <= space.n_train:
        raise InvalidKError(f"k={k} outside [1, {space.n_train}]")
    q = np.asarray(query_embedding, dtype=np.float64)
    dist = np.sqrt(((space.train_embedding - q[None, :]) ** 2).sum(axis=1))
    # stable sort: equal distances keep ascending row order
    return np.argsort(dist, kind="stable")[:k]


def knn_weights(space, query_embedding, k):
    """Fraction of each domain among the k nearest training embeddings."""
    idx = neighbours(space, query_embedding, k)
    counts = np.bincount(space.domains[idx], minlength=space.n_domains)
    return counts / k
