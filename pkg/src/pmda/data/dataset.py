"""In-memory labelled image sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidDatasetError


@dataclass
class Sample:
    image: np.ndarray            # 3 x H x W float32 in [0, 1]
    labels: np.ndarray = None    # H x W uint8, 255 = ignore; None when unlabelled
    name: str = ""


def require_nonempty(samples, what):
    if not samples:
        raise InvalidDatasetError(f"{what} is empty")
    return samples


def stack_images(samples, idx=None):
    chosen = samples if idx is None else [samples[i] for i in idx]
    return np.stack([s.image for s in chosen]).astype(np.float32)


def stack_labels(samples, idx=None):
    chosen = samples if idx is None else [samples[i] for i in idx]
    return np.stack([s.labels for s in chosen]).astype(np.int64)
