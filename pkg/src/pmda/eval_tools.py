"""Segmentation metrics and segment extraction for comparative collections."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .errors import InvalidShapeError, UndefinedMetricError
from .functional import IGNORE_INDEX

PATCH_FILL = 0.5
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def confusion_matrix(preds, gts, n_classes, ignore_index=IGNORE_INDEX):
    """Rows are ground truth, columns prediction; ignore pixels are skipped."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise InvalidShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
        keep = g != ignore_index
        gv, pv = g[keep].astype(np.int64), p[keep].astype(np.int64)
        if gv.size and (gv.max() >= n_classes or pv.max() >= n_classes or min(gv.min(), pv.min()) < 0):
            raise InvalidShapeError(f"class id outside [0, {n_classes})")
        cm += np.bincount(gv * n_classes + pv, minlength=n_classes ** 2).reshape(n_classes, n_classes)
    return cm


@dataclass
class IoUResult:
    per_class: list  # Fraction per class, None where the class never occurs
    mean: Fraction
    confusion: np.ndarray

    @property
    def per_class_float(self):
        return [float("nan") if v is None else float(v) for v in self.per_class]

    @property
    def mean_float(self):
        return float(self.mean)


def iou_from_confusion(cm):
    if cm.sum() == 0:
        raise UndefinedMetricError("no evaluated pixels (everything ignored)")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    per_class = []
    for c in range(cm.shape[0]):
        denom = int(tp[c] + fp[c] + fn[c])
        per_class.append(None if denom == 0 else Fraction(int(tp[c]), denom))
    present = [v for v in per_class if v is not None]
    return IoUResult(per_class, sum(present, Fraction(0)) / len(present), cm)


def miou(preds, gts, n_classes=None, ignore_index=IGNORE_INDEX):
    """Per-class IoU and their mean over classes present in gt or prediction.

    Values are exact fractions; classes absent from both sides over the whole
    set are reported as ``None`` and left out of the mean.
    """
    preds = [np.asarray(p) for p in preds]
    gts = [np.asarray(g) for g in gts]
    if len(preds) != len(gts):
        raise InvalidShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if n_classes is None:
        seen = [int(p.max()) for p in preds if p.size]
        seen += [int(g[g != ignore_index].max()) for g in gts if (g != ignore_index).any()]
        n_classes = max(seen, default=0) + 1
    return iou_from_confusion(confusion_matrix(preds, gts, n_classes, ignore_index))


@dataclass
class Segment:
    class_id: int
    mask: np.ndarray          # bool, full label-map size
    bbox: tuple               # (top, left, bottom, right), bottom/right exclusive
    image_id: object = None

    @property
    def area(self):
        return int(self.mask.sum())


def connected_components(labels, class_id, image_id=None):
    """Maximal 4-connected regions of ``class_id``, ordered by first pixel in raster order."""
    labels = np.asarray(labels)
    comp, n = ndimage.label(labels == class_id, structure=_FOUR_CONNECTED)
    segments = []
    # ndimage numbers components in raster order of their first pixel
    for idx, sl in enumerate(ndimage.find_objects(comp), start=1):
        mask = comp == idx
        bbox = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        segments.append(Segment(int(class_id), mask, bbox, image_id))
    return segments


@dataclass
class Patch:
    image_id: object
    bbox: tuple
    pixels: np.ndarray        # C x h x w crop, outside-mask pixels set to the fill value


def extract_collection(items, class_id, min_area=1, fill=PATCH_FILL):
    """Cut every segment of ``class_id`` (area >= min_area) out of its image.

    ``items`` yields (image_id, image C x H x W, label map H x W).
    """
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    patches = []
    for image_id, image, labels in items:
        image = np.asarray(image)
        for seg in connected_components(labels, class_id, image_id):
            if seg.area < min_area:
                continue
            t, l, b, r = seg.bbox
            crop = image[:, t:b, l:r].copy()
            crop[:, ~seg.mask[t:b, l:r]] = fill
            patches.append(Patch(image_id, seg.bbox, crop))
    return patches


def format_table(rows, class_names):
    """Plain-text mIoU table; ``rows`` maps a label to an IoUResult."""
    head = f"{'model':<24}" + "".join(f"{n[:9]:>10}" for n in class_names) + f"{'mIoU':>10}"
    lines = [head, "-" * len(head)]
    for label, res in rows.items():
        cells = "".join(f"{'-':>10}" if v is None else f"{float(v):>10.4f}" for v in res.per_class)
        lines.append(f"{label:<24}{cells}{res.mean_float:>10.4f}")
    return "\n".join(lines)
