"""Synthetic multi-style segmentation data.

Base scenes are textured backgrounds with non-overlapping coloured shapes; the
shape type identifies the class. Each sub-domain re-renders its own scenes
through a style function (hue rotation, tint, contrast curve, brush blur,
canvas texture). Label maps are never touched by styling.

All sub-domains share one schedule of (class, size) per scene index, so class
pixel frequencies match across domains.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import Sample

SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring",
          "hbar", "vbar", "ellipse", "frame", "wedge")

# source-domain base colour per object class (index 1..); cycles if more classes
BASE_COLOURS = np.array([
    [0.85, 0.20, 0.15], [0.20, 0.45, 0.85], [0.95, 0.80, 0.15], [0.25, 0.70, 0.30],
    [0.60, 0.25, 0.70], [0.95, 0.55, 0.10], [0.15, 0.70, 0.75], [0.80, 0.35, 0.55],
    [0.45, 0.30, 0.15], [0.55, 0.80, 0.25], [0.30, 0.30, 0.60],
], dtype=np.float32)


@dataclass
class SyntheticStyleConfig:
    """One sub-domain's rendering style."""

    name: str
    hue_deg: float = 0.0          # chroma rotation, [-180, 180]
    texture_amp: float = 0.0      # canvas texture amplitude, [0, 0.5]
    blur_radius: float = 0.0      # brush-stroke blur sigma in pixels, [0, 4]
    contrast_gamma: float = 1.0   # x -> x ** gamma, [0.3, 3]
    tint: tuple = (0.0, 0.0, 0.0)  # additive RGB cast, each in [-0.4, 0.4]
    texture_angle: float = 0.0    # canvas stripe orientation in degrees

    def validate(self):
        checks = [
            (-180 <= self.hue_deg <= 180, "hue_deg"),
            (0 <= self.texture_amp <= 0.5, "texture_amp"),
            (0 <= self.blur_radius <= 4, "blur_radius"),
            (0.3 <= self.contrast_gamma <= 3, "contrast_gamma"),
            (len(self.tint) == 3 and all(-0.4 <= t <= 0.4 for t in self.tint), "tint"),
        ]
        for ok, key in checks:
            if not ok:
                raise ValueError(f"style {self.name!r}: {key} out of range")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "tint" in d:
            d["tint"] = tuple(float(t) for t in d["tint"])
        return cls(**d).validate()

    def to_dict(self):
        d = asdict(self)
        d["tint"] = list(self.tint)
        return d


@dataclass
class SyntheticConfig:
    n_classes: int = 4
    domains: list = field(default_factory=list)
    unseen: SyntheticStyleConfig = None
    objects_per_scene: tuple = (2, 3)
    size_range: tuple = (0.3, 0.45)   # object size as a fraction of the image side

    @classmethod
    def from_dict(cls, d):
        return cls(
            n_classes=int(d.get("n_classes", 4)),
            domains=[SyntheticStyleConfig.from_dict(s) for s in d["domains"]],
            unseen=SyntheticStyleConfig.from_dict(d["unseen"]) if d.get("unseen") else None,
            objects_per_scene=tuple(d.get("objects_per_scene", (2, 3))),
            size_range=tuple(d.get("size_range", (0.3, 0.45))),
        )

    def to_dict(self):
        return {
            "n_classes": self.n_classes,
            "domains": [s.to_dict() for s in self.domains],
            "unseen": self.unseen.to_dict() if self.unseen else None,
            "objects_per_scene": list(self.objects_per_scene),
            "size_range": list(self.size_range),
        }


def default_config():
    return SyntheticConfig(
        n_classes=4,
        domains=[
            SyntheticStyleConfig("ochre", hue_deg=0.0, texture_amp=0.14, blur_radius=0.0,
                                 contrast_gamma=0.7, tint=(0.15, 0.06, -0.12), texture_angle=30.0),
            SyntheticStyleConfig("nocturne", hue_deg=120.0, texture_amp=0.06, blur_radius=1.2,
                                 contrast_gamma=1.6, tint=(-0.12, -0.05, 0.12), texture_angle=-45.0),
        ],
        unseen=SyntheticStyleConfig("pastel", hue_deg=60.0, texture_amp=0.10, blur_radius=0.8,
                                    contrast_gamma=0.9, tint=(0.02, 0.10, 0.02), texture_angle=90.0),
    )


# ------------------------------------------------------------------ shapes

def shape_mask(kind, size, h, w, cy, cx):
    """Boolean mask of a shape of extent ``size`` centred at (cy, cx)."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = (yy - cy) / (size / 2), (xx - cx) / (size / 2)
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= 1
    if kind == "square":
        return (ady <= 0.85) & (adx <= 0.85)
    if kind == "triangle":
        return (dy <= 0.9) & (dy >= -0.9) & (adx <= (dy + 0.9) / 1.8)
    if kind == "diamond":
        return ady + adx <= 1
    if kind == "cross":
        return ((ady <= 0.3) & (adx <= 1)) | ((adx <= 0.3) & (ady <= 1))
    if kind == "ring":
        r = dy ** 2 + dx ** 2
        return (r <= 1) & (r >= 0.3)
    if kind == "hbar":
        return (ady <= 0.35) & (adx <= 1)
    if kind == "vbar":
        return (adx <= 0.35) & (ady <= 1)
    if kind == "ellipse":
        return (dy / 0.55) ** 2 + dx ** 2 <= 1
    if kind == "frame":
        return (np.maximum(ady, adx) <= 0.9) & (np.maximum(ady, adx) >= 0.55)
    if kind == "wedge":
        return (dy ** 2 + dx ** 2 <= 1) & (dy >= 0) & (adx <= dy + 0.2)
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng, h, w):
    """Two-tone smooth backdrop with low-frequency variation."""
    top = rng.uniform(0.45, 0.75, 3)
    bottom = rng.uniform(0.3, 0.6, 3)
    ramp = np.linspace(0, 1, h)[:, None, None]
    img = (1 - ramp) * top + ramp * bottom
    img = np.broadcast_to(img, (h, w, 3)).copy()
    low = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=h / 6)
    low = low / (np.abs(low).max() + 1e-9)
    img += 0.06 * low[..., None]
    return img.transpose(2, 0, 1)


def render_scene(rng, schedule, h, w):
    """Draw a scene for a list of (class, size_px); returns (image, labels)."""
    img = _background(rng, h, w)
    labels = np.zeros((h, w), np.uint8)
    occupied = np.zeros((h, w), bool)
    for cls, size in schedule:
        kind = SHAPES[(cls - 1) % len(SHAPES)]
        half = size // 2 + 1
        for _ in range(200):
            cy = int(rng.integers(half, h - half))
            cx = int(rng.integers(half, w - half))
            mask = shape_mask(kind, size, h, w, cy, cx)
            if not (mask & ndimage.binary_dilation(occupied)).any():
                break
        else:
            continue
        colour = BASE_COLOURS[(cls - 1) % len(BASE_COLOURS)] + rng.uniform(-0.08, 0.08, 3)
        shade = 1 + 0.15 * (np.mgrid[0:h, 0:w][0] - cy) / size
        for c in range(3):
            img[c][mask] = (colour[c] * shade)[mask]
        labels[mask] = cls
        occupied |= mask
    return np.clip(img, 0, 1).astype(np.float32), labels


# ------------------------------------------------------------------ styles

def _hue_rotate(img, deg):
    if not deg:
        return img
    # rotate the chroma plane in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    th = np.deg2rad(deg)
    rot = np.array([[1, 0, 0], [0, np.cos(th), -np.sin(th)], [0, np.sin(th), np.cos(th)]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return np.einsum("ij,jhw->ihw", m, img)


def apply_style(img, style, rng):
    """Render a clean scene in a sub-domain's style."""
    out = _hue_rotate(img.astype(np.float64), style.hue_deg)
    out = out + np.asarray(style.tint)[:, None, None]
    out = np.clip(out, 0, 1) ** style.contrast_gamma
    if style.blur_radius > 0:
        # elongated kernel: brush strokes along the texture direction
        out = np.stack([ndimage.gaussian_filter(ch, sigma=(style.blur_radius, style.blur_radius * 1.8))
                        for ch in out])
    if style.texture_amp > 0:
        h, w = img.shape[1:]
        yy, xx = np.mgrid[0:h, 0:w]
        th = np.deg2rad(style.texture_angle)
        stripes = np.sin(2 * np.pi * (xx * np.cos(th) + yy * np.sin(th)) / 3.0)
        grain = rng.standard_normal((h, w))
        tex = style.texture_amp * (0.6 * stripes + 0.4 * grain)
        out = out + tex[None]
    return np.clip(out, 0, 1).astype(np.float32)


# --------------------------------------------------------------- generator

def _schedule(rng, n_scenes, cfg, image_size):
    lo, hi = cfg.objects_per_scene
    smin, smax = (max(4, int(round(f * image_size))) for f in cfg.size_range)
    n_obj = cfg.n_classes - 1
    sched = []
    bag = []
    for _ in range(n_scenes):
        k = int(rng.integers(lo, hi + 1))
        scene = []
        for _ in range(k):
            if not bag:
                bag = list(rng.permutation(n_obj) + 1)
            scene.append((int(bag.pop()), int(rng.integers(smin, smax + 1))))
        sched.append(scene)
    return sched


def gen_synthetic(config, n_per_domain, image_size=32, seed=0, n_test=None, n_source=None,
                  n_source_heldout=None):
    """Build the full desk-scale corpus.

    Returns a dict with ``source`` (clean labelled scenes), ``source_heldout``,
    ``domains`` ({name: {"train": unlabelled styled, "test": labelled styled}})
    and ``unseen`` (labelled, style absent from training).
    """
    if image_size < 16:
        raise ValueError("image_size must be >= 16")
    n_test = n_per_domain // 2 if n_test is None else n_test
    n_source = 2 * n_per_domain if n_source is None else n_source
    n_source_heldout = n_test if n_source_heldout is None else n_source_heldout
    root = np.random.SeedSequence(seed)
    sched_rng, src_rng, *dom_seeds = [np.random.default_rng(s) for s in root.spawn(3 + len(config.domains))]
    unseen_rng = dom_seeds.pop()
    h = w = image_size
    n_dom_scenes = n_per_domain + n_test
    sched = _schedule(sched_rng, max(n_dom_scenes, n_source + n_source_heldout), config, image_size)

    def scenes(rng, count, prefix):
        return [Sample(*render_scene(rng, sched[i], h, w), name=f"{prefix}{i:04d}") for i in range(count)]

    src = scenes(src_rng, n_source + n_source_heldout, "src")
    out = {"source": src[:n_source], "source_heldout": src[n_source:], "domains": {}, "unseen": []}
    for style, rng in zip(config.domains, dom_seeds):
        clean = scenes(rng, n_dom_scenes, style.name)
        styled = [Sample(apply_style(s.image, style, rng), s.labels, s.name) for s in clean]
        train = [Sample(s.image, None, s.name) for s in styled[:n_per_domain]]
        out["domains"][style.name] = {"train": train, "test": styled[n_per_domain:]}
    if config.unseen is not None:
        clean = scenes(unseen_rng, n_test, config.unseen.name)
        out["unseen"] = [Sample(apply_style(s.image, config.unseen, unseen_rng), s.labels, s.name)
                         for s in clean]
    return out
