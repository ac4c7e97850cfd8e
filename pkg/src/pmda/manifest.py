"""Run manifests: class list, data file lists, per-stage hyperparameters, seed.

A manifest is JSON. Paths are relative to the manifest's own directory.
Every validation failure raises ManifestError carrying the dotted key of the
offending entry (e.g. ``data.domains[1].test[3][0]``).
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError

DEFAULT_CLASSES = ["background", "bird", "boat", "bottle", "cat", "chair", "cow", "dog", "horse",
                   "person", "potted plant", "sheep"]

# desk-scale defaults; every key may be overridden per stage in the manifest
STAGE_DEFAULTS = {
    "train_style": {"widths": [8, 16, 32, 64, 64], "ae_steps": 1000, "ae_lr": 2e-3, "ae_batch": 8,
                    "steps": 300, "lr": 1e-3, "batch": 4, "lambda_style": 10.0, "optimizer": "adam"},
    "make_pseudo": {"alpha": 0.5},
    "train_seg": {"widths": [16, 32, 32], "steps": 500, "lr": 0.05, "batch": 4, "padain_p": 0.01,
                  "momentum": 0.9},
    "confuse": {"steps": 200, "seg_lr": 0.005, "disc_lr": 0.01, "lambda_adv": 0.3, "padain_p": 0.5,
                "batch": 4, "disc_width": 32, "heldout": 4, "eval_every": 10, "momentum": 0.9},
    "build_space": {"d_max": 32, "variance_target": 0.99},
    "infer": {"k": 5, "fuse_mode": "prob"},
}

_NAME = re.compile(r"[A-Za-z0-9_-]+")

SYNTHETIC_DEFAULTS = {"n_per_domain": 20, "n_test": 10, "n_source": 40, "n_source_heldout": 10,
                      "image_size": 32}


@dataclass
class LabelledItem:
    image: Path
    labels: Path = None

    @property
    def name(self):
        return self.image.stem


@dataclass
class Manifest:
    path: Path
    raw: dict
    seed: int
    classes: list
    stages: dict
    synthetic: dict = None
    data: dict = None     # resolved paths; None before gen-data

    @property
    def root(self):
        return self.path.parent

    @property
    def n_classes(self):
        return len(self.classes)

    @property
    def domain_names(self):
        return [d["name"] for d in self.data["domains"]] if self.data else []

    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode("utf-8")).hexdigest()

    def stage_seed(self, stage, *keys):
        """Independent, named substream of the run seed for one stage (and optional job keys)."""
        entropy = [self.seed] + [zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k)
                                 for k in (stage, *keys)]
        return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _expect(cond, key, msg):
    if not cond:
        raise ManifestError(key, msg)


def _number(value, key, kind=float, lo=None, hi=None):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind is int:
        ok = ok and float(value).is_integer()
    _expect(ok, key, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}")
    value = kind(value)
    _expect(lo is None or value >= lo, key, f"must be >= {lo}, got {value}")
    _expect(hi is None or value <= hi, key, f"must be <= {hi}, got {value}")
    return value


_STAGE_RULES = {
    # key: (kind, lo, hi); lists and enums handled separately
    "steps": (int, 0, None), "ae_steps": (int, 0, None), "batch": (int, 1, None), "ae_batch": (int, 1, None),
    "lr": (float, 0, None), "ae_lr": (float, 0, None), "seg_lr": (float, 0, None), "disc_lr": (float, 0, None),
    "lambda_style": (float, 0, None), "lambda_adv": (float, 0, None), "alpha": (float, 0, 1),
    "padain_p": (float, 0, 1), "momentum": (float, 0, 1), "disc_width": (int, 1, None),
    "heldout": (int, 0, None), "eval_every": (int, 1, None), "d_max": (int, 1, None),
    "variance_target": (float, 0, 1), "k": (int, 1, None),
}
_ENUMS = {"optimizer": ("adam", "sgd"), "fuse_mode": ("prob", "logit")}


def _stages(raw):
    given = raw.get("stages", {})
    _expect(isinstance(given, dict), "stages", "expected an object")
    out = copy.deepcopy(STAGE_DEFAULTS)
    for stage, block in given.items():
        _expect(stage in STAGE_DEFAULTS, f"stages.{stage}", f"unknown stage (known: {', '.join(STAGE_DEFAULTS)})")
        _expect(isinstance(block, dict), f"stages.{stage}", "expected an object")
        for key, value in block.items():
            dotted = f"stages.{stage}.{key}"
            _expect(key in STAGE_DEFAULTS[stage], dotted, "unknown parameter")
            if key == "widths":
                _expect(isinstance(value, list) and value and all(isinstance(v, int) and v > 0 for v in value),
                        dotted, "expected a list of positive integers")
                if stage == "train_style":
                    _expect(len(value) == 5, dotted, "the style encoder needs exactly five widths")
            elif key in _ENUMS:
                _expect(value in _ENUMS[key], dotted, f"expected one of {_ENUMS[key]}, got {value!r}")
            else:
                value = _number(value, dotted, *_STAGE_RULES[key])
            out[stage][key] = value
    return out


def _file(root, value, key):
    _expect(isinstance(value, str) and value, key, "expected a file path")
    path = (root / value).resolve()
    _expect(path.is_file(), key, f"file not found: {path}")
    return path


def _pairs(root, items, key, labelled=True):
    _expect(isinstance(items, list), key, "expected a list")
    out = []
    for i, item in enumerate(items):
        k = f"{key}[{i}]"
        if labelled:
            _expect(isinstance(item, list) and len(item) == 2, k, "expected [image, labels]")
            out.append(LabelledItem(_file(root, item[0], f"{k}[0]"), _file(root, item[1], f"{k}[1]")))
        else:
            out.append(LabelledItem(_file(root, item, k)))
    return out


def _data(root, raw):
    _expect(isinstance(raw, dict), "data", "expected an object")
    src = raw.get("source")
    _expect(isinstance(src, dict), "data.source", "expected an object with train/heldout lists")
    out = {"source": {"train": _pairs(root, src.get("train"), "data.source.train"),
                      "heldout": _pairs(root, src.get("heldout", []), "data.source.heldout")}}
    _expect(out["source"]["train"], "data.source.train", "source set is empty")
    doms = raw.get("domains")
    _expect(isinstance(doms, list) and doms, "data.domains", "expected a nonempty list of sub-domains")
    out["domains"] = []
    names = set()
    for i, dom in enumerate(doms):
        k = f"data.domains[{i}]"
        _expect(isinstance(dom, dict), k, "expected an object")
        name = dom.get("name")
        _expect(isinstance(name, str) and _NAME.fullmatch(name), f"{k}.name",
                "expected a name of letters, digits, '-' or '_'")
        _expect(name not in names, f"{k}.name", f"duplicate sub-domain {name!r}")
        names.add(name)
        train = _pairs(root, dom.get("train"), f"{k}.train", labelled=False)
        _expect(train, f"{k}.train", "style image set is empty")
        out["domains"].append({"name": name, "train": train,
                               "test": _pairs(root, dom.get("test", []), f"{k}.test")})
    out["unseen"] = _pairs(root, raw.get("unseen", []), "data.unseen")
    return out


def parse_manifest(raw, path):
    path = Path(path)
    _expect(isinstance(raw, dict), "<root>", "manifest must be a JSON object")
    known = {"seed", "classes", "stages", "synthetic", "data"}
    for key in raw:
        _expect(key in known, key, "unknown top-level key")
    seed = _number(raw.get("seed", 0), "seed", int, 0, 2 ** 64 - 1)
    classes = raw.get("classes", DEFAULT_CLASSES)
    _expect(isinstance(classes, list) and len(classes) >= 2, "classes", "need at least background and one class")
    for i, c in enumerate(classes):
        _expect(isinstance(c, str) and c, f"classes[{i}]", "expected a nonempty name")
    _expect(classes[0] == "background", "classes[0]", "class 0 must be 'background'")
    _expect(len(set(classes)) == len(classes), "classes", "duplicate class names")
    _expect(len(classes) <= 255, "classes", "at most 255 classes (255 is the ignore label)")
    synthetic = None
    if "synthetic" in raw:
        synthetic = _synthetic(raw["synthetic"])
    data = _data(path.parent, raw["data"]) if "data" in raw else None
    return Manifest(path, raw, seed, list(classes), _stages(raw), synthetic, data)


def _synthetic(raw):
    from .data.synthetic import SyntheticStyleConfig
    _expect(isinstance(raw, dict), "synthetic", "expected an object")
    out = dict(SYNTHETIC_DEFAULTS)
    for key in ("n_per_domain", "n_test", "n_source", "n_source_heldout", "image_size"):
        if key in raw:
            out[key] = _number(raw[key], f"synthetic.{key}", int, 16 if key == "image_size" else 1)
    styles = raw.get("styles")
    _expect(isinstance(styles, list) and styles, "synthetic.styles", "expected a nonempty list of styles")
    parsed = []
    for i, s in enumerate(styles):
        _expect(isinstance(s, dict) and isinstance(s.get("name"), str) and _NAME.fullmatch(s["name"]),
                f"synthetic.styles[{i}].name", "expected a name of letters, digits, '-' or '_'")
        _expect(s["name"] not in [p.name for p in parsed], f"synthetic.styles[{i}].name", "duplicate style name")
        try:
            parsed.append(SyntheticStyleConfig.from_dict(s))
        except (TypeError, ValueError) as e:
            raise ManifestError(f"synthetic.styles[{i}]", str(e)) from None
    out["styles"] = parsed
    out["unseen"] = None
    if raw.get("unseen") is not None:
        try:
            out["unseen"] = SyntheticStyleConfig.from_dict(raw["unseen"])
        except (TypeError, ValueError) as e:
            raise ManifestError("synthetic.unseen", str(e)) from None
    for key in ("objects_per_scene", "size_range"):
        if key in raw:
            v = raw[key]
            _expect(isinstance(v, list) and len(v) == 2 and v[0] <= v[1], f"synthetic.{key}", "expected [lo, hi]")
            out[key] = tuple(v)
    return out


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise ManifestError("<file>", f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError("<file>", f"not valid JSON: {e}") from None
    return parse_manifest(raw, path.resolve())
