"""Save/load of networks and fitted models through the weights file.

Every file carries a ``kind`` in its metadata so a wrong artifact is rejected
with a clear message instead of a shape error deep inside a forward pass.
float64 arrays (the style space) are stored bit-exactly by viewing their
bytes as pairs of float32 words.
"""

from __future__ import annotations

import numpy as np

from .data.weights import load_tensors, save_tensors
from .errors import FormatError
from .networks import NETWORK_KINDS
from .seg_train import SegModel
from .style_space import StyleSpace
from .style_transfer import StyleTransferModel
from .tensor import Tensor


def _check_kind(meta, kind, path):
    got = (meta or {}).get("kind")
    if got != kind:
        raise FormatError(f"{path}: expected a {kind!r} artifact, found {got!r}")


def _net_tensors(net, prefix=""):
    return {prefix + name: p.data for name, p in net.params.items()}


def _net_from(kind, config, tensors, prefix=""):
    cls = NETWORK_KINDS[kind]
    params = {name[len(prefix):]: Tensor(arr, requires_grad=True)
              for name, arr in tensors.items() if name.startswith(prefix)}
    return cls(params, dict(config))


def save_network(path, net):
    save_tensors(path, _net_tensors(net), {"kind": "network", "net": net.kind, "config": net.config})


def load_network(path):
    tensors, meta = load_tensors(path)
    _check_kind(meta, "network", path)
    return _net_from(meta["net"], meta["config"], tensors)


def save_seg_model(path, model):
    meta = {"kind": "seg_model", "config": model.net.config, "domain_id": model.domain_id,
            "training_meta": model.training_meta}
    save_tensors(path, _net_tensors(model.net), meta)


def load_seg_model(path):
    tensors, meta = load_tensors(path)
    _check_kind(meta, "seg_model", path)
    net = _net_from("segnet", meta["config"], tensors)
    return SegModel(net, int(meta["domain_id"]), meta["training_meta"])


def save_style_model(path, model):
    tensors = {**_net_tensors(model.encoder, "encoder/"), **_net_tensors(model.decoder, "decoder/")}
    meta = {"kind": "style_model", "encoder": model.encoder.config, "decoder": model.decoder.config,
            "lambda_style": model.lambda_style}
    save_tensors(path, tensors, meta)


def load_style_model(path):
    tensors, meta = load_tensors(path)
    _check_kind(meta, "style_model", path)
    enc = _net_from("style_encoder", meta["encoder"], tensors, "encoder/")
    dec = _net_from("style_decoder", meta["decoder"], tensors, "decoder/")
    return StyleTransferModel(enc, dec, float(meta["lambda_style"]))


_SPACE_ARRAYS = ("train_unit", "kernel_col_mean", "eigenvalues", "coefficients", "train_embedding")


def _f64_as_f32(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return arr.view("<f4").reshape(arr.shape[:-1] + (2 * arr.shape[-1],)) if arr.ndim else arr


def _f32_as_f64(arr, shape):
    return np.ascontiguousarray(arr, dtype="<f4").view("<f8").reshape(shape).astype(np.float64)


def save_style_space(path, space):
    tensors = {name: _f64_as_f32(getattr(space, name)) for name in _SPACE_ARRAYS}
    tensors["domains"] = space.domains.astype(np.float32)
    meta = {"kind": "style_space", "n_domains": space.n_domains,
            "kernel_mean": float(space.kernel_mean).hex(),
            "explained_variance_ratio": float(space.explained_variance_ratio).hex(),
            "shapes": {name: list(np.shape(getattr(space, name))) for name in _SPACE_ARRAYS}}
    save_tensors(path, tensors, meta)


def load_style_space(path):
    tensors, meta = load_tensors(path)
    _check_kind(meta, "style_space", path)
    arrays = {name: _f32_as_f64(tensors[name], tuple(meta["shapes"][name])) for name in _SPACE_ARRAYS}
    return StyleSpace(
        domains=tensors["domains"].astype(np.int64),
        n_domains=int(meta["n_domains"]),
        kernel_mean=float.fromhex(meta["kernel_mean"]),
        explained_variance_ratio=float.fromhex(meta["explained_variance_ratio"]),
        **arrays,
    )
