"""Versioned model checkpoints with bit-exact round-trips.

An ``.npz`` container holds the named parameter arrays plus a JSON
metadata record: layer descriptors, input shape, training-method tag, and
the (seed, dims, scale) triples from which the defense matrix and the
feedback matrix are regenerated. Neither matrix is ever serialized.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .dfa import FeedbackMatrix
from .errors import InputError
from .nn import Conv2d, Dense, Flatten, LayerNorm, MaxPool2d, Model, ReLU
from .opu import OpuLayer

FORMAT_VERSION = 1


def _describe(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "in_dim": layer.in_dim, "out_dim": layer.out_dim}
    if isinstance(layer, Conv2d):
        return {"kind": "conv", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                "ksize": layer.ksize, "stride": layer.stride, "pad": layer.pad}
    if isinstance(layer, ReLU):
        return {"kind": "relu"}
    if isinstance(layer, MaxPool2d):
        return {"kind": "maxpool", "size": layer.size}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, LayerNorm):
        return {"kind": "layernorm", "eps": layer.eps}
    if isinstance(layer, OpuLayer):
        return {"kind": "opu", **layer.spec()}
    raise InputError(f"cannot checkpoint layer {type(layer).__name__}")


def _build(desc: dict):
    kind = desc["kind"]
    if kind == "dense":
        return Dense(desc["in_dim"], desc["out_dim"])
    if kind == "conv":
        return Conv2d(desc["in_ch"], desc["out_ch"], ksize=desc["ksize"],
                      stride=desc["stride"], pad=desc["pad"])
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2d(desc["size"])
    if kind == "flatten":
        return Flatten()
    if kind == "layernorm":
        return LayerNorm(eps=desc["eps"])
    if kind == "opu":
        return OpuLayer(desc["input_dim"], desc["output_dim"], desc["seed"],
                        entry_scale=desc["entry_scale"],
                        quantize_bits=desc["quantize_bits"],
                        binarize_input=desc["binarize_input"],
                        project=desc["project"])
    raise InputError(f"unknown layer kind {kind!r} in checkpoint")


def save_checkpoint(model: Model, path) -> None:
    """Write atomically: the file appears complete or not at all."""
    meta = {
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "dtype": model.dtype.name,
        "layers": [_describe(l) for l in model.layers],
        "training_method": model.training_method,
        "feedback": model.feedback.spec() if model.feedback else None,
    }
    arrays = {f"param.{name}": arr for name, arr in model.params.items()}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays, meta=np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))
    os.replace(tmp, path)


def load_checkpoint(path) -> Model:
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["meta"]).decode())
        if meta.get("version") != FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint version {meta.get('version')}")
        layers = [_build(d) for d in meta["layers"]]
        model = Model(layers, meta["input_shape"], dtype=np.dtype(meta["dtype"]))
        params = model.params
        for key in archive.files:
            if not key.startswith("param."):
                continue
            name = key[len("param."):]
            if name not in params:
                raise InputError(f"checkpoint parameter {name} has no home")
            stored = archive[key]
            if params[name].shape != stored.shape:
                raise InputError(f"shape mismatch for {name}")
            params[name][...] = stored
        model.training_method = meta["training_method"]
        if meta["feedback"]:
            fb = meta["feedback"]
            model.feedback = FeedbackMatrix(fb["rows"], fb["num_classes"],
                                            seed=fb["seed"], scale=fb["scale"])
    return model
