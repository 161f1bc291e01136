"""Export trained nets to the inference engine's file formats.

The writers here are an independent implementation of the formats (PKEY /
TNSR / model manifest + weight blob); nothing is imported from the engine.
That keeps the two sides honest: files written here must load there.
"""

import json
import os
import struct

import numpy as np
import torch
from torch import nn

_KEY_MAGIC = b"PKEY"
_TENSOR_MAGIC = b"TNSR"
_VERSION = 1


class ExportError(RuntimeError):
    pass


# ------------------------------------------------------------- binary files

def write_key(path: str, height: int, width: int, sources) -> None:
    sources = np.asarray(sources, dtype="<u4")
    if sources.size != height * width:
        raise ExportError(f"key map has {sources.size} entries for "
                          f"{height}x{width}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sBII", _KEY_MAGIC, _VERSION, height, width))
        fh.write(sources.tobytes())


def write_identity_key(path: str, height: int, width: int) -> None:
    write_key(path, height, width, np.arange(height * width))


def write_shuffle_key(path: str, height: int, width: int, seed: int) -> None:
    """A random permutation; any bijection is a valid key, the engine does
    not require its own keygen stream."""
    perm = np.random.default_rng(seed).permutation(height * width)
    write_key(path, height, width, perm)


def write_tensor(path: str, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not 1 <= arr.ndim <= 4:
        raise ExportError(f"tensor rank must be 1..4, got {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sBB", _TENSOR_MAGIC, _VERSION, arr.ndim))
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, rank = struct.unpack_from("<4sBB", data, 0)
    if magic != _TENSOR_MAGIC or version != _VERSION:
        raise ExportError(f"{path}: not a readable tensor file")
    dims = np.frombuffer(data, dtype="<u4", count=rank, offset=6)
    payload = np.frombuffer(data, dtype="<f4", offset=6 + 4 * rank)
    return payload.reshape(dims).copy()


# ------------------------------------------------------------ manifest walk

def fold_batchnorm(bn: nn.BatchNorm2d):
    """Inference-time BN folded to y = scale*x + shift, computed in float64
    from the running statistics, stored float32."""
    mean = bn.running_mean.detach().numpy().astype(np.float64)
    var = bn.running_var.detach().numpy().astype(np.float64)
    gamma = bn.weight.detach().numpy().astype(np.float64)
    beta = bn.bias.detach().numpy().astype(np.float64)
    scale = gamma / np.sqrt(var + bn.eps)
    shift = beta - mean * scale
    return scale.astype(np.float32), shift.astype(np.float32)


class _Blob:
    def __init__(self):
        self.parts = []
        self.elements = 0

    def add(self, array) -> dict:
        arr = np.ascontiguousarray(array, dtype="<f4")
        ref = {"blob_offset": self.elements, "shape": list(arr.shape)}
        self.parts.append(arr.tobytes())
        self.elements += arr.size
        return ref


def _pair(value, what: str) -> int:
    if isinstance(value, tuple):
        if value[0] != value[1]:
            raise ExportError(f"{what} must be square, got {value}")
        return int(value[0])
    return int(value)


def _conv_json(mod: nn.Conv2d, blob: _Blob) -> dict:
    if mod.groups != 1 or _pair(mod.dilation, "dilation") != 1:
        raise ExportError("conv must have groups=1, dilation=1")
    weight = mod.weight.detach().numpy()
    bias = (np.zeros(weight.shape[0], np.float32) if mod.bias is None
            else mod.bias.detach().numpy())
    return {
        "kind": "conv2d",
        "stride": _pair(mod.stride, "stride"),
        "padding": _pair(mod.padding, "padding"),
        "weight": blob.add(weight),
        "bias": blob.add(bias),
    }


def layers_json(net: nn.Sequential, blob: _Blob) -> list:
    layers = []
    mods = list(net)
    i = 0
    while i < len(mods):
        mod = mods[i]
        if isinstance(mod, nn.Conv2d):
            layers.append(_conv_json(mod, blob))
        elif isinstance(mod, nn.BatchNorm2d):
            scale, shift = fold_batchnorm(mod)
            layers.append({"kind": "affine", "scale": blob.add(scale),
                           "shift": blob.add(shift)})
        elif isinstance(mod, nn.ReLU):
            layers.append({"kind": "relu"})
        elif isinstance(mod, nn.MaxPool2d):
            layers.append({
                "kind": "maxpool2d",
                "window": _pair(mod.kernel_size, "window"),
                "stride": _pair(mod.stride, "stride"),
                "padding": _pair(mod.padding, "padding"),
            })
        elif isinstance(mod, nn.AdaptiveAvgPool2d):
            if _pair(mod.output_size, "output_size") != 1:
                raise ExportError("adaptive pool must have output size 1")
            layers.append({"kind": "global_avg_pool"})
            # the engine's GAP already yields a vector; swallow the flatten
            if i + 1 < len(mods) and isinstance(mods[i + 1], nn.Flatten):
                i += 1
        elif isinstance(mod, nn.Flatten):
            layers.append({"kind": "flatten"})
        elif isinstance(mod, nn.Linear):
            layers.append({
                "kind": "dense",
                "weight": blob.add(mod.weight.detach().numpy()),
                "bias": blob.add(mod.bias.detach().numpy()),
            })
        else:
            raise ExportError(f"unsupported layer {type(mod).__name__} at "
                              f"position {i}")
        i += 1
    return layers


def export_manifest(net: nn.Sequential, out_dir: str, name: str = "model",
                    input_dims=(1, 28, 28), training=None):
    """Writes <name>.json + <name>.bin; returns (manifest_path, blob_path)."""
    os.makedirs(out_dir, exist_ok=True)
    net.eval()
    blob = _Blob()
    with torch.no_grad():
        layers = layers_json(net, blob)
    doc = {
        "format": "keyedconv-model",
        "version": _VERSION,
        "input_dims": list(input_dims),
        "blob": f"{name}.bin",
        "layers": layers,
    }
    if training is not None:
        doc["training"] = dict(training)
    manifest = os.path.join(out_dir, f"{name}.json")
    blob_path = os.path.join(out_dir, f"{name}.bin")
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(blob.parts))
    with open(manifest, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return manifest, blob_path
