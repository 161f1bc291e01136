"""On-disk formats: PKEY key files, TNSR tensor files, PPM/PGM import,
model manifests, and compiled keyed-model artifacts.

All multi-byte integers are little-endian and all floats are IEEE-754 single
precision; the bit-exactness story depends on pinned encodings. Every writer
goes through an atomic temp-file-plus-rename so a failed run never leaves a
partial file behind.

Key files are plaintext by design. A deployment that wants the key sealed
(AES-wrapped, say) would encrypt the whole PKEY payload; that wrapping is out
of scope here and orthogonal to the format.
"""

from __future__ import annotations

import json
import math
import os
import struct
from typing import Optional

import numpy as np

from .deform import ConvParams, OffsetVolume, PoolParams, derive_conv_offsets, derive_pool_offsets
from .errors import FormatError, IntegrityError, KeyedConvError, ShapeError
from .keys import KeyChain, PermKey
from .model import (
    Affine,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    KeyedModel,
    MaxPool2d,
    ModelSpec,
    Relu,
    ResidualAdd,
)
from .tensor_ops import Tensor

__all__ = [
    "write_key",
    "read_key",
    "write_tensor",
    "read_tensor",
    "load_image",
    "save_model",
    "load_model",
    "save_keyed_model",
    "load_keyed_model",
]

_KEY_MAGIC = b"PKEY"
_TENSOR_MAGIC = b"TNSR"
_VERSION = 1


def _atomic_write(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- key files

def write_key(path: str, key: PermKey) -> None:
    header = struct.pack("<4sBII", _KEY_MAGIC, _VERSION, key.height, key.width)
    _atomic_write(path, header + key.map.astype("<u4").tobytes())


def read_key(path: str) -> PermKey:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13:
        raise IntegrityError(f"key file {path} is truncated ({len(data)} bytes)")
    magic, version, height, width = struct.unpack_from("<4sBII", data, 0)
    if magic != _KEY_MAGIC:
        raise FormatError(f"{path} is not a key file (bad magic {magic!r})")
    if version != _VERSION:
        raise FormatError(f"unsupported key file version {version}")
    expected = 13 + 4 * height * width
    if len(data) != expected:
        raise IntegrityError(
            f"key file {path} has {len(data)} bytes, expected {expected}"
        )
    payload = np.frombuffer(data, dtype="<u4", offset=13).astype(np.int64)
    return PermKey(int(height), int(width), payload)


# ------------------------------------------------------------- tensor files

def write_tensor(path: str, tensor: Tensor) -> None:
    header = struct.pack("<4sBB", _TENSOR_MAGIC, _VERSION, tensor.rank)
    dims = np.asarray(tensor.dims, dtype="<u4").tobytes()
    _atomic_write(path, header + dims + tensor.array.astype("<f4").tobytes())


def read_tensor(path: str) -> Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 6:
        raise IntegrityError(f"tensor file {path} is truncated ({len(data)} bytes)")
    magic, version, rank = struct.unpack_from("<4sBB", data, 0)
    if magic != _TENSOR_MAGIC:
        raise FormatError(f"{path} is not a tensor file (bad magic {magic!r})")
    if version != _VERSION:
        raise FormatError(f"unsupported tensor file version {version}")
    if rank < 1 or rank > 4:
        raise FormatError(f"tensor rank must be 1..4, got {rank}")
    if len(data) < 6 + 4 * rank:
        raise IntegrityError(f"tensor file {path} is truncated in the header")
    dims = np.frombuffer(data, dtype="<u4", offset=6, count=rank)
    if any(int(d) < 1 for d in dims):
        raise FormatError(f"tensor extents must be >= 1, got {tuple(int(d) for d in dims)}")
    count = int(np.prod(dims.astype(np.int64)))
    expected = 6 + 4 * rank + 4 * count
    if len(data) != expected:
        raise IntegrityError(
            f"tensor file {path} has {len(data)} bytes, expected {expected}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=6 + 4 * rank, count=count)
    if not np.all(np.isfinite(values)):
        raise IntegrityError(f"tensor file {path} contains non-finite values")
    return Tensor(values.reshape(tuple(int(d) for d in dims)))


# ------------------------------------------------------------- image import

def _pnm_tokens(data: bytes, count: int, path: str) -> tuple[list[int], int]:
    """First `count` whitespace-separated integer tokens after the magic,
    honouring # comments; returns them plus the offset just past the single
    whitespace byte that terminates the header."""
    pos = 2  # past the 2-byte magic
    tokens: list[int] = []
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos] == ord("#"):
            while pos < len(data) and data[pos] != ord("\n"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated image header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(
                f"{path}: bad header token {data[start:pos]!r}"
            ) from None
    return tokens, pos + 1  # single whitespace after maxval


def _read_pnm(path: str, magic: bytes, channels: int) -> Tensor:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, got {data[:2]!r}")
    (width, height, maxval), offset = _pnm_tokens(data, 3, path)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad image size {width}x{height}")
    count = width * height * channels
    pixels = data[offset : offset + count]
    if len(pixels) != count:
        raise IntegrityError(
            f"{path}: expected {count} pixel bytes, found {len(pixels)}"
        )
    raw = np.frombuffer(pixels, dtype=np.uint8)
    if channels == 1:
        planes = raw.reshape(1, height, width)
    else:
        planes = raw.reshape(height, width, channels).transpose(2, 0, 1)
    return Tensor(planes.astype(np.float32) / np.float32(255))


def load_image(path: str) -> Tensor:
    """Tensor from a .ppm (P6, 3 channels), .pgm (P5, 1 channel) or .tnsr
    file; raw 8-bit samples are scaled by 1/255 into [0, 1]."""
    lower = path.lower()
    if lower.endswith(".ppm"):
        return _read_pnm(path, b"P6", 3)
    if lower.endswith(".pgm"):
        return _read_pnm(path, b"P5", 1)
    if lower.endswith(".tnsr"):
        return read_tensor(path)
    raise FormatError(f"unsupported image extension on {path} (.ppm/.pgm/.tnsr)")


# ----------------------------------------------------------- model manifest

class _BlobWriter:
    def __init__(self) -> None:
        self.parts: list[bytes] = []
        self.elements = 0

    def add(self, tensor: Tensor) -> dict:
        ref = {"blob_offset": self.elements, "shape": list(tensor.dims)}
        self.parts.append(tensor.array.astype("<f4").tobytes())
        self.elements += tensor.array.size
        return ref

    def bytes(self) -> bytes:
        return b"".join(self.parts)


class _BlobReader:
    """Bounds-checked element-offset reads from a raw f32 little-endian file."""

    def __init__(self, path: str) -> None:
        try:
            with open(path, "rb") as fh:
                self.data = fh.read()
        except OSError:
            raise IntegrityError(f"dangling blob reference: cannot read {path}") from None
        if len(self.data) % 4 != 0:
            raise IntegrityError(f"blob {path} length {len(self.data)} is not a multiple of 4")
        self.elements = len(self.data) // 4
        self.path = path
        self.claimed: list[tuple[int, int]] = []

    def read(self, ref, what: str) -> Tensor:
        if (
            not isinstance(ref, dict)
            or not isinstance(ref.get("blob_offset"), int)
            or not isinstance(ref.get("shape"), list)
        ):
            raise FormatError(f"{what}: weight reference needs blob_offset and shape")
        shape = tuple(int(d) for d in ref["shape"])
        if not shape or any(d < 1 for d in shape):
            raise FormatError(f"{what}: bad shape {shape}")
        offset = int(ref["blob_offset"])
        count = math.prod(shape)
        if offset < 0 or offset + count > self.elements:
            raise IntegrityError(
                f"{what}: dangling blob reference [{offset}, {offset + count}) "
                f"in a blob of {self.elements} elements"
            )
        self.claimed.append((offset, offset + count))
        values = np.frombuffer(self.data, dtype="<f4", offset=4 * offset, count=count)
        if not np.all(np.isfinite(values)):
            raise IntegrityError(f"{what}: blob values are not finite")
        return Tensor(values.reshape(shape))

    def check_no_overlap(self) -> None:
        spans = sorted(self.claimed)
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0:
                raise IntegrityError(
                    f"blob {self.path}: overlapping weight references at "
                    f"element {s1}"
                )


def _layer_to_json(layer, blob: _BlobWriter) -> dict:
    if isinstance(layer, Conv2d):
        return {
            "kind": "conv2d",
            "stride": layer.stride,
            "padding": layer.padding,
            "weight": blob.add(layer.weight),
            "bias": blob.add(layer.bias),
        }
    if isinstance(layer, MaxPool2d):
        return {
            "kind": "maxpool2d",
            "window": layer.window,
            "stride": layer.stride,
            "padding": layer.padding,
        }
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    if isinstance(layer, Affine):
        return {
            "kind": "affine",
            "scale": blob.add(layer.scale),
            "shift": blob.add(layer.shift),
        }
    if isinstance(layer, ResidualAdd):
        return {"kind": "residual_add", "source": layer.source}
    if isinstance(layer, GlobalAvgPool):
        return {"kind": "global_avg_pool"}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, Dense):
        return {
            "kind": "dense",
            "weight": blob.add(layer.weight),
            "bias": blob.add(layer.bias),
        }
    raise FormatError(f"cannot serialize layer type {type(layer).__name__}")


def _int_field(obj: dict, name: str, what: str, default=None):
    value = obj.get(name, default)
    if not isinstance(value, int) or isinstance(value, bool):
        raise FormatError(f"{what}: field {name!r} must be an integer")
    return value


def _layer_from_json(obj, blob: _BlobReader, idx: int):
    what = f"layer {idx}"
    if not isinstance(obj, dict) or "kind" not in obj:
        raise FormatError(f"{what}: each layer needs a 'kind'")
    kind = obj["kind"]
    if kind == "conv2d":
        return Conv2d(
            weight=blob.read(obj.get("weight"), what),
            bias=blob.read(obj.get("bias"), what),
            stride=_int_field(obj, "stride", what, 1),
            padding=_int_field(obj, "padding", what, 0),
        )
    if kind == "maxpool2d":
        return MaxPool2d(
            window=_int_field(obj, "window", what),
            stride=_int_field(obj, "stride", what),
            padding=_int_field(obj, "padding", what, 0),
        )
    if kind == "relu":
        return Relu()
    if kind == "affine":
        return Affine(
            scale=blob.read(obj.get("scale"), what),
            shift=blob.read(obj.get("shift"), what),
        )
    if kind == "residual_add":
        return ResidualAdd(source=_int_field(obj, "source", what))
    if kind == "global_avg_pool":
        return GlobalAvgPool()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(
            weight=blob.read(obj.get("weight"), what),
            bias=blob.read(obj.get("bias"), what),
        )
    raise FormatError(f"{what}: unknown layer kind {kind!r}")


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be a JSON object")
    return doc


def _sidecar(path: str, name) -> str:
    if not isinstance(name, str) or not name:
        raise FormatError(f"{path}: 'blob' must name the sidecar file")
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def save_model(model: ModelSpec, manifest_path: str, blob_name: Optional[str] = None) -> None:
    """Manifest JSON plus a raw f32 sidecar holding all weights in layer order."""
    if blob_name is None:
        base = os.path.basename(manifest_path)
        blob_name = (base[:-5] if base.endswith(".json") else base) + ".bin"
    blob = _BlobWriter()
    layers = [_layer_to_json(layer, blob) for layer in model.layers]
    doc = {
        "format": "keyedconv-model",
        "version": _VERSION,
        "input_dims": list(model.input_dims),
        "blob": blob_name,
        "layers": layers,
    }
    _atomic_write(_sidecar(manifest_path, blob_name), blob.bytes())
    _atomic_write(manifest_path, json.dumps(doc, indent=2).encode() + b"\n")


def load_model(manifest_path: str) -> ModelSpec:
    doc = _load_json(manifest_path)
    if doc.get("format") != "keyedconv-model":
        raise FormatError(f"{manifest_path}: not a model manifest")
    if doc.get("version") != _VERSION:
        raise FormatError(f"{manifest_path}: unsupported version {doc.get('version')}")
    dims = doc.get("input_dims")
    if not isinstance(dims, list) or len(dims) != 3:
        raise FormatError(f"{manifest_path}: input_dims must be [C, H, W]")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list):
        raise FormatError(f"{manifest_path}: 'layers' must be a list")
    blob = _BlobReader(_sidecar(manifest_path, doc.get("blob")))
    layers = [_layer_from_json(obj, blob, i) for i, obj in enumerate(raw_layers)]
    blob.check_no_overlap()
    return ModelSpec(tuple(dims), layers)


# ------------------------------------------------------ compiled keyed model

def _key_to_json(key: PermKey) -> dict:
    return {"height": key.height, "width": key.width, "map": [int(q) for q in key.map]}


def _key_from_json(obj, what: str) -> PermKey:
    if (
        not isinstance(obj, dict)
        or not isinstance(obj.get("height"), int)
        or not isinstance(obj.get("width"), int)
        or not isinstance(obj.get("map"), list)
    ):
        raise FormatError(f"{what}: key needs height, width and map")
    try:
        return PermKey(obj["height"], obj["width"], np.asarray(obj["map"], dtype=np.int64))
    except (ValueError, TypeError):
        raise FormatError(f"{what}: key map must be a list of integers") from None


def save_keyed_model(keyed: KeyedModel, path: str, blob_name: Optional[str] = None) -> None:
    """Compiled artifact: one JSON document (chain, offsets, layer list) plus
    the weight blob sidecar. Offsets are stored as integers inline; they are
    exactly integral by construction."""
    if blob_name is None:
        base = os.path.basename(path)
        blob_name = (base[:-5] if base.endswith(".json") else base) + ".bin"
    blob = _BlobWriter()
    layers = [_layer_to_json(layer, blob) for layer in keyed.spec.layers]
    offsets = {
        str(idx): {
            "dims": list(vol.values.shape),
            "values": [int(v) for v in vol.values.reshape(-1)],
        }
        for idx, vol in sorted(keyed.offsets.items())
    }
    doc = {
        "format": "keyedconv-compiled",
        "version": _VERSION,
        "input_dims": list(keyed.spec.input_dims),
        "blob": blob_name,
        "layers": layers,
        "session_seed": keyed.chain.session_seed,
        "chain": [_key_to_json(k) for k in keyed.chain.entries],
        "final_unshuffle": (
            None if keyed.final_unshuffle is None else _key_to_json(keyed.final_unshuffle)
        ),
        "offsets": offsets,
    }
    _atomic_write(_sidecar(path, blob_name), blob.bytes())
    _atomic_write(path, json.dumps(doc).encode() + b"\n")


def _spot_check_offsets(keyed: KeyedModel, path: str) -> None:
    """Re-derive the first spatial layer's offsets from the stored chain and
    compare; catches a tampered or mismatched artifact cheaply."""
    for idx, layer in enumerate(keyed.spec.layers):
        if not isinstance(layer, (Conv2d, MaxPool2d)):
            continue
        if idx not in keyed.offsets:
            raise IntegrityError(f"{path}: missing offsets for spatial layer {idx}")
        cursor = sum(
            1 for i in range(idx) if isinstance(keyed.spec.layers[i], (Conv2d, MaxPool2d))
        )
        key_in = keyed.chain.entries[cursor]
        key_out = keyed.chain.entries[cursor + 1]
        if isinstance(layer, Conv2d):
            expected = derive_conv_offsets(key_in, key_out, layer.params)
        else:
            expected = derive_pool_offsets(key_in, key_out, layer.params)
        if not np.array_equal(expected.values, keyed.offsets[idx].values):
            raise IntegrityError(
                f"{path}: stored offsets for layer {idx} do not match the key chain"
            )
        return


def load_keyed_model(path: str) -> KeyedModel:
    doc = _load_json(path)
    if doc.get("format") != "keyedconv-compiled":
        raise FormatError(f"{path}: not a compiled model artifact")
    if doc.get("version") != _VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')}")
    dims = doc.get("input_dims")
    if not isinstance(dims, list) or len(dims) != 3:
        raise FormatError(f"{path}: input_dims must be [C, H, W]")
    raw_layers = doc.get("layers")
    if not isinstance(raw_layers, list):
        raise FormatError(f"{path}: 'layers' must be a list")
    blob = _BlobReader(_sidecar(path, doc.get("blob")))
    layers = [_layer_from_json(obj, blob, i) for i, obj in enumerate(raw_layers)]
    blob.check_no_overlap()
    spec = ModelSpec(tuple(dims), layers)

    raw_chain = doc.get("chain")
    if not isinstance(raw_chain, list) or not raw_chain:
        raise FormatError(f"{path}: 'chain' must be a non-empty list")
    chain = [_key_from_json(k, f"chain[{i}]") for i, k in enumerate(raw_chain)]
    session_seed = doc.get("session_seed")
    if not isinstance(session_seed, int) or isinstance(session_seed, bool):
        raise FormatError(f"{path}: session_seed must be an integer")

    raw_offsets = doc.get("offsets")
    if not isinstance(raw_offsets, dict):
        raise FormatError(f"{path}: 'offsets' must be an object")
    offsets: dict[int, OffsetVolume] = {}
    for key, entry in raw_offsets.items():
        try:
            idx = int(key)
        except ValueError:
            raise FormatError(f"{path}: offset index {key!r} is not an integer") from None
        if (
            not isinstance(entry, dict)
            or not isinstance(entry.get("dims"), list)
            or not isinstance(entry.get("values"), list)
        ):
            raise FormatError(f"{path}: offsets[{key}] needs dims and values")
        shape = tuple(int(d) for d in entry["dims"])
        values = np.asarray(entry["values"], dtype=np.float32)
        if len(shape) != 3 or values.size != math.prod(shape):
            raise IntegrityError(f"{path}: offsets[{key}] dims do not match values")
        try:
            offsets[idx] = OffsetVolume(values.reshape(shape))
        except KeyedConvError as exc:
            raise IntegrityError(f"{path}: offsets[{key}]: {exc}") from None

    final = doc.get("final_unshuffle")
    final_key = None if final is None else _key_from_json(final, "final_unshuffle")

    spatial_idx = {
        i for i, l in enumerate(layers) if isinstance(l, (Conv2d, MaxPool2d))
    }
    if set(offsets) != spatial_idx:
        raise IntegrityError(
            f"{path}: offsets must cover exactly the conv/pool layers "
            f"{sorted(spatial_idx)}, got {sorted(offsets)}"
        )
    if len(chain) != len(spatial_idx) + 1:
        raise IntegrityError(
            f"{path}: chain has {len(chain)} entries, expected {len(spatial_idx) + 1}"
        )
    if chain[0].grid != (spec.input_dims[1], spec.input_dims[2]):
        raise IntegrityError(f"{path}: chain entry 0 does not match the input grid")

    keyed = KeyedModel(
        spec=spec,
        chain=KeyChain(chain, session_seed),
        offsets=offsets,
        final_unshuffle=final_key,
        acquisition_key_grid=chain[0].grid,
    )
    _spot_check_offsets(keyed, path)
    return keyed
