"""Model graph, plain reference engine, keyed compilation and verification.

A ModelSpec is an ordered layer list evaluated front to back. keyed_compile
threads a chain of permutation keys through the network: the input arrives
shuffled under the acquisition key, every conv/pool output is re-shuffled
under a freshly drawn per-layer key, and each spatial operator is replaced by
its deformable twin whose offsets are derived from the (incoming, outgoing)
key pair. Pointwise layers commute with shuffling and are left untouched.
Weights are shared by reference between the plain and keyed models; no
transformation of trained parameters ever happens.

Residual skips need both addends under one key; the compile pass reconciles
them by forcing the last conv/pool between the skip source and the add to
adopt the source's key instead of drawing a fresh one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .deform import (
    ConvParams,
    OffsetVolume,
    PoolParams,
    deform_conv2d,
    deform_maxpool2d,
    derive_conv_offsets,
    derive_pool_offsets,
)
from .errors import IntegrityError, KeyedConvError, ParameterError, ShapeError
from .keys import KeyChain, PermKey, derive_layer_key, identity_key, invert_key
from .tensor_ops import (
    Tensor,
    bitwise_equal,
    conv2d_ref,
    conv_output_size,
    dense_ref,
    gap_ref,
    gather_spatial,
    maxpool2d_ref,
    pointwise_ref,
)
from .transform import shuffle, unshuffle

__all__ = [
    "Conv2d",
    "MaxPool2d",
    "Relu",
    "Affine",
    "ResidualAdd",
    "GlobalAvgPool",
    "Flatten",
    "Dense",
    "Layer",
    "ModelSpec",
    "KeyedModel",
    "EquivalenceReport",
    "plain_forward",
    "keyed_compile",
    "keyed_forward",
    "equivalence_report",
    "verify_equivalence",
    "divergence_score",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class Conv2d:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    @property
    def params(self) -> ConvParams:
        oc, ic, n, _ = self.weight.dims
        return ConvParams(
            kernel=n, stride=self.stride, padding=self.padding,
            in_channels=ic, out_channels=oc,
        )


@dataclass(frozen=True)
class MaxPool2d:
    window: int
    stride: int
    padding: int = 0

    @property
    def params(self) -> PoolParams:
        return PoolParams(window=self.window, stride=self.stride, padding=self.padding)


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Affine:
    """Per-channel scale and shift (inference-time form of batch norm)."""

    scale: Tensor
    shift: Tensor


@dataclass(frozen=True)
class ResidualAdd:
    """Elementwise add of the output of an earlier layer (by index)."""

    source: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    weight: Tensor
    bias: Tensor


Layer = Union[
    Conv2d, MaxPool2d, Relu, Affine, ResidualAdd, GlobalAvgPool, Flatten, Dense
]

_SPATIAL = (Conv2d, MaxPool2d)
_HEAD = (GlobalAvgPool, Flatten)


class ModelSpec:
    """Validated layer graph. ``layer_dims[i]`` holds layer i's output dims."""

    __slots__ = ("input_dims", "layers", "layer_dims")

    def __init__(self, input_dims, layers) -> None:
        dims = tuple(int(d) for d in input_dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ShapeError(f"input_dims must be three positive extents, got {dims}")
        self.input_dims = dims
        self.layers = tuple(layers)
        self.layer_dims = self._validate()

    def _validate(self) -> tuple[tuple[int, ...], ...]:
        cur = self.input_dims
        out: list[tuple[int, ...]] = []
        head_seen = False
        for idx, layer in enumerate(self.layers):
            try:
                if isinstance(layer, _SPATIAL) and head_seen:
                    raise ShapeError(
                        "spatial layer after global_avg_pool/flatten"
                    )
                if isinstance(layer, _HEAD):
                    if head_seen:
                        raise ShapeError(
                            "at most one of global_avg_pool/flatten is allowed"
                        )
                    head_seen = True
                cur = _layer_output_dims(layer, cur, out)
            except KeyedConvError as exc:
                raise type(exc)(f"layer {idx}: {exc}") from None
            out.append(cur)
        return tuple(out)

    def dims_before(self, idx: int) -> tuple[int, ...]:
        return self.input_dims if idx == 0 else self.layer_dims[idx - 1]


def _layer_output_dims(layer, cur, previous) -> tuple[int, ...]:
    if isinstance(layer, Conv2d):
        p = layer.params
        if len(cur) != 3:
            raise ShapeError(f"conv2d needs a rank-3 input, got dims {cur}")
        if cur[0] != p.in_channels:
            raise ShapeError(
                f"conv2d expects {p.in_channels} input channels, input has {cur[0]}"
            )
        if layer.bias.dims != (p.out_channels,):
            raise ShapeError(
                f"conv2d bias dims {layer.bias.dims} do not match "
                f"out_channels {p.out_channels}"
            )
        if layer.weight.dims[2] != layer.weight.dims[3]:
            raise ShapeError(f"conv2d kernel must be square, got {layer.weight.dims}")
        oh = conv_output_size(cur[1], p.kernel, p.stride, p.padding)
        ow = conv_output_size(cur[2], p.kernel, p.stride, p.padding)
        return (p.out_channels, oh, ow)
    if isinstance(layer, MaxPool2d):
        p = layer.params
        if len(cur) != 3:
            raise ShapeError(f"maxpool2d needs a rank-3 input, got dims {cur}")
        oh = conv_output_size(cur[1], p.window, p.stride, p.padding)
        ow = conv_output_size(cur[2], p.window, p.stride, p.padding)
        return (cur[0], oh, ow)
    if isinstance(layer, Relu):
        return cur
    if isinstance(layer, Affine):
        want = (cur[0],)
        if layer.scale.dims != want or layer.shift.dims != want:
            raise ShapeError(
                f"affine scale/shift must have dims {want}, got "
                f"{layer.scale.dims} and {layer.shift.dims}"
            )
        return cur
    if isinstance(layer, ResidualAdd):
        src = layer.source
        if not (0 <= src < len(previous)):
            raise ShapeError(f"residual_add source {src} is not an earlier layer")
        if previous[src] != cur:
            raise ShapeError(
                f"residual_add source dims {previous[src]} do not match "
                f"current dims {cur}"
            )
        return cur
    if isinstance(layer, GlobalAvgPool):
        if len(cur) != 3:
            raise ShapeError(f"global_avg_pool needs a rank-3 input, got dims {cur}")
        return (cur[0],)
    if isinstance(layer, Flatten):
        if len(cur) != 3:
            raise ShapeError(f"flatten needs a rank-3 input, got dims {cur}")
        return (cur[0] * cur[1] * cur[2],)
    if isinstance(layer, Dense):
        if len(cur) != 1:
            raise ShapeError(f"dense needs a rank-1 input, got dims {cur}")
        k, d = layer.weight.dims
        if d != cur[0]:
            raise ShapeError(f"dense weight expects {d} inputs, input has {cur[0]}")
        if layer.bias.dims != (k,):
            raise ShapeError(f"dense bias dims {layer.bias.dims} do not match ({k},)")
        return (k,)
    raise ParameterError(f"unknown layer type {type(layer).__name__}")


@dataclass
class KeyedModel:
    """Compiled keyed network. Weight tensors are the plain model's, shared."""

    spec: ModelSpec
    chain: KeyChain
    offsets: dict[int, OffsetVolume]
    final_unshuffle: Optional[PermKey]
    acquisition_key_grid: tuple[int, int]

    def layer_keys(self) -> list[Optional[PermKey]]:
        """Key under which each layer's output lives; None once rank drops to 1."""
        keys: list[Optional[PermKey]] = []
        cursor = 0
        kappa = self.chain.entries[0]
        for idx, layer in enumerate(self.spec.layers):
            if isinstance(layer, _SPATIAL):
                cursor += 1
                kappa = self.chain.entries[cursor]
            keys.append(kappa if len(self.spec.layer_dims[idx]) == 3 else None)
        return keys


@dataclass
class EquivalenceReport:
    bitwise_equal: bool
    max_abs_diff: float
    relative_l2: float
    per_layer_diffs: list[tuple[int, float]] = field(default_factory=list)
    argmax_equal: Optional[bool] = None


def _check_input(dims: tuple[int, ...], input: Tensor, what: str) -> None:
    if input.dims != dims:
        raise ShapeError(f"{what} dims {input.dims} do not match model input {dims}")


def _residual_add(x: Tensor, skip: Tensor) -> Tensor:
    return Tensor(x.array + skip.array)


def _flatten(x: Tensor) -> Tensor:
    return Tensor(x.array.reshape(-1))


def plain_forward(model: ModelSpec, input: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Reference evaluation; returns the output and every layer's activation."""
    _check_input(model.input_dims, input, "input")
    x = input
    inters: list[Tensor] = []
    for layer in model.layers:
        if isinstance(layer, Conv2d):
            x = conv2d_ref(x, layer.weight, layer.bias, layer.stride, layer.padding)
        elif isinstance(layer, MaxPool2d):
            x = maxpool2d_ref(x, layer.window, layer.stride, layer.padding)
        elif isinstance(layer, Relu):
            x = pointwise_ref(x, "relu")
        elif isinstance(layer, Affine):
            x = pointwise_ref(x, "affine", layer.scale, layer.shift)
        elif isinstance(layer, ResidualAdd):
            x = _residual_add(x, inters[layer.source])
        elif isinstance(layer, GlobalAvgPool):
            x = gap_ref(x)
        elif isinstance(layer, Flatten):
            x = _flatten(x)
        else:
            x = dense_ref(x, layer.weight, layer.bias)
        inters.append(x)
    return x, inters


def _forced_spatial_keys(model: ModelSpec) -> dict[int, list[int]]:
    """Map spatial layer index -> skip sources whose key it must adopt.

    For a residual_add at r with source s, the key in effect at r must equal
    the key after s; the last conv/pool strictly between them is the one place
    the chain can be steered. With no spatial layer in between the keys agree
    automatically (pointwise layers never change the key).
    """
    forced: dict[int, list[int]] = {}
    for r, layer in enumerate(model.layers):
        if not isinstance(layer, ResidualAdd):
            continue
        between = [
            i for i in range(layer.source + 1, r)
            if isinstance(model.layers[i], _SPATIAL)
        ]
        if between:
            forced.setdefault(between[-1], []).append(layer.source)
    return forced


def keyed_compile(
    model: ModelSpec,
    acquisition_key: PermKey,
    session_seed: int,
    layer_key_fn: Optional[Callable[[int, tuple[int, int]], PermKey]] = None,
) -> KeyedModel:
    """Compile a plain model against the key its inputs are shuffled with.

    Walks the layer list carrying the current key. Each conv/pool draws the
    key its output will live under (seeded from session_seed XOR the layer
    index, unless residual reconciliation forces it) and gets an offset volume
    derived from the in/out key pair. Before flatten or global_avg_pool the
    current key is recorded as final_unshuffle and the walk continues under
    the identity. ``layer_key_fn`` overrides key drawing; it exists for tests.
    """
    if not (0 <= int(session_seed) <= _MASK64):
        raise ParameterError("session_seed must be an unsigned 64-bit integer")
    session_seed = int(session_seed)
    c, h, w = model.input_dims
    if acquisition_key.grid != (h, w):
        raise ShapeError(
            f"acquisition key grid {acquisition_key.height}x{acquisition_key.width} "
            f"does not match model input {h}x{w}"
        )

    forced = _forced_spatial_keys(model)
    kappa = acquisition_key
    entries = [kappa]
    key_after: list[Optional[PermKey]] = []  # key of each layer's output
    offsets: dict[int, OffsetVolume] = {}
    final_unshuffle: Optional[PermKey] = None

    for idx, layer in enumerate(model.layers):
        if isinstance(layer, _SPATIAL):
            _, oh, ow = model.layer_dims[idx]
            if idx in forced:
                candidates = [key_after[s] for s in forced[idx]]
                nxt = candidates[0]
                if any(k != nxt for k in candidates[1:]):
                    raise IntegrityError(
                        f"layer {idx}: residual reconciliation demands two "
                        f"different keys"
                    )
                if nxt is None or nxt.grid != (oh, ow):
                    raise IntegrityError(
                        f"layer {idx}: residual reconciliation impossible, skip "
                        f"source key grid does not match output {oh}x{ow}"
                    )
            elif layer_key_fn is not None:
                nxt = layer_key_fn(idx, (oh, ow))
                if nxt.grid != (oh, ow):
                    raise ShapeError(
                        f"layer {idx}: layer_key_fn returned grid {nxt.grid}, "
                        f"expected {(oh, ow)}"
                    )
            else:
                nxt = derive_layer_key(session_seed, idx, oh, ow)
            if isinstance(layer, Conv2d):
                offsets[idx] = derive_conv_offsets(kappa, nxt, layer.params)
            else:
                offsets[idx] = derive_pool_offsets(kappa, nxt, layer.params)
            kappa = nxt
            entries.append(kappa)
        elif isinstance(layer, _HEAD):
            final_unshuffle = kappa
            kappa = identity_key(*kappa.grid)
        elif isinstance(layer, ResidualAdd):
            if len(model.layer_dims[idx]) == 3 and key_after[layer.source] != kappa:
                raise IntegrityError(
                    f"layer {idx}: residual skip and main branch carry "
                    f"different keys"
                )
        key_after.append(kappa if len(model.layer_dims[idx]) == 3 else None)

    return KeyedModel(
        spec=model,
        chain=KeyChain(entries, session_seed),
        offsets=offsets,
        final_unshuffle=final_unshuffle,
        acquisition_key_grid=(h, w),
    )


def keyed_forward(keyed: KeyedModel, shuffled_input: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Evaluate the keyed network on an input shuffled under the acquisition key."""
    model = keyed.spec
    _check_input(model.input_dims, shuffled_input, "shuffled input")
    x = shuffled_input
    inters: list[Tensor] = []
    for idx, layer in enumerate(model.layers):
        if isinstance(layer, Conv2d):
            x = deform_conv2d(x, layer.weight, layer.bias, keyed.offsets[idx], layer.params)
        elif isinstance(layer, MaxPool2d):
            x = deform_maxpool2d(x, keyed.offsets[idx], layer.params)
        elif isinstance(layer, Relu):
            x = pointwise_ref(x, "relu")
        elif isinstance(layer, Affine):
            x = pointwise_ref(x, "affine", layer.scale, layer.shift)
        elif isinstance(layer, ResidualAdd):
            x = _residual_add(x, inters[layer.source])
        elif isinstance(layer, GlobalAvgPool):
            x = gap_ref(_final_gather(keyed, x))
        elif isinstance(layer, Flatten):
            x = _flatten(_final_gather(keyed, x))
        else:
            x = dense_ref(x, layer.weight, layer.bias)
        inters.append(x)
    return x, inters


def _final_gather(keyed: KeyedModel, x: Tensor) -> Tensor:
    if keyed.final_unshuffle is None:
        return x
    return gather_spatial(x, invert_key(keyed.final_unshuffle))


def _aligned(keyed_value: Tensor, key: Optional[PermKey]) -> Tensor:
    """Bring a keyed activation back to plain layout for comparison."""
    if key is None or key.is_identity:
        return keyed_value
    return unshuffle(keyed_value, key)


def _max_abs_diff(a: Tensor, b: Tensor) -> float:
    d = np.abs(a.array.astype(np.float64) - b.array.astype(np.float64))
    return float(d.max()) if d.size else 0.0


def _relative_l2(keyed_value: Tensor, plain_value: Tensor) -> float:
    d = keyed_value.array.astype(np.float64) - plain_value.array.astype(np.float64)
    num = float(np.linalg.norm(d.reshape(-1)))
    den = float(np.linalg.norm(plain_value.array.astype(np.float64).reshape(-1)))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def equivalence_report(
    keyed: KeyedModel, input: Tensor, encrypt_key: Optional[PermKey] = None
) -> EquivalenceReport:
    """Compare plain and keyed evaluation of one input.

    The keyed path sees shuffle(input, acquisition key). Keyed intermediates
    are unshuffled by the key they live under before differencing, so a zero
    diff means the layer is exactly reproduced, not merely permuted.
    ``encrypt_key`` substitutes a different (wrong) key at the camera side;
    the compiled model is left alone.
    """
    model = keyed.spec
    plain_out, plain_inters = plain_forward(model, input)
    acq = keyed.chain.entries[0] if encrypt_key is None else encrypt_key
    keyed_out, keyed_inters = keyed_forward(keyed, shuffle(input, acq))
    live = keyed.layer_keys()

    per_layer: list[tuple[int, float]] = []
    for idx in range(len(model.layers)):
        aligned = _aligned(keyed_inters[idx], live[idx])
        per_layer.append((idx, _max_abs_diff(aligned, plain_inters[idx])))

    final_key = live[-1] if model.layers else acq
    aligned_out = _aligned(keyed_out, final_key)
    equal = bitwise_equal(aligned_out, plain_out)
    argmax_equal = None
    if plain_out.rank == 1:
        argmax_equal = int(np.argmax(plain_out.array)) == int(np.argmax(aligned_out.array))
    return EquivalenceReport(
        bitwise_equal=equal,
        max_abs_diff=_max_abs_diff(aligned_out, plain_out),
        relative_l2=_relative_l2(aligned_out, plain_out),
        per_layer_diffs=per_layer,
        argmax_equal=argmax_equal,
    )


def verify_equivalence(
    model: ModelSpec, acquisition_key: PermKey, session_seed: int, input: Tensor
) -> EquivalenceReport:
    keyed = keyed_compile(model, acquisition_key, session_seed)
    return equivalence_report(keyed, input)


def divergence_score(
    model: ModelSpec,
    true_key: PermKey,
    wrong_key: PermKey,
    session_seed: int,
    inputs: list[Tensor],
) -> tuple[float, float]:
    """Feed inputs shuffled under the WRONG key through a model compiled for
    the true key; returns (mean relative L2 vs plain, argmax agreement rate)."""
    if wrong_key.grid != true_key.grid:
        raise ShapeError(
            f"wrong key grid {wrong_key.grid} does not match true key grid "
            f"{true_key.grid}"
        )
    if not inputs:
        raise ParameterError("divergence_score needs at least one input")
    keyed = keyed_compile(model, true_key, session_seed)
    live = keyed.layer_keys()
    final_key = live[-1] if model.layers else true_key

    total = 0.0
    agree = 0
    for x in inputs:
        plain_out, _ = plain_forward(model, x)
        keyed_out, _ = keyed_forward(keyed, shuffle(x, wrong_key))
        aligned = _aligned(keyed_out, final_key)
        total += _relative_l2(aligned, plain_out)
        if int(np.argmax(plain_out.array)) == int(np.argmax(aligned.array)):
            agree += 1
    return total / len(inputs), agree / len(inputs)
