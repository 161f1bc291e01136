"""Deformable convolution and max pooling driven by key-derived offsets.

The idea: a plain operator at output (i, j) samples a rigid base grid
B = (i*stride - padding + a, j*stride - padding + b) over taps (a, b). When
the input has been pixel-shuffled with key k_in and we want the output pixels
laid out according to key k_out, each tap can be redirected by an integer
displacement so that it lands exactly on the pixel the plain operator would
have read:

    true output position   (u, v)  = k_out(i, j)
    plain sample target    T       = (u*stride - padding + a, v*stride - padding + b)
    sample in shuffled map S       = invert(k_in)(T)          if T is in bounds
                                     (-1, -1)                  otherwise
    stored offset          delta   = S - B

The sentinel (-1, -1) is out of bounds for every input, so a sentinel tap
reproduces zero padding (convolution) or -inf padding (max pooling) exactly.
All offsets are integral by construction, which lets the sampler short-circuit
to a pure gather: no interpolation arithmetic touches the carried values, and
the accumulation contracts of the plain operators then force bitwise-equal
results.

Offset layout contract: values has shape (out_h, out_w, 2*n*n); for tap (a, b)
the row/col displacement pair lives at t = 2*(a*n + b) (delta-y) and t+1
(delta-x), taps row-major. One offset pair per output position and tap, shared
across channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .keys import PermKey, invert_key
from .tensor_ops import (
    Tensor,
    _accumulate_conv,
    _first_wins_max,
    conv_output_size,
)

__all__ = [
    "ConvParams",
    "PoolParams",
    "OffsetVolume",
    "bilinear_sample",
    "derive_conv_offsets",
    "derive_pool_offsets",
    "deform_conv2d",
    "deform_maxpool2d",
]


@dataclass(frozen=True)
class ConvParams:
    """Geometry of a convolution layer; padding must stay below the kernel size."""

    kernel: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    def __post_init__(self) -> None:
        _check_geometry(self.kernel, self.stride, self.padding)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")


@dataclass(frozen=True)
class PoolParams:
    """Geometry of a max-pooling layer."""

    window: int
    stride: int
    padding: int

    def __post_init__(self) -> None:
        _check_geometry(self.window, self.stride, self.padding)


def _check_geometry(kernel: int, stride: int, padding: int) -> None:
    if kernel < 1:
        raise ParameterError(f"kernel/window must be >= 1, got {kernel}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0 or padding >= kernel:
        raise ParameterError(
            f"padding must satisfy 0 <= padding < kernel, got padding={padding} "
            f"kernel={kernel}"
        )


class OffsetVolume:
    """Per-output-position, per-tap displacements, shape (out_h, out_w, 2*n*n).

    Entries are stored as float32 but must be exactly integral; construction
    rejects anything else so the samplers can rely on gather-only access.
    """

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        arr = np.ascontiguousarray(values, dtype=np.float32)
        if arr.ndim != 3:
            raise ShapeError(f"offset volume must have rank 3, got dims {arr.shape}")
        pairs = arr.shape[2]
        if pairs % 2 != 0:
            raise ShapeError(f"last extent must be 2*n*n, got {pairs}")
        n = math.isqrt(pairs // 2)
        if 2 * n * n != pairs:
            raise ShapeError(f"last extent {pairs} is not 2*n*n for integer n")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("offsets must be finite")
        if not np.all(arr == np.floor(arr)):
            raise ParameterError("offsets must be integral (fractional part 0)")
        arr.flags.writeable = False
        self.values = arr

    @property
    def out_height(self) -> int:
        return self.values.shape[0]

    @property
    def out_width(self) -> int:
        return self.values.shape[1]

    @property
    def kernel(self) -> int:
        return math.isqrt(self.values.shape[2] // 2)

    def __repr__(self) -> str:
        return f"OffsetVolume(dims={self.values.shape})"


def bilinear_sample(channel: Tensor, y: float, x: float, oob: str = "zero") -> float:
    """Sample one channel at (y, x).

    Integral coordinates are a pure gather: the stored value (or the
    out-of-bounds fill) is returned with no arithmetic. Fractional
    coordinates use 4-neighbour bilinear interpolation in float32, with
    out-of-bounds neighbours contributing zero; that path is only legal in
    ``zero`` mode, because -inf has no interpolation identity.
    """
    if channel.rank != 2:
        raise ShapeError(f"bilinear_sample expects a rank-2 channel, got {channel.dims}")
    if oob not in ("zero", "neg_inf"):
        raise ParameterError(f"unknown out-of-bounds mode {oob!r}")
    y = float(y)
    x = float(x)
    if not (math.isfinite(y) and math.isfinite(x)):
        raise ParameterError("sample coordinates must be finite")
    h, w = channel.dims
    fill = 0.0 if oob == "zero" else -math.inf

    if y.is_integer() and x.is_integer():
        iy, ix = int(y), int(x)
        if 0 <= iy < h and 0 <= ix < w:
            return float(channel.array[iy, ix])
        return fill

    if oob == "neg_inf":
        raise ParameterError("neg_inf mode requires integral coordinates")

    y0 = math.floor(y)
    x0 = math.floor(x)
    wy1 = np.float32(y - y0)
    wx1 = np.float32(x - x0)
    wy0 = np.float32(1.0) - wy1
    wx0 = np.float32(1.0) - wx1
    acc = np.float32(0.0)
    for iy, wy in ((y0, wy0), (y0 + 1, wy1)):
        for ix, wx in ((x0, wx0), (x0 + 1, wx1)):
            if 0 <= iy < h and 0 <= ix < w:
                acc = acc + wy * wx * channel.array[iy, ix]
    return float(acc)


def _base_grid(out_h: int, out_w: int, kernel: int, stride: int, padding: int):
    """Base sample rows/cols per (tap, output position): shapes (n*n, out_h*out_w)."""
    i = np.repeat(np.arange(out_h, dtype=np.int64), out_w)
    j = np.tile(np.arange(out_w, dtype=np.int64), out_h)
    a = np.repeat(np.arange(kernel, dtype=np.int64), kernel)
    b = np.tile(np.arange(kernel, dtype=np.int64), kernel)
    base_y = i[None, :] * stride - padding + a[:, None]
    base_x = j[None, :] * stride - padding + b[:, None]
    return base_y, base_x


def _derive_offsets(
    key_in: PermKey,
    key_out: PermKey,
    kernel: int,
    stride: int,
    padding: int,
    require_live_window: bool,
) -> OffsetVolume:
    h, w = key_in.grid
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    if key_out.grid != (out_h, out_w):
        raise ShapeError(
            f"output key grid {key_out.height}x{key_out.width} does not match the "
            f"operator output {out_h}x{out_w}"
        )

    inv_in = invert_key(key_in)
    # True (plain) output positions for each shuffled output position.
    u, v = np.divmod(key_out.map, out_w)
    a = np.repeat(np.arange(kernel, dtype=np.int64), kernel)
    b = np.tile(np.arange(kernel, dtype=np.int64), kernel)
    target_y = u[None, :] * stride - padding + a[:, None]  # (n*n, out_h*out_w)
    target_x = v[None, :] * stride - padding + b[:, None]
    inside = (target_y >= 0) & (target_y < h) & (target_x >= 0) & (target_x < w)

    target_lin = np.where(inside, target_y * w + target_x, 0)
    src = inv_in.map[target_lin]  # shuffled position holding each plain target
    src_y = np.where(inside, src // w, -1)
    src_x = np.where(inside, src % w, -1)

    if require_live_window and not np.all(np.any(inside, axis=0)):
        raise ParameterError("an output window has no in-bounds tap")

    base_y, base_x = _base_grid(out_h, out_w, kernel, stride, padding)
    delta_y = src_y - base_y
    delta_x = src_x - base_x

    values = np.empty((out_h * out_w, kernel * kernel, 2), dtype=np.float32)
    values[:, :, 0] = delta_y.T
    values[:, :, 1] = delta_x.T
    return OffsetVolume(values.reshape(out_h, out_w, 2 * kernel * kernel))


def derive_conv_offsets(key_in: PermKey, key_out: PermKey, params: ConvParams) -> OffsetVolume:
    """Offsets that make a deformable convolution on a k_in-shuffled input
    produce the plain convolution result laid out under k_out."""
    return _derive_offsets(
        key_in, key_out, params.kernel, params.stride, params.padding,
        require_live_window=False,
    )


def derive_pool_offsets(key_in: PermKey, key_out: PermKey, params: PoolParams) -> OffsetVolume:
    """Pooling variant of derive_conv_offsets; sentinel taps pair with -inf
    sampling, and a window made entirely of sentinels is rejected."""
    return _derive_offsets(
        key_in, key_out, params.window, params.stride, params.padding,
        require_live_window=True,
    )


def _sampled_taps(
    input: Tensor, offsets: OffsetVolume, kernel: int, stride: int, padding: int,
    fill: float,
) -> np.ndarray:
    """Gather tap values at base+offset: (C, n*n, out_h*out_w), pure data movement."""
    c, h, w = input.dims
    out_h = conv_output_size(h, kernel, stride, padding)
    out_w = conv_output_size(w, kernel, stride, padding)
    if offsets.values.shape != (out_h, out_w, 2 * kernel * kernel):
        raise ShapeError(
            f"offset volume dims {offsets.values.shape} do not match operator "
            f"output {out_h}x{out_w} with {2 * kernel * kernel} components"
        )
    base_y, base_x = _base_grid(out_h, out_w, kernel, stride, padding)
    flat = offsets.values.reshape(out_h * out_w, kernel * kernel, 2)
    sample_y = base_y + flat[:, :, 0].T.astype(np.int64)
    sample_x = base_x + flat[:, :, 1].T.astype(np.int64)
    inside = (sample_y >= 0) & (sample_y < h) & (sample_x >= 0) & (sample_x < w)
    lin = np.where(inside, sample_y * w + sample_x, 0)
    vals = input.array.reshape(c, h * w)[:, lin]  # (C, n*n, out_h*out_w)
    vals = np.where(inside[None, :, :], vals, np.float32(fill))
    return vals


def deform_conv2d(
    input: Tensor,
    weights: Tensor,
    bias: Tensor,
    offsets: OffsetVolume,
    params: ConvParams,
) -> Tensor:
    """Convolution sampling at base-grid-plus-offset positions.

    Offsets are integral, so every tap is an exact gather (out of bounds reads
    0.0); the accumulation then matches conv2d_ref term for term: bias first,
    channels ascending, taps row-major.
    """
    if input.rank != 3:
        raise ShapeError(f"deform_conv2d input must have rank 3, got {input.dims}")
    c_in, h, w = input.dims
    if c_in != params.in_channels:
        raise ShapeError(
            f"input has {c_in} channels, params expect {params.in_channels}"
        )
    n = params.kernel
    if weights.dims != (params.out_channels, c_in, n, n):
        raise ShapeError(
            f"weights dims {weights.dims} do not match params "
            f"({params.out_channels},{c_in},{n},{n})"
        )
    if bias.dims != (params.out_channels,):
        raise ShapeError(f"bias must have dims ({params.out_channels},), got {bias.dims}")

    vals = _sampled_taps(input, offsets, n, params.stride, params.padding, fill=0.0)
    taps = vals.reshape(c_in * n * n, -1)  # k = c*n*n + a*n + b, contract order
    w_mat = weights.array.reshape(params.out_channels, c_in * n * n)
    out = _accumulate_conv(w_mat, taps, bias.array)
    return Tensor(out.reshape(params.out_channels, offsets.out_height, offsets.out_width))


def deform_maxpool2d(input: Tensor, offsets: OffsetVolume, params: PoolParams) -> Tensor:
    """Max pooling over base-grid-plus-offset taps.

    Sentinel taps sample -inf and are therefore never selected; ties keep the
    first maximal tap in row-major order, same as maxpool2d_ref.
    """
    if input.rank != 3:
        raise ShapeError(f"deform_maxpool2d input must have rank 3, got {input.dims}")
    c = input.dims[0]
    n = params.window
    vals = _sampled_taps(input, offsets, n, params.stride, params.padding, fill=-np.inf)
    best = np.empty((c, vals.shape[2]), dtype=np.float32)
    for ch in range(c):
        best[ch] = _first_wins_max(vals[ch])
    return Tensor(best.reshape(c, offsets.out_height, offsets.out_width))
