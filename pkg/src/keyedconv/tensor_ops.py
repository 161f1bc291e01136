"""Dense float32 tensors and the plain reference operators.

Everything here is single precision and order-pinned: a reduction is not "a
sum", it is *this* sum in *this* order. The contract for every accumulating
operator is: start from the bias (or zero, or the first element), then fold in
terms with channels ascending on the outside and kernel taps row-major on the
inside. The deformable operators reproduce these orders exactly, which is what
makes bitwise output equality possible at all.

numpy's own reductions (``np.sum``, ``ndarray.max``) use pairwise/blocked
evaluation, so the order-sensitive loops below are written as explicit
per-term updates over vectorized element arrays. Elementwise numpy arithmetic
is IEEE single precision per element with no reassociation, so these loops are
bit-identical to a scalar implementation while staying fast.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = [
    "Tensor",
    "bitwise_equal",
    "conv_output_size",
    "conv2d_ref",
    "maxpool2d_ref",
    "pointwise_ref",
    "gap_ref",
    "dense_ref",
    "gather_spatial",
]

_F32 = np.float32


class Tensor:
    """Dense row-major float32 array of rank 1..4.

    Layouts used by the package: C,H,W for images and feature maps;
    Cout,Cin,n,n for convolution weights; K,D for dense weights; C for
    per-channel vectors. The wrapped array is made read-only; build a new
    Tensor instead of mutating.
    """

    __slots__ = ("array",)

    def __init__(self, array) -> None:
        # asarray first: ascontiguousarray silently promotes rank 0 to rank 1
        if np.asarray(array).ndim < 1:
            raise ShapeError("tensor rank must be 1..4, got 0")
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ParameterError("tensor values must be finite (no NaN/Inf)")
        arr.flags.writeable = False
        self.array = arr

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def rank(self) -> int:
        return self.array.ndim

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims})"


def bitwise_equal(a: Tensor, b: Tensor) -> bool:
    """True when both tensors have equal dims and identical value bits.

    Stricter than numeric equality: distinguishes -0.0 from +0.0.
    """
    if a.dims != b.dims:
        return False
    return bool(np.array_equal(a.array.view(np.uint32), b.array.view(np.uint32)))


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    """Output extent of a conv/pool axis; raises if the result would be empty."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ParameterError(
            f"kernel/stride must be >= 1 and padding >= 0, got kernel={kernel} "
            f"stride={stride} padding={padding}"
        )
    if padding >= kernel:
        raise ParameterError(f"padding ({padding}) must be < kernel ({kernel})")
    span = extent + 2 * padding - kernel
    if span < 0:
        raise ParameterError(
            f"window {kernel} does not fit extent {extent} with padding {padding}"
        )
    return span // stride + 1


def _check_rank(t: Tensor, rank: int, what: str) -> None:
    if t.rank != rank:
        raise ShapeError(f"{what} must have rank {rank}, got dims {t.dims}")


def _patch_matrix(padded: np.ndarray, n: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Sampled taps as (C*n*n, out_h*out_w), k = c*n*n + a*n + b (contract order)."""
    ii = (np.arange(out_h) * stride)[:, None] + np.arange(n)[None, :]  # (out_h, n)
    jj = (np.arange(out_w) * stride)[:, None] + np.arange(n)[None, :]  # (out_w, n)
    # index result: (C, out_h, n, out_w, n) -> (C, n, n, out_h, out_w)
    patches = padded[:, ii[:, :, None, None], jj[None, None, :, :]]
    patches = patches.transpose(0, 2, 4, 1, 3)
    c = padded.shape[0]
    return np.ascontiguousarray(patches).reshape(c * n * n, out_h * out_w)


def _accumulate_conv(w_mat: np.ndarray, taps: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out[o,p] = bias[o] + sum_k w_mat[o,k]*taps[k,p], folded strictly k-ascending.

    Each step is one f32 multiply and one f32 add per output element, matching
    the scalar contract bit for bit.
    """
    out = np.empty((w_mat.shape[0], taps.shape[1]), dtype=np.float32)
    out[:] = bias[:, None]
    for k in range(w_mat.shape[1]):
        out += w_mat[:, k : k + 1] * taps[k][None, :]
    return out


def _first_wins_max(taps: np.ndarray) -> np.ndarray:
    """Max over axis 0 keeping the first maximal element (strict-greater replaces)."""
    acc = taps[0].copy()
    for k in range(1, taps.shape[0]):
        t = taps[k]
        np.copyto(acc, t, where=t > acc)
    return acc


def conv2d_ref(
    input: Tensor, weights: Tensor, bias: Tensor, stride: int, padding: int
) -> Tensor:
    """Plain 2-D convolution (cross-correlation) with zero padding.

    out[o,i,j] = bias[o] + sum over c ascending, taps (a,b) row-major of
    weights[o,c,a,b] * input[c, i*stride-padding+a, j*stride-padding+b],
    reading 0.0 outside the input. The accumulation order is a contract.
    """
    _check_rank(input, 3, "conv input")
    _check_rank(weights, 4, "conv weights")
    _check_rank(bias, 1, "conv bias")
    c_in, h, w = input.dims
    c_out, wc_in, n, n2 = weights.dims
    if n != n2:
        raise ShapeError(f"conv kernel must be square, got {n}x{n2}")
    if wc_in != c_in:
        raise ShapeError(
            f"weights expect {wc_in} input channels, input has {c_in}"
        )
    if bias.dims != (c_out,):
        raise ShapeError(f"bias must have dims ({c_out},), got {bias.dims}")
    out_h = conv_output_size(h, n, stride, padding)
    out_w = conv_output_size(w, n, stride, padding)

    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding), dtype=np.float32)
    padded[:, padding : padding + h, padding : padding + w] = input.array
    taps = _patch_matrix(padded, n, stride, out_h, out_w)
    w_mat = weights.array.reshape(c_out, c_in * n * n)
    out = _accumulate_conv(w_mat, taps, bias.array)
    return Tensor(out.reshape(c_out, out_h, out_w))


def maxpool2d_ref(input: Tensor, window: int, stride: int, padding: int) -> Tensor:
    """Plain max pooling; out-of-bounds taps act as -inf (never selected).

    Ties keep the first maximal tap in row-major order, which pins the result
    bits when +0.0 and -0.0 compete.
    """
    _check_rank(input, 3, "pool input")
    c, h, w = input.dims
    out_h = conv_output_size(h, window, stride, padding)
    out_w = conv_output_size(w, window, stride, padding)

    padded = np.full((c, h + 2 * padding, w + 2 * padding), -np.inf, dtype=np.float32)
    padded[:, padding : padding + h, padding : padding + w] = input.array
    taps = _patch_matrix(padded, window, stride, out_h, out_w)
    taps = taps.reshape(c, window * window, out_h * out_w)
    best = np.empty((c, out_h * out_w), dtype=np.float32)
    for ch in range(c):
        best[ch] = _first_wins_max(taps[ch])
    return Tensor(best.reshape(c, out_h, out_w))


def pointwise_ref(
    input: Tensor,
    kind: str,
    scale: Tensor | None = None,
    shift: Tensor | None = None,
) -> Tensor:
    """Elementwise relu or per-channel affine (scale[c]*x + shift[c]).

    Never reads spatial position, so it commutes bitwise with any spatial
    gather. Accepts rank-1 inputs as degenerate single-pixel channel stacks.
    """
    if kind == "relu":
        return Tensor(np.maximum(input.array, _F32(0.0)))
    if kind == "affine":
        if scale is None or shift is None:
            raise ParameterError("affine requires both scale and shift")
        _check_rank(scale, 1, "affine scale")
        _check_rank(shift, 1, "affine shift")
        c = input.dims[0]
        if scale.dims != (c,) or shift.dims != (c,):
            raise ShapeError(
                f"affine scale/shift must have dims ({c},), got "
                f"{scale.dims} and {shift.dims}"
            )
        bshape = (c,) + (1,) * (input.rank - 1)
        return Tensor(
            scale.array.reshape(bshape) * input.array + shift.array.reshape(bshape)
        )
    raise ParameterError(f"unknown pointwise kind {kind!r}")


def gap_ref(input: Tensor) -> Tensor:
    """Global average pool: per-channel mean, pixels summed in row-major order."""
    _check_rank(input, 3, "gap input")
    c, h, w = input.dims
    flat = input.array.reshape(c, h * w)
    acc = np.zeros(c, dtype=np.float32)
    for p in range(h * w):  # sequential: summation order is a contract
        acc += flat[:, p]
    return Tensor(acc / _F32(h * w))


def dense_ref(input: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: out[k] = bias[k] + sum_d (d ascending) w[k,d]*x[d]."""
    _check_rank(input, 1, "dense input")
    _check_rank(weights, 2, "dense weights")
    _check_rank(bias, 1, "dense bias")
    k, d = weights.dims
    if input.dims != (d,):
        raise ShapeError(f"dense weights expect input of dims ({d},), got {input.dims}")
    if bias.dims != (k,):
        raise ShapeError(f"dense bias must have dims ({k},), got {bias.dims}")
    acc = bias.array.copy()
    x = input.array
    w = weights.array
    for j in range(d):  # sequential: summation order is a contract
        acc += w[:, j] * x[j]
    return Tensor(acc)


def gather_spatial(input: Tensor, key) -> Tensor:
    """Permute pixels of every channel by the key: out[c,q] = in[c, key.map[q]].

    Pure data movement, no arithmetic; bit patterns are preserved.
    """
    _check_rank(input, 3, "gather input")
    c, h, w = input.dims
    if (key.height, key.width) != (h, w):
        raise ShapeError(
            f"key grid {key.height}x{key.width} does not match image grid {h}x{w}"
        )
    flat = input.array.reshape(c, h * w)
    return Tensor(flat[:, key.map].reshape(c, h, w))
