"""Random model construction shared by the model and acceptance tests."""

import numpy as np

from keyedconv import (
    Affine,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    ModelSpec,
    Relu,
    ResidualAdd,
    Tensor,
    conv_output_size,
)


def rand_tensor(rng, *dims, scale=1.0):
    return Tensor((rng.standard_normal(dims) * scale).astype(np.float32))


def rand_image(rng, dims):
    return Tensor(rng.standard_normal(dims).astype(np.float32))


def conv_layer(rng, c_in, c_out, kernel, stride=1, padding=0):
    return Conv2d(
        weight=rand_tensor(rng, c_out, c_in, kernel, kernel, scale=0.5),
        bias=rand_tensor(rng, c_out, scale=0.1),
        stride=stride,
        padding=padding,
    )


def dense_layer(rng, d_in, d_out):
    return Dense(
        weight=rand_tensor(rng, d_out, d_in, scale=0.5),
        bias=rand_tensor(rng, d_out, scale=0.1),
    )


def random_model(rng, with_residual=False, head="auto", classes=10):
    """Random small network: a few conv/pool stages, optional residual block,
    optional classification head. The first stage always has a kernel >= 2
    conv so the network is never permutation-invariant.

    head: "gap", "flatten", "none", or "auto" (random pick of the three).
    """
    c = int(rng.integers(1, 4))
    h = int(rng.integers(7, 14))
    w = int(rng.integers(7, 14))
    input_dims = (c, h, w)
    layers = []
    dims = input_dims

    def add_conv(kernel, stride, padding, c_out):
        nonlocal dims
        layers.append(conv_layer(rng, dims[0], c_out, kernel, stride, padding))
        dims = (
            c_out,
            conv_output_size(dims[1], kernel, stride, padding),
            conv_output_size(dims[2], kernel, stride, padding),
        )

    kernel = int(rng.choice([2, 3]))
    add_conv(kernel, int(rng.choice([1, 2])), int(rng.integers(0, min(kernel, 2))),
             int(rng.integers(1, 5)))

    for _ in range(int(rng.integers(0, 3))):
        roll = rng.random()
        if roll < 0.3 and min(dims[1], dims[2]) >= 2:
            layers.append(MaxPool2d(window=2, stride=2, padding=0))
            dims = (dims[0], conv_output_size(dims[1], 2, 2, 0),
                    conv_output_size(dims[2], 2, 2, 0))
        elif roll < 0.55:
            layers.append(Relu())
        elif roll < 0.7:
            layers.append(Affine(scale=rand_tensor(rng, dims[0]),
                                 shift=rand_tensor(rng, dims[0])))
        else:
            k = int(rng.choice([1, 2, 3]))
            if min(dims[1], dims[2]) >= k:
                add_conv(k, 1, int(rng.integers(0, min(k, 2))), int(rng.integers(1, 5)))

    if with_residual:
        anchor = len(layers) - 1
        c0 = dims[0]
        add_conv(3, 1, 1, c0)
        layers.append(Relu())
        add_conv(3, 1, 1, c0)
        layers.append(ResidualAdd(source=anchor))

    if head == "auto":
        head = ["gap", "flatten", "none"][int(rng.integers(0, 3))]
    if head == "gap":
        layers.append(GlobalAvgPool())
        layers.append(dense_layer(rng, dims[0], classes))
    elif head == "flatten":
        layers.append(Flatten())
        layers.append(dense_layer(rng, dims[0] * dims[1] * dims[2], classes))

    return ModelSpec(input_dims, layers)


def fault_probe_model(rng, depth=2):
    """Conv-only, padding-0 model for fault injection: no relu or pool that
    could swallow a perturbed tap, and no padding so no sentinel taps exist
    (a sentinel nudged by +1 can stay out of bounds and hide the fault)."""
    c = int(rng.integers(1, 3))
    h = int(rng.integers(8, 12))
    w = int(rng.integers(8, 12))
    input_dims = (c, h, w)
    layers = []
    dims = input_dims
    for _ in range(depth):
        kernel = int(rng.choice([2, 3]))
        c_out = int(rng.integers(1, 4))
        layers.append(conv_layer(rng, dims[0], c_out, kernel, 1, 0))
        dims = (
            c_out,
            conv_output_size(dims[1], kernel, 1, 0),
            conv_output_size(dims[2], kernel, 1, 0),
        )
    return ModelSpec(input_dims, layers)


def access_probe_model(rng, head):
    """Discriminative model for wrong-key divergence trials.

    Two constraints keep the trials meaningful. Padding stays 0: a conv whose
    taps sweep the whole input grid feeds GAP a permutation-invariant mean,
    so such a model cannot distinguish keys at all. And relu never sits
    directly before the head: with nonnegative inputs a negative-leaning
    channel saturates to zero everywhere under every key, and a model whose
    features all die computes a constant.
    """
    c = int(rng.integers(1, 4))
    h = int(rng.integers(9, 15))
    w = int(rng.integers(9, 15))
    input_dims = (c, h, w)
    layers = []
    dims = input_dims

    def add_conv(kernel, c_out):
        nonlocal dims
        layers.append(conv_layer(rng, dims[0], c_out, kernel, 1, 0))
        dims = (c_out, conv_output_size(dims[1], kernel, 1, 0),
                conv_output_size(dims[2], kernel, 1, 0))

    add_conv(int(rng.choice([2, 3])), int(rng.integers(2, 5)))
    layers.append(Relu())
    if rng.random() < 0.5:
        layers.append(MaxPool2d(window=2, stride=2, padding=0))
        dims = (dims[0], conv_output_size(dims[1], 2, 2, 0),
                conv_output_size(dims[2], 2, 2, 0))
    add_conv(int(rng.choice([2, 3])), int(rng.integers(2, 5)))

    if head == "gap":
        layers.append(GlobalAvgPool())
        layers.append(dense_layer(rng, dims[0], 10))
    else:
        layers.append(Flatten())
        layers.append(dense_layer(rng, dims[0] * dims[1] * dims[2], 10))
    return ModelSpec(input_dims, layers)
