"""Bit-exact CNN inference on pixel-shuffled images.

Images are perceptually encrypted by a secret spatial permutation; inference
runs directly on the encrypted pixels by swapping every convolution and max
pooling for a deformable twin whose integer offsets are derived from the key.
With the right key the outputs match plain inference bit for bit; with a
wrong key they diverge.
"""

from .errors import (
    FormatError,
    IntegrityError,
    KeyedConvError,
    ParameterError,
    ShapeError,
)
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
from .keys import (
    KeyChain,
    PermKey,
    SplitMix64,
    derive_layer_key,
    generate_key,
    identity_key,
    invert_key,
)
from .transform import shuffle, unshuffle
from .deform import (
    ConvParams,
    OffsetVolume,
    PoolParams,
    bilinear_sample,
    deform_conv2d,
    deform_maxpool2d,
    derive_conv_offsets,
    derive_pool_offsets,
)
from .model import (
    Affine,
    Conv2d,
    Dense,
    EquivalenceReport,
    Flatten,
    GlobalAvgPool,
    KeyedModel,
    MaxPool2d,
    ModelSpec,
    Relu,
    ResidualAdd,
    divergence_score,
    equivalence_report,
    keyed_compile,
    keyed_forward,
    plain_forward,
    verify_equivalence,
)
from .io import (
    load_image,
    load_keyed_model,
    load_model,
    read_key,
    read_tensor,
    save_keyed_model,
    save_model,
    write_key,
    write_tensor,
)

__version__ = "0.1.0"
