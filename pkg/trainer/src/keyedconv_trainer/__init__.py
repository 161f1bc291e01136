"""Training and export side of the keyedconv pipeline."""

from .config import TrainingConfig
from .data import DataError, cache_dir, fetch_mnist, load_split
from .evaluate import (
    PrimaryError,
    accuracy,
    compile_model,
    encrypt,
    infer,
    infer_argmax,
    keygen,
    primary_binary,
)
from .export import (
    ExportError,
    export_manifest,
    fold_batchnorm,
    read_tensor,
    write_identity_key,
    write_key,
    write_shuffle_key,
    write_tensor,
)
from .net import ARCHS, build, predict
from .train import TrainedModel, train_tiny_model

__version__ = "0.1.0"
