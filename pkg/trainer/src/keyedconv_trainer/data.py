"""MNIST acquisition and deterministic splitting.

Sources, in probe order:

1. a cached ``mnist.npz`` written by a previous successful fetch,
2. raw IDX files (``train-images-idx3-ubyte`` etc., optionally .gz),
3. the npm ``mnist`` package, which bundles 10k images as JSON and is
   reachable through package-manager mirrors even where general HTTP is not.

Images are uint8 and normalized to float32 ``byte / 255`` at split time,
matching the image convention of the inference engine this feeds.
"""

import gzip
import json
import os
import shutil
import struct
import subprocess

import numpy as np

CACHE_ENV = "KEYEDCONV_TRAINER_DATA"
_NPZ = "mnist.npz"

_IDX_IMAGES = ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte")
_IDX_LABELS = ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte")


class DataError(RuntimeError):
    pass


def cache_dir() -> str:
    root = os.environ.get(CACHE_ENV)
    if not root:
        root = os.path.join(os.path.expanduser("~"), ".cache", "keyedconv-trainer")
    os.makedirs(root, exist_ok=True)
    return root


def _read_idx(path: str, magic: int) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        got, = struct.unpack(">I", fh.read(4))
        if got != magic:
            raise DataError(f"{path}: IDX magic {got}, expected {magic}")
        rank = magic & 0xFF
        dims = struct.unpack(f">{rank}I", fh.read(4 * rank))
        payload = fh.read()
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise DataError(f"{path}: payload size {data.size} != {dims}")
    return data.reshape(dims)


def _find_idx(root: str):
    """All IDX image/label pairs found under root, concatenated."""
    images, labels = [], []
    for img_name, lab_name in zip(_IDX_IMAGES, _IDX_LABELS):
        for suffix in ("", ".gz"):
            img = os.path.join(root, img_name + suffix)
            lab = os.path.join(root, lab_name + suffix)
            if os.path.exists(img) and os.path.exists(lab):
                images.append(_read_idx(img, 0x803))
                labels.append(_read_idx(lab, 0x801))
                break
    if not images:
        return None
    return np.concatenate(images), np.concatenate(labels)


def _load_npm_bundle(node_modules: str):
    digits_dir = os.path.join(node_modules, "mnist", "src", "digits")
    if not os.path.isdir(digits_dir):
        return None
    images, labels = [], []
    for digit in range(10):
        with open(os.path.join(digits_dir, f"{digit}.json")) as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        if flat.size % 784 != 0:
            raise DataError(f"digit {digit}: {flat.size} values is not a"
                            f" multiple of 784")
        # bundle stores round(byte/255, 3); rounding back recovers the byte
        block = np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 28, 28)
        images.append(block)
        labels.append(np.full(block.shape[0], digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def _fetch_npm(root: str):
    npm = shutil.which("npm")
    if npm is None:
        return None
    proc = subprocess.run(
        [npm, "install", "--prefix", root, "--no-audit", "--no-fund", "mnist"],
        capture_output=True, text=True,
    )
    if proc.returncode != 0:
        return None
    return _load_npm_bundle(os.path.join(root, "node_modules"))


def fetch_mnist(root=None) -> tuple:
    """Returns (images uint8 (N,28,28), labels uint8 (N,)), caching as npz."""
    root = root or cache_dir()
    npz = os.path.join(root, _NPZ)
    if os.path.exists(npz):
        blob = np.load(npz)
        return blob["images"], blob["labels"]

    got = _find_idx(root)
    if got is None:
        got = _load_npm_bundle(os.path.join(root, "node_modules"))
    if got is None:
        got = _fetch_npm(root)
    if got is None:
        raise DataError(
            "MNIST unavailable: place IDX files (train-images-idx3-ubyte, "
            f"train-labels-idx1-ubyte, ...) in {root}, or ensure `npm` can "
            "reach a registry to fetch the bundled `mnist` package, then "
            "retry."
        )

    images, labels = got
    if images.shape[1:] != (28, 28) or images.shape[0] != labels.shape[0]:
        raise DataError(f"bad dataset shapes {images.shape} / {labels.shape}")
    np.savez_compressed(npz, images=images, labels=labels)
    return images, labels


def load_split(seed: int = 0, test_count: int = 2000, root=None):
    """Deterministic shuffle + split into train/test halves.

    Returns (train_x, train_y, test_x, test_y); x is float32 byte/255 with
    shape (N, 1, 28, 28), y is int64.
    """
    images, labels = fetch_mnist(root)
    if not 0 < test_count < images.shape[0]:
        raise DataError(f"test_count {test_count} out of range for "
                        f"{images.shape[0]} images")
    order = np.random.default_rng(seed).permutation(images.shape[0])
    images = images[order]
    labels = labels[order]

    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    y = labels.astype(np.int64)
    n_test = test_count
    return x[:-n_test], y[:-n_test], x[-n_test:], y[-n_test:]
