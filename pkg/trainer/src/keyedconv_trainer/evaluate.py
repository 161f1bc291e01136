"""Drive the keyedconv CLI to run exported models on plain or shuffled data.

All interaction with the inference engine goes through its command line and
file formats; the engine's Python package is never imported.
"""

import os
import shutil
import subprocess

import numpy as np

from .export import read_tensor, write_tensor

BIN_ENV = "KEYEDCONV_BIN"


class PrimaryError(RuntimeError):
    pass


def primary_binary() -> str:
    binary = os.environ.get(BIN_ENV) or shutil.which("keyedconv")
    if not binary:
        raise PrimaryError(
            "keyedconv CLI not found: install the keyedconv package or set "
            f"{BIN_ENV} to the executable"
        )
    return binary


def run_primary(args, expect=(0,)) -> subprocess.CompletedProcess:
    proc = subprocess.run([primary_binary(), *args], capture_output=True,
                          text=True)
    if proc.returncode not in expect:
        raise PrimaryError(
            f"keyedconv {' '.join(args)} exited {proc.returncode}: "
            f"{proc.stderr.strip()}"
        )
    return proc


def keygen(path: str, height: int, width: int, seed: int) -> None:
    run_primary(["keygen", "--height", str(height), "--width", str(width),
                 "--seed", str(seed), "--out", path])


def compile_model(manifest: str, key: str, session_seed: int, out: str) -> None:
    run_primary(["compile", "--model", manifest, "--key", key,
                 "--session-seed", str(session_seed), "--out", out])


def encrypt(key: str, src: str, dst: str) -> None:
    run_primary(["encrypt", "--key", key, "--in", src, "--out", dst])


def infer(compiled: str, src: str, dst: str) -> None:
    run_primary(["infer", "--compiled", compiled, "--in", src, "--out", dst])


def infer_argmax(compiled: str, images: np.ndarray, workdir: str,
                 encrypt_key=None, batch: int = 250) -> np.ndarray:
    """Predictions from the engine for float32 (N,1,28,28) images.

    With encrypt_key set, each batch is shuffled by that key file before
    inference (the camera side of the pipeline).
    """
    os.makedirs(workdir, exist_ok=True)
    out = []
    for start in range(0, images.shape[0], batch):
        chunk = images[start:start + batch]
        src = os.path.join(workdir, "batch.tnsr")
        dst = os.path.join(workdir, "logits.tnsr")
        write_tensor(src, chunk)
        if encrypt_key is not None:
            enc = os.path.join(workdir, "batch.enc.tnsr")
            encrypt(encrypt_key, src, enc)
            src = enc
        infer(compiled, src, dst)
        logits = read_tensor(dst)
        if logits.shape != (chunk.shape[0], 10):
            raise PrimaryError(f"unexpected logits shape {logits.shape}")
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float((predictions == labels).mean())
