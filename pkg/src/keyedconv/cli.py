"""Command-line surface: key lifecycle, encrypt/decrypt, compile, infer, verify.

Exit codes are part of the interface: 0 success (and, for verify, bitwise
equivalence), 1 usage error, 2 format/integrity/shape error on data, 3
verification found diverging outputs. argparse's stock exit code for bad
flags is 2; it is overridden here because 2 is taken.

encrypt/decrypt/infer accept a single C,H,W tensor or an N,C,H,W batch; a
batch is processed frame by frame and written back as a batch.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

import numpy as np

from . import io
from .errors import KeyedConvError, ShapeError
from .keys import generate_key
from .model import equivalence_report, keyed_compile, keyed_forward
from .tensor_ops import Tensor
from .transform import shuffle, unshuffle

__all__ = ["main", "entry"]

_MAX_SEED = (1 << 64) - 1


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); 2 means format error here
        raise _UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not (0 <= value <= _MAX_SEED):
        raise ValueError("seed out of range")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be >= 1")
    return value


def _build_parser() -> _Parser:
    parser = _Parser(prog="keyedconv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("keygen", help="generate a permutation key file")
    p.add_argument("--height", type=_positive, required=True)
    p.add_argument("--width", type=_positive, required=True)
    p.add_argument("--seed", type=_seed, required=True, help="unsigned 64-bit seed")
    p.add_argument("--out", required=True, help="output .pkey path")

    p = sub.add_parser("encrypt", help="shuffle an image under a key")
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True, help=".ppm/.pgm/.tnsr image")
    p.add_argument("--out", required=True, help="output .tnsr path")

    p = sub.add_parser("decrypt", help="invert the shuffle")
    p.add_argument("--key", required=True)
    p.add_argument("--in", dest="input", required=True, help=".tnsr input")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compile", help="compile a model against an acquisition key")
    p.add_argument("--model", required=True, help="model manifest .json")
    p.add_argument("--key", required=True)
    p.add_argument("--session-seed", type=_seed, required=True)
    p.add_argument("--out", required=True, help="compiled artifact .json path")

    p = sub.add_parser("infer", help="run a compiled model on shuffled input")
    p.add_argument("--compiled", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--logits", action="store_true", help="also print outputs to stdout")

    p = sub.add_parser("verify", help="check keyed inference against the plain path")
    p.add_argument("--model", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--session-seed", type=_seed, required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument(
        "--wrong-key",
        help="encrypt with this key instead; exit 3 then demonstrates access control",
    )
    return parser


def _frames(t: Tensor, what: str) -> list[Tensor]:
    if t.rank == 3:
        return [t]
    if t.rank == 4:
        return [Tensor(t.array[i]) for i in range(t.dims[0])]
    raise ShapeError(f"{what} must have rank 3 (C,H,W) or 4 (N,C,H,W), got {t.dims}")


def _rejoin(frames: list[Tensor], batched: bool) -> Tensor:
    if not batched:
        return frames[0]
    return Tensor(np.stack([f.array for f in frames]))


def _map_frames(path_in: str, path_out: str, fn, reader) -> None:
    t = reader(path_in)
    frames = _frames(t, path_in)
    out = [fn(f) for f in frames]
    io.write_tensor(path_out, _rejoin(out, t.rank == 4))


def _cmd_keygen(args) -> int:
    io.write_key(args.out, generate_key(args.height, args.width, args.seed))
    return 0


def _cmd_encrypt(args) -> int:
    key = io.read_key(args.key)
    _map_frames(args.input, args.out, lambda f: shuffle(f, key), io.load_image)
    return 0


def _cmd_decrypt(args) -> int:
    key = io.read_key(args.key)
    _map_frames(args.input, args.out, lambda f: unshuffle(f, key), io.read_tensor)
    return 0


def _cmd_compile(args) -> int:
    model = io.load_model(args.model)
    key = io.read_key(args.key)
    io.save_keyed_model(keyed_compile(model, key, args.session_seed), args.out)
    return 0


def _format_values(t: Tensor) -> str:
    return " ".join(repr(float(v)) for v in t.array.reshape(-1))


def _cmd_infer(args) -> int:
    keyed = io.load_keyed_model(args.compiled)
    t = io.read_tensor(args.input)
    frames = _frames(t, args.input)
    outputs = [keyed_forward(keyed, f)[0] for f in frames]
    io.write_tensor(args.out, _rejoin(outputs, t.rank == 4))
    if args.logits:
        for out in outputs:
            print(_format_values(out))
    return 0


def _cmd_verify(args) -> int:
    model = io.load_model(args.model)
    key = io.read_key(args.key)
    wrong = io.read_key(args.wrong_key) if args.wrong_key else None
    t = io.read_tensor(args.input)
    frames = _frames(t, args.input)
    keyed = keyed_compile(model, key, args.session_seed)
    all_equal = True
    for i, frame in enumerate(frames):
        report = equivalence_report(keyed, frame, encrypt_key=wrong)
        all_equal = all_equal and report.bitwise_equal
        argmax = "n/a" if report.argmax_equal is None else str(report.argmax_equal)
        print(
            f"frame {i}: bitwise_equal={report.bitwise_equal} "
            f"max_abs_diff={report.max_abs_diff:.6g} "
            f"relative_l2={report.relative_l2:.6g} argmax_equal={argmax}"
        )
    if all_equal:
        print(f"equivalent: {len(frames)}/{len(frames)} frames bitwise equal")
        return 0
    suffix = " (expected under --wrong-key)" if wrong is not None else ""
    print(f"verification failed: outputs diverge{suffix}")
    return 3


_COMMANDS = {
    "keygen": _cmd_keygen,
    "encrypt": _cmd_encrypt,
    "decrypt": _cmd_decrypt,
    "compile": _cmd_compile,
    "infer": _cmd_infer,
    "verify": _cmd_verify,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except KeyedConvError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
