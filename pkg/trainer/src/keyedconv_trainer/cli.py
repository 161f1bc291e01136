"""Command line: train/export a model, then replay the accuracy pattern.

  keyedconv-trainer train --out-dir runs/m0 [--epochs N --seed S --arch A]
  keyedconv-trainer eval --manifest runs/m0/model.json [--samples N]

`eval` reports plain accuracy, keyed accuracy (shuffled inputs, matching
key) and wrong-key accuracy; with a trained model the first two agree
sample for sample and the third sits near chance.
"""

import argparse
import os
import sys
import tempfile

import numpy as np

from .config import TrainingConfig
from .data import DataError, load_split
from .evaluate import (
    PrimaryError,
    accuracy,
    compile_model,
    infer_argmax,
)
from .export import export_manifest, write_identity_key, write_shuffle_key
from .train import train_tiny_model


def _build_parser():
    parser = argparse.ArgumentParser(prog="keyedconv-trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train and export an MNIST model")
    train.add_argument("--out-dir", required=True)
    train.add_argument("--arch", default="tiny3")
    train.add_argument("--epochs", type=int, default=15)
    train.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("eval", help="plain/keyed/wrong-key accuracy report")
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--samples", type=int, default=1000)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--session-seed", type=int, default=7)
    return parser


def _cmd_train(args) -> int:
    config = TrainingConfig(arch=args.arch, epochs=args.epochs, seed=args.seed)
    trained = train_tiny_model(config)
    manifest, blob = export_manifest(
        trained.net, args.out_dir, input_dims=(1, 28, 28),
        training=config.to_dict())
    print(f"test accuracy: {trained.accuracy:.4f}")
    print(f"manifest: {manifest}")
    print(f"weights:  {blob}")
    return 0


def _cmd_eval(args) -> int:
    _, _, test_x, test_y = load_split(seed=args.seed)
    test_x, test_y = test_x[:args.samples], test_y[:args.samples]

    with tempfile.TemporaryDirectory() as work:
        ident = os.path.join(work, "identity.pkey")
        good = os.path.join(work, "camera.pkey")
        wrong = os.path.join(work, "intruder.pkey")
        write_identity_key(ident, 28, 28)
        write_shuffle_key(good, 28, 28, seed=args.session_seed)
        write_shuffle_key(wrong, 28, 28, seed=args.session_seed + 1)

        plain_c = os.path.join(work, "plain.kc.json")
        keyed_c = os.path.join(work, "keyed.kc.json")
        compile_model(args.manifest, ident, args.session_seed, plain_c)
        compile_model(args.manifest, good, args.session_seed, keyed_c)

        plain = infer_argmax(plain_c, test_x, work)
        keyed = infer_argmax(keyed_c, test_x, work, encrypt_key=good)
        stray = infer_argmax(keyed_c, test_x, work, encrypt_key=wrong)

    agree = float((plain == keyed).mean())
    print(f"samples: {test_x.shape[0]}")
    print(f"plain accuracy:     {accuracy(plain, test_y):.4f}")
    print(f"keyed accuracy:     {accuracy(keyed, test_y):.4f}"
          f"  (prediction agreement {agree:.4f})")
    print(f"wrong-key accuracy: {accuracy(stray, test_y):.4f}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        return _cmd_eval(args)
    except (DataError, PrimaryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
