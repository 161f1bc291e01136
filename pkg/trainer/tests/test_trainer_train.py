"""Training behavior: controls, determinism, config validation."""

import numpy as np
import pytest
import torch

from keyedconv_trainer import (
    TrainingConfig,
    build,
    export_manifest,
    predict,
    train_tiny_model,
)


def test_untrained_control_is_chance():
    trained = train_tiny_model(TrainingConfig(epochs=0))
    assert 0.06 <= trained.accuracy <= 0.16


def test_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(dataset="imagenet")
    with pytest.raises(ValueError):
        TrainingConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainingConfig(batch_size=0)


def test_unknown_arch():
    with pytest.raises(ValueError, match="unknown architecture"):
        build("resnet152")


def test_predict_shape():
    net = build("tiny2")
    out = predict(net, np.zeros((5, 1, 28, 28), np.float32))
    assert out.shape == (5,) and out.dtype == torch.int64


def test_micro_training_learns_something():
    quick = train_tiny_model(TrainingConfig(epochs=3, seed=1,
                                            train_limit=4000))
    control = train_tiny_model(TrainingConfig(epochs=0, seed=1))
    assert quick.accuracy > control.accuracy + 0.3


def test_same_config_same_bytes(tmp_path):
    def run(tag):
        cfg = TrainingConfig(arch="tiny2", epochs=1, seed=5, train_limit=512)
        trained = train_tiny_model(cfg)
        out = tmp_path / tag
        manifest, blob = export_manifest(trained.net, str(out),
                                         training=cfg.to_dict())
        return open(manifest, "rb").read(), open(blob, "rb").read()

    manifest_a, blob_a = run("a")
    manifest_b, blob_b = run("b")
    assert manifest_a == manifest_b
    assert blob_a == blob_b
