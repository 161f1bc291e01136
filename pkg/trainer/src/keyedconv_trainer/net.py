"""Architecture registry. Every block uses only layer types the manifest
format can carry (batch norm is folded to a per-channel affine at export)."""

import torch
from torch import nn

ARCHS = {}


def _register(name):
    def deco(fn):
        ARCHS[name] = fn
        return fn
    return deco


@_register("tiny3")
def tiny3() -> nn.Sequential:
    """Three conv blocks, GAP head: the default MNIST model."""
    return nn.Sequential(
        nn.Conv2d(1, 16, 3, padding=1),
        nn.BatchNorm2d(16),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(16, 32, 3, padding=1),
        nn.BatchNorm2d(32),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(32, 64, 3, padding=1),
        nn.BatchNorm2d(64),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(64, 10),
    )


@_register("tiny2")
def tiny2() -> nn.Sequential:
    """Two conv blocks; smaller and faster, used by the quick tests."""
    return nn.Sequential(
        nn.Conv2d(1, 6, 3, padding=1),
        nn.BatchNorm2d(6),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(6, 12, 3, padding=1),
        nn.BatchNorm2d(12),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(12, 10),
    )


def build(arch: str) -> nn.Sequential:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; have {sorted(ARCHS)}")
    return ARCHS[arch]()


@torch.no_grad()
def predict(net: nn.Sequential, x) -> torch.Tensor:
    """Argmax predictions for a float32 (N,1,28,28) batch."""
    net.eval()
    return net(torch.as_tensor(x)).argmax(dim=1)
