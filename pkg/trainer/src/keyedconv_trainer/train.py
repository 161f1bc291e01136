"""Deterministic training of the tiny nets on plain MNIST images."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import TrainingConfig
from .data import load_split
from .net import build, predict


@dataclass
class TrainedModel:
    net: nn.Sequential
    config: TrainingConfig
    accuracy: float


def _eval_accuracy(net, x, y, batch=512) -> float:
    hits = 0
    for start in range(0, x.shape[0], batch):
        pred = predict(net, x[start:start + batch])
        hits += int((pred.numpy() == y[start:start + batch]).sum())
    return hits / x.shape[0]


def train_tiny_model(config: TrainingConfig, data_root=None) -> TrainedModel:
    """Trains per config and reports plain test-split accuracy.

    Single-threaded so that a given (config, environment) pair always
    produces byte-identical weights.
    """
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)

    train_x, train_y, test_x, test_y = load_split(
        seed=config.seed, test_count=config.test_count, root=data_root)
    if config.train_limit:
        train_x = train_x[:config.train_limit]
        train_y = train_y[:config.train_limit]

    net = build(config.arch)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    x = torch.from_numpy(np.ascontiguousarray(train_x))
    y = torch.from_numpy(np.ascontiguousarray(train_y))

    gen = torch.Generator().manual_seed(config.seed)
    net.train()
    decay_at = max(1, (2 * config.epochs) // 3)
    for epoch in range(config.epochs):
        if epoch == decay_at:
            # tenfold drop settles Adam's oscillation for the final third
            for group in opt.param_groups:
                group["lr"] = config.learning_rate * 0.1
        order = torch.randperm(x.shape[0], generator=gen)
        for start in range(0, x.shape[0], config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            loss.backward()
            opt.step()

    net.eval()
    return TrainedModel(net, config, _eval_accuracy(net, test_x, test_y))
