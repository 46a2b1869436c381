"""Plain CNN classifier used as a yardstick for the toy data and the rebalancing experiment."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledImages, compute_metrics


class ReferenceCNN(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, depth: int = 2, width: int = 16):
        super().__init__()
        layers = []
        prev = in_channels
        for i in range(depth):
            w = width * 2**i
            layers += [nn.Conv2d(prev, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2)]
            prev = w
        self.features = nn.Sequential(*layers)
        # mean and max pooling together: the max keeps thin strokes visible
        self.fc = nn.Linear(2 * prev, num_classes)

    def forward(self, x):
        h = self.features(x)
        return self.fc(torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1))


def train_reference(
    data: LabeledImages,
    num_classes: int,
    epochs: int,
    seed: int,
    lr: float = 3e-3,
    batch_size: int = 32,
    depth: int = 2,
) -> ReferenceCNN:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        model = ReferenceCNN(data.x.shape[1], num_classes, depth)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x = torch.from_numpy(data.x)
    y = torch.from_numpy(data.y)
    n = len(y)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    return model


@torch.no_grad()
def evaluate_reference(model: ReferenceCNN, data: LabeledImages, num_classes: int):
    pred = torch.cat([model(torch.from_numpy(data.x[i : i + 256])).argmax(1) for i in range(0, len(data), 256)])
    return compute_metrics(pred.numpy(), data.y, num_classes)


def minority_recall(report, counts) -> float:
    """Mean recall over every class smaller than the largest one."""
    counts = np.asarray(counts)
    minority = np.flatnonzero(counts < counts.max())
    if minority.size == 0:
        minority = np.arange(len(counts))
    return float(np.mean([report.recall[k] for k in minority]))
