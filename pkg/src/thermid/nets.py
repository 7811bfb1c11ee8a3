"""Network architectures for window classification and their gradient check."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

DEFAULT_HIDDEN = (64, 64, 32, 16)


class Mlp(nn.Module):
    """Four ReLU layers and a two-logit head (softmax applied by the caller)."""

    def __init__(self, n_features: int, hidden: Sequence[int] = DEFAULT_HIDDEN):
        super().__init__()
        if len(hidden) != 4:
            raise ValueError(f"the MLP has exactly four hidden layers, got {len(hidden)} widths")
        layers: list[nn.Module] = []
        width = n_features
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(width, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


class Cnn(nn.Module):
    """Four conv/ReLU/max-pool stages with doubling channels, then dropout,
    global average pooling and a two-logit head."""

    def __init__(self, n_channels: int, base: int = 16, kernel: int = 5, pool: int = 4,
                 dropout: float = 0.5):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd to keep the length with 'same' padding")
        stages: list[nn.Module] = []
        c_in = n_channels
        for i in range(4):
            c_out = base * 2**i
            stages += [nn.Conv1d(c_in, c_out, kernel, padding=kernel // 2), nn.ReLU(), nn.MaxPool1d(pool)]
            c_in = c_out
        self.features = nn.Sequential(*stages)
        self.dropout = nn.Dropout(dropout)
        self.pool = nn.AdaptiveAvgPool1d(1)
        self.head = nn.Linear(c_in, 2)
        self.min_length = pool**4

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.pool(self.dropout(self.features(x)))
        return self.head(z.flatten(1))


def good_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)[:, 1]


def gradient_check(module: nn.Module, x: torch.Tensor, y: torch.Tensor, h: float = 1e-6,
                   n_probe: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare backprop gradients of the cross-entropy loss with central
    differences, in float64, for every parameter tensor.

    Returns the relative discrepancy ``|g - g_fd| / max(|g|, |g_fd|, tiny)``
    (vector 2-norms) per parameter. ``n_probe`` limits the number of
    entries perturbed per tensor (randomly chosen) for large layers.
    The module is switched to eval mode so dropout does not interfere.
    The small default step keeps perturbations from crossing ReLU or
    max-pool switching points, where the loss is not differentiable.
    """
    module = module.double().eval()
    x = x.double()
    loss_fn = nn.CrossEntropyLoss()
    module.zero_grad()
    loss_fn(module(x), y).backward()
    rng = np.random.default_rng(seed)
    out = {}
    with torch.no_grad():
        for name, p in module.named_parameters():
            g = p.grad.detach().clone().ravel()
            flat = p.data.view(-1)
            idx = np.arange(flat.numel())
            if n_probe is not None and idx.size > n_probe:
                idx = np.sort(rng.choice(idx, n_probe, replace=False))
            fd = torch.empty(idx.size, dtype=torch.float64)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn(module(x), y).item()
                flat[i] = orig - h
                down = loss_fn(module(x), y).item()
                flat[i] = orig
                fd[j] = (up - down) / (2 * h)
            ga = g[torch.as_tensor(idx)]
            scale = max(ga.norm().item(), fd.norm().item(), 1e-12)
            out[name] = (ga - fd).norm().item() / scale
    return out
