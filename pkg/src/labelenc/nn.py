"""Parameter-store helpers shared by all networks: seeded init and freezing."""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit seed for a named random stream."""
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def generator(seed: int, tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, tag))
    return g


def init_conv_(conv: nn.Conv2d, g: torch.Generator, gain: float = math.sqrt(2.0), bias: float = 0.0) -> None:
    """Fan-in scaled Gaussian weights; constant bias."""
    fan_in = conv.in_channels // conv.groups * conv.kernel_size[0] * conv.kernel_size[1]
    with torch.no_grad():
        conv.weight.normal_(0.0, gain / math.sqrt(fan_in), generator=g)
        if conv.bias is not None:
            conv.bias.fill_(bias)


def freeze(module: nn.Module) -> nn.Module:
    """Mark a parameter store frozen: no gradients, ignored by optimizers."""
    module.frozen = True
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def is_frozen(module: nn.Module) -> bool:
    return bool(getattr(module, "frozen", False))


def trainable_parameters(*modules: nn.Module) -> list[nn.Parameter]:
    return [p for m in modules if not is_frozen(m) for p in m.parameters() if p.requires_grad]


class FPN(nn.Module):
    """Top-down pyramid: 1x1 laterals, nearest upsampling, 3x3 output convs."""

    def __init__(self, in_channels: list[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def reset_parameters(self, g: torch.Generator) -> None:
        for conv in [*self.lateral, *self.output]:
            init_conv_(conv, g, gain=1.0)

    def forward(self, feats: list[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + nn.functional.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        return [conv(x) for conv, x in zip(self.output, lat)]
