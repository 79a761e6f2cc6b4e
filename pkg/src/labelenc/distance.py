"""Layer-normalized L2 distance between backbone and label-encoder pyramids, with adaptation convs."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .nn import generator, init_conv_

LN_EPS = 1e-5


class Adaptation(nn.Module):
    """Three 3x3 convolutions with ReLU between them; one instance per pyramid level."""

    def __init__(self, channels: int):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))

    def reset_parameters(self, g: torch.Generator) -> None:
        for conv in self.convs[:-1]:
            init_conv_(conv, g)
        init_conv_(self.convs[-1], g, gain=1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.convs[0](x))
        x = F.relu(self.convs[1](x))
        return self.convs[2](x)


class AdaptationPyramid(nn.ModuleList):
    frozen = False


def build_adaptation(channels: int, num_levels: int, seed: int, tag: str = "adapt") -> AdaptationPyramid:
    levels = AdaptationPyramid(Adaptation(channels) for _ in range(num_levels))
    for k, m in enumerate(levels):
        m.reset_parameters(generator(seed, f"{tag}/{k}"))
    return levels


def layer_normalize(x: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize over channels (dim 1) at every spatial location; no affine."""
    mean = x.mean(dim=1, keepdim=True)
    var = x.var(dim=1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def distance_loss(
    x_f: list[torch.Tensor], x_h: list[torch.Tensor], phi: AdaptationPyramid, eps: float = LN_EPS
) -> torch.Tensor:
    """Mean over levels of the per-element mean of (LN(A(x_f)) - LN(x_h))^2.

    ``x_h`` is detached here: no gradient reaches the label encoder through this loss.
    """
    if not (len(x_f) == len(x_h) == len(phi)):
        raise ValueError(f"level count mismatch: {len(x_f)}, {len(x_h)}, {len(phi)}")
    terms = []
    for k, (f, h, adapt) in enumerate(zip(x_f, x_h, phi)):
        if f.shape != h.shape:
            raise ValueError(f"level {k}: shape {tuple(f.shape)} vs {tuple(h.shape)}")
        diff = layer_normalize(adapt(f), eps) - layer_normalize(h.detach(), eps)
        terms.append(diff.pow(2).mean())
    return torch.stack(terms).mean()
