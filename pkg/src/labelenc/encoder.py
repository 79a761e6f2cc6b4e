"""Label encoding network: label map -> feature pyramid in the detector's latent space.

ResNet-style without batch normalization or max pooling; stage depths {1, 2, 2, 1}.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import LabelTensor
from .config import EncoderConfig
from .nn import FPN, generator, init_conv_

# (blocks, bottleneck width, output width) for stages 2-5 at width_mult=1.
STAGES = ((1, 64, 256), (2, 128, 512), (2, 256, 1024), (1, 512, 2048))
STEM_CHANNELS = 128


class Bottleneck(nn.Module):
    def __init__(self, c_in: int, c_mid: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_mid, 1)
        self.conv2 = nn.Conv2d(c_mid, c_mid, 3, stride=stride, padding=1)
        self.conv3 = nn.Conv2d(c_mid, c_out, 1)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride=stride)

    def reset_parameters(self, g: torch.Generator) -> None:
        init_conv_(self.conv1, g)
        init_conv_(self.conv2, g)
        # No normalization: keep the residual branch small so activations stay bounded.
        init_conv_(self.conv3, g, gain=0.5)
        if self.shortcut is not None:
            init_conv_(self.shortcut, g, gain=1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.conv1(x))
        out = F.relu(self.conv2(out))
        out = self.conv3(out)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class LabelEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config.channels
        self.stem = nn.Conv2d(config.num_classes, c(STEM_CHANNELS), 7, stride=2, padding=3)
        stages = []
        c_in = c(STEM_CHANNELS)
        for blocks, mid, out in STAGES:
            layers = []
            for b in range(blocks):
                layers.append(Bottleneck(c_in, c(mid), c(out), stride=2 if b == 0 else 1))
                c_in = c(out)
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.fpn = FPN([c(out) for _, _, out in STAGES[1:]], config.fpn_channels)
        self.frozen = False

    def reset_parameters(self, g: torch.Generator) -> None:
        init_conv_(self.stem, g)
        for stage in self.stages:
            for block in stage:
                block.reset_parameters(g)
        self.fpn.reset_parameters(g)

    def stage_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Outputs of Stage1..Stage5."""
        outs = [F.relu(self.stem(x))]
        for stage in self.stages:
            outs.append(stage(outs[-1]))
        return outs

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        for s in self.config.pyramid_strides:
            if h % s or w % s:
                raise ValueError(f"label size {h}x{w} not divisible by stride {s}")
        return self.fpn(self.stage_outputs(x)[2:])


def build_encoder(config: EncoderConfig, seed: int) -> LabelEncoder:
    enc = LabelEncoder(config)
    enc.reset_parameters(generator(seed, "encoder"))
    return enc


def encode(encoder: LabelEncoder, label: LabelTensor | np.ndarray | torch.Tensor) -> list[torch.Tensor]:
    """Encode one label map (C, H, W) or a batch (N, C, H, W) into a pyramid of (N, D, H/s, W/s)."""
    if isinstance(label, LabelTensor):
        label = label.values
    x = torch.as_tensor(label, dtype=next(encoder.parameters()).dtype)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return encoder(x)
