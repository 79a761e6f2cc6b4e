"""Small shared fixtures for pipeline-level tests."""

from __future__ import annotations

from labelenc.config import RunConfig, desk_config
from labelenc.datasets import generate_synthetic


def tiny_config(iters: int = 6, seed: int = 0, fpn: int = 16) -> RunConfig:
    cfg = desk_config(width_mult=0.25, fpn_channels=fpn)
    cfg.data.image_size = 64
    cfg.data.min_box_size, cfg.data.max_box_size = 10, 40
    cfg.detector.backbone_widths = (8, 8, 16, 16)
    cfg.train.total_iters = iters
    cfg.train.batch_size = 4
    cfg.train.log_every = 1
    cfg.train.param_seed = cfg.train.data_seed = cfg.train.aug_seed = seed
    return cfg


def tiny_dataset(n: int = 16, seed: int = 0, size: int = 64):
    return generate_synthetic(n, size, 2, (1, 3), seed, 10, 40, "train")
