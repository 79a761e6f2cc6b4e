"""Grayscale dumps of label maps and feature-intensity maps."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .codec import LabelTensor

log = logging.getLogger(__name__)

# Second pyramid level (stride 16) by default.
DEFAULT_LEVEL = 1


def feature_intensity(feature: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-pixel L2 norm over channels of a (C, H, W) map, min-max scaled to uint8."""
    f = feature.detach().cpu().numpy() if isinstance(feature, torch.Tensor) else np.asarray(feature)
    if f.ndim == 4:
        if f.shape[0] != 1:
            raise ValueError("expected a single feature map, got a batch")
        f = f[0]
    if f.ndim != 3:
        raise ValueError(f"expected (C, H, W), got shape {f.shape}")
    norm = np.sqrt((f.astype(np.float64) ** 2).sum(axis=0))
    lo, hi = norm.min(), norm.max()
    if hi - lo <= 0:
        log.warning("constant feature intensity; writing an all-black image")
        return np.zeros(norm.shape, dtype=np.uint8)
    return np.round((norm - lo) / (hi - lo) * 255.0).astype(np.uint8)


def viz_feature_intensity(pyramid_level: np.ndarray | torch.Tensor, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(feature_intensity(pyramid_level), mode="L").save(out_path)
    return out_path


def viz_label_channels(label: LabelTensor, out_dir: str | Path, stem: str = "label") -> list[Path]:
    """One 8-bit image per class channel; value 1.0 maps to 255."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(label.num_classes):
        img = np.round(np.clip(label.values[c], 0.0, 1.0) * 255.0).astype(np.uint8)
        p = out_dir / f"{stem}_class{c}.png"
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    return paths
