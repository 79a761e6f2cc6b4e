"""Dataclass configs for data, models, and training, with strict JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class DataConfig:
    num_train: int = 2000
    num_val: int = 500
    image_size: int = 128
    num_classes: int = 2
    min_objects: int = 1
    max_objects: int = 4
    min_box_size: int = 12
    max_box_size: int = 72
    seed: int = 0
    # Shorter-edge size for COCO ingestion (800 at full scale).
    coco_min_size: int = 128
    # Per-box (True) or per-image (False) coin flip for label augmentation.
    augment_per_box: bool = True
    augment_prob: float = 0.5

    def validate(self) -> None:
        if self.image_size % 32:
            raise ConfigError(f"data.image_size must be divisible by 32, got {self.image_size}")
        if self.num_classes < 1:
            raise ConfigError("data.num_classes must be >= 1")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError("data.min_objects/max_objects must satisfy 0 <= min <= max")
        if not 1 <= self.min_box_size <= self.max_box_size < self.image_size:
            raise ConfigError("data.min_box_size/max_box_size out of range")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("data.augment_prob must lie in [0, 1]")


@dataclass
class EncoderConfig:
    num_classes: int = 80
    width_mult: float = 1.0
    fpn_channels: int = 256
    pyramid_strides: tuple[int, ...] = (8, 16, 32)

    def channels(self, base: int) -> int:
        return int(round(base * self.width_mult))

    def validate(self) -> None:
        if not 0.0 < self.width_mult <= 1.0:
            raise ConfigError(f"encoder.width_mult must lie in (0, 1], got {self.width_mult}")
        if self.num_classes < 1:
            raise ConfigError("encoder.num_classes must be >= 1")
        smallest = self.channels(64)
        if smallest < 8:
            raise ConfigError(
                f"encoder.width_mult={self.width_mult} scales the narrowest layer to {smallest} < 8 channels"
            )
        _check_strides(self.pyramid_strides, "encoder")
        if tuple(self.pyramid_strides) != (8, 16, 32):
            # FPN taps stages 3-5 of the fixed-depth encoder.
            raise ConfigError("encoder.pyramid_strides must be (8, 16, 32)")


@dataclass
class DetectorConfig:
    num_classes: int = 80
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    fpn_channels: int = 256
    pyramid_strides: tuple[int, ...] = (8, 16, 32)
    # Assignment ranges on max(l, t, r, b), one (lo, hi] per level, in input pixels.
    level_ranges: tuple[tuple[float, float], ...] = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 100

    def validate(self) -> None:
        if len(self.backbone_widths) != 4:
            raise ConfigError("detector.backbone_widths must list 4 stage widths")
        _check_strides(self.pyramid_strides, "detector")
        if tuple(self.pyramid_strides) != (8, 16, 32):
            raise ConfigError("detector.pyramid_strides must be (8, 16, 32)")
        if len(self.level_ranges) != len(self.pyramid_strides):
            raise ConfigError("detector.level_ranges needs one range per pyramid level")
        prev_hi = 0.0
        for lo, hi in self.level_ranges:
            if lo != prev_hi or not hi > lo:
                raise ConfigError("detector.level_ranges must partition (0, inf)")
            prev_hi = hi
        if prev_hi != math.inf:
            raise ConfigError("detector.level_ranges must end at inf")
        for name in ("score_thresh", "nms_iou"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"detector.{name} must lie in (0, 1)")


@dataclass
class TrainConfig:
    total_iters: int = 3000
    lr: float = 0.01
    lr_decay_points: tuple[float, float] = (2 / 3, 8 / 9)
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_grad_norm: float | None = 10.0
    lam: float = 1.0
    lam1: float = 1.0
    lam2: float = 1.0
    step1_warmup_frac: float = 1 / 3
    step2_aux_drop_frac: float = 1 / 9
    step1_reconstruction_only: bool = False
    step2_use_supervision: bool = True
    step2_use_head_init: bool = True
    param_seed: int = 0
    data_seed: int = 0
    aug_seed: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if self.total_iters < 0:
            raise ConfigError("train.total_iters must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        for name in ("step1_warmup_frac", "step2_aux_drop_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {v}")
        a, b = self.lr_decay_points
        if not 0.0 <= a <= b < 1.0:
            raise ConfigError("train.lr_decay_points must be two ordered fractions in [0, 1)")
        for name in ("lam", "lam1", "lam2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")


@dataclass
class PathsConfig:
    dataset: str | None = None
    val_dataset: str | None = None
    step1_checkpoint: str | None = None
    detector_checkpoint: str | None = None
    predictions: str | None = None
    ground_truth: str | None = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.data.validate()
        self.encoder.validate()
        self.detector.validate()
        self.train.validate()
        if not (self.data.num_classes == self.encoder.num_classes == self.detector.num_classes):
            raise ConfigError("data/encoder/detector num_classes disagree")
        if self.encoder.fpn_channels != self.detector.fpn_channels:
            raise ConfigError("encoder.fpn_channels must equal detector.fpn_channels")
        if tuple(self.encoder.pyramid_strides) != tuple(self.detector.pyramid_strides):
            raise ConfigError("encoder and detector pyramid strides disagree")

    def to_dict(self) -> dict[str, Any]:
        return to_jsonable(dataclasses.asdict(self))

    def with_seed(self, seed: int) -> "RunConfig":
        cfg = from_dict(self.to_dict())
        cfg.train.param_seed = cfg.train.data_seed = cfg.train.aug_seed = seed
        cfg.data.seed = seed
        return cfg


def _check_strides(strides, where: str) -> None:
    s = list(strides)
    if not s or any(not _is_pow2(x) for x in s) or any(b <= a for a, b in zip(s, s[1:])):
        raise ConfigError(f"{where}.pyramid_strides must be strictly increasing powers of two")


def desk_config(width_mult: float = 0.25, fpn_channels: int = 64) -> RunConfig:
    """The desk-scale preset: 2 classes, 128x128 synthetic images, narrow models."""
    cfg = RunConfig()
    cfg.encoder = EncoderConfig(num_classes=2, width_mult=width_mult, fpn_channels=fpn_channels)
    cfg.detector = DetectorConfig(
        num_classes=2,
        backbone_widths=(16, 32, 64, 128),
        fpn_channels=fpn_channels,
        level_ranges=((0.0, 16.0), (16.0, 32.0), (32.0, math.inf)),
    )
    # Best of {0.01, 0.02, 0.04} for the plain baseline on a held-out tuning split.
    cfg.train.lr = 0.02
    return cfg


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def _from_jsonable(v: Any) -> Any:
    if v == "inf":
        return math.inf
    if isinstance(v, list):
        return tuple(_from_jsonable(x) for x in v)
    return v


def _build(cls, raw: dict[str, Any], section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) in '{section}': {', '.join(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        v = _from_jsonable(v)
        default = getattr(cls(), k)
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[k] = v
    return cls(**kwargs)


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "detector": DetectorConfig,
    "train": TrainConfig,
    "paths": PathsConfig,
}


def from_dict(raw: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Merge ``raw`` over ``base`` (or the defaults). Unknown keys raise ConfigError."""
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    merged = (base or RunConfig()).to_dict()
    for name, section in raw.items():
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be an object")
        merged[name].update(section)
    cfg = RunConfig(**{name: _build(cls, merged[name], name) for name, cls in _SECTIONS.items()})
    return cfg


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(raw, base)


def config_hash(cfg: RunConfig | dict) -> str:
    d = cfg.to_dict() if isinstance(cfg, RunConfig) else cfg
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
