"""Rendering of box annotations into dense per-class label maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class AnnotationError(ValueError):
    """An annotation violates its geometric or class invariants."""


@dataclass(frozen=True)
class Annotation:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def validate(self, num_classes: int, height: int, width: int) -> None:
        if not 0 <= self.class_id < num_classes:
            raise AnnotationError(f"class_id {self.class_id} not in [0, {num_classes})")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise AnnotationError(f"box {self.box()} has non-positive area")
        if self.x_min < 0 or self.y_min < 0 or self.x_max > width or self.y_max > height:
            raise AnnotationError(f"box {self.box()} exceeds image bounds {width}x{height}")


@dataclass
class LabelTensor:
    values: np.ndarray  # (C, H, W) float32

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def box_fill_value(px: float, py: float, box: Annotation) -> float:
    """Fill value at a point inside ``box``: 1 at the center, 0.5 on the boundary.

    Decay is linear in the box-normalized Chebyshev distance from the center.
    """
    if not (box.x_min <= px <= box.x_max and box.y_min <= py <= box.y_max):
        raise AnnotationError(f"point ({px}, {py}) lies outside box {box.box()}")
    cx = 0.5 * (box.x_min + box.x_max)
    cy = 0.5 * (box.y_min + box.y_max)
    d = max(abs(px - cx) / (0.5 * box.width), abs(py - cy) / (0.5 * box.height))
    return 1.0 - 0.5 * d


def _validate_all(annotations: Sequence[Annotation], num_classes: int, height: int, width: int) -> None:
    for i, ann in enumerate(annotations):
        try:
            ann.validate(num_classes, height, width)
        except AnnotationError as e:
            raise AnnotationError(f"annotation {i}: {e}") from None


def _render(
    annotations: Sequence[Annotation],
    scales: Sequence[float],
    num_classes: int,
    height: int,
    width: int,
) -> LabelTensor:
    out = np.zeros((num_classes, height, width), dtype=np.float32)
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    for ann, u in zip(annotations, scales):
        # Only pixel centers inside the closed box receive a value.
        j0 = max(int(np.ceil(ann.x_min - 0.5)), 0)
        j1 = min(int(np.floor(ann.x_max - 0.5)), width - 1)
        i0 = max(int(np.ceil(ann.y_min - 0.5)), 0)
        i1 = min(int(np.floor(ann.y_max - 0.5)), height - 1)
        if j1 < j0 or i1 < i0 or u == 0.0:
            continue
        cx = 0.5 * (ann.x_min + ann.x_max)
        cy = 0.5 * (ann.y_min + ann.y_max)
        dx = np.abs(xs[j0 : j1 + 1] - cx) / (0.5 * ann.width)
        dy = np.abs(ys[i0 : i1 + 1] - cy) / (0.5 * ann.height)
        d = np.maximum(dy[:, None], dx[None, :])
        vals = (u * (1.0 - 0.5 * d)).astype(np.float32)
        region = out[ann.class_id, i0 : i1 + 1, j0 : j1 + 1]
        np.maximum(region, vals, out=region)
    return LabelTensor(out)


def render_labels(annotations: Sequence[Annotation], num_classes: int, height: int, width: int) -> LabelTensor:
    """Render annotations into a (C, H, W) map; overlapping same-class boxes keep the max."""
    _validate_all(annotations, num_classes, height, width)
    return _render(annotations, [1.0] * len(annotations), num_classes, height, width)


def augment_labels(
    inputs: Sequence[tuple[Annotation, float]], num_classes: int, height: int, width: int
) -> LabelTensor:
    """Render with each box's fill intensity scaled by its own factor before the max-merge."""
    anns = [a for a, _ in inputs]
    scales = [float(u) for _, u in inputs]
    for i, u in enumerate(scales):
        if not 0.0 <= u <= 1.0:
            raise AnnotationError(f"annotation {i}: scale {u} outside [0, 1]")
    _validate_all(anns, num_classes, height, width)
    return _render(anns, scales, num_classes, height, width)


def draw_box_scales(
    n: int, rng: np.random.Generator, prob: float = 0.5, per_box: bool = True
) -> np.ndarray:
    """With probability ``prob`` a box's intensity is multiplied by U(0, 1); otherwise 1."""
    if per_box:
        hit = rng.random(n) < prob
        u = rng.random(n)
    else:
        hit = np.full(n, rng.random() < prob)
        u = np.full(n, rng.random())
    return np.where(hit, u, 1.0)


def clip_annotations(annotations: Iterable[Annotation], height: int, width: int) -> list[Annotation]:
    """Clip boxes to the image; drop fragments under 1 px^2 with a warning."""
    kept = []
    for i, a in enumerate(annotations):
        x0, y0 = min(max(a.x_min, 0.0), width), min(max(a.y_min, 0.0), height)
        x1, y1 = min(max(a.x_max, 0.0), width), min(max(a.y_max, 0.0), height)
        if (x1 - x0) * (y1 - y0) < 1.0 or x1 <= x0 or y1 <= y0:
            log.warning("dropping annotation %d: clipped area below 1 px^2", i)
            continue
        kept.append(Annotation(a.class_id, float(x0), float(y0), float(x1), float(y1)))
    return kept
