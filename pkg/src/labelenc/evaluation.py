"""COCO-style AP / mmAP with greedy score-ordered matching and 101-point interpolation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class Boxed(Protocol):
    class_id: int

    def box(self) -> tuple[float, float, float, float]: ...


def iou(box_a: Sequence[float], box_b: Sequence[float]) -> float:
    ax0, ay0, ax1, ay1 = box_a
    bx0, by0, bx1, by1 = box_b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _match_image(dets: Sequence, gts: Sequence, thr: float) -> list[bool]:
    """Greedy: each detection (score order) takes the highest-IoU unmatched GT with IoU >= thr."""
    taken = [False] * len(gts)
    tp = []
    for d in dets:
        best, best_iou = -1, thr
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(d.box(), g.box())
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
    return tp


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated area under the precision/recall curve; ``tp`` in score order."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp, dtype=np.float64)
    fps = np.cumsum(~tp, dtype=np.float64)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    # Monotone envelope from the right.
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _class_ap(detections, ground_truths, cls: int, thr: float) -> float:
    scored = []
    num_gt = 0
    for img, (dets, gts) in enumerate(zip(detections, ground_truths)):
        dc = sorted((d for d in dets if d.class_id == cls), key=lambda d: -d.score)
        gc = [g for g in gts if g.class_id == cls]
        num_gt += len(gc)
        for d, hit in zip(dc, _match_image(dc, gc, thr)):
            scored.append((d.score, img, hit))
    # Stable merge across images: by score, then image order.
    scored.sort(key=lambda t: -t[0])
    tp = np.array([hit for _, _, hit in scored], dtype=bool)
    return interpolated_ap(tp, num_gt)


def per_class_ap(detections, ground_truths, iou_threshold: float) -> dict[int, float]:
    if len(detections) != len(ground_truths):
        raise ValueError("detections and ground_truths must list the same images")
    classes = sorted({g.class_id for gts in ground_truths for g in gts})
    return {c: _class_ap(detections, ground_truths, c, iou_threshold) for c in classes}


def average_precision(detections, ground_truths, iou_threshold: float) -> float:
    """Mean AP over classes that have ground truth; per-image lists of detections/GT boxes."""
    aps = per_class_ap(detections, ground_truths, iou_threshold)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def mmap(detections, ground_truths) -> float:
    """Mean of average_precision over IoU thresholds 0.50:0.05:0.95."""
    if not any(len(g) for g in ground_truths):
        log.warning("mmAP on a dataset without ground truth is defined as 0.0")
        return 0.0
    return float(np.mean([average_precision(detections, ground_truths, t) for t in IOU_THRESHOLDS]))


@dataclass
class EvalReport:
    per_threshold: dict[float, float]
    mmap: float
    per_class: dict[int, float]
    class_names: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"AP@{t:.2f} {v:.6f}" for t, v in self.per_threshold.items()]
        lines.append(f"mmAP {self.mmap:.6f}")
        for c, v in self.per_class.items():
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            lines.append(f"class {c} {name} mmAP {v:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(detections, ground_truths, class_names: Sequence[str] = ()) -> EvalReport:
    """Per-threshold AP, mmAP and per-class mmAP."""
    per_t = {}
    per_c: dict[int, list[float]] = {}
    has_gt = any(len(g) for g in ground_truths)
    for t in IOU_THRESHOLDS:
        aps = per_class_ap(detections, ground_truths, t) if has_gt else {}
        per_t[t] = float(np.mean(list(aps.values()))) if aps else 0.0
        for c, v in aps.items():
            per_c.setdefault(c, []).append(v)
    total = mmap(detections, ground_truths)
    return EvalReport(per_t, total, {c: float(np.mean(v)) for c, v in per_c.items()}, list(class_names))


def recall_at(detections, ground_truths, iou_threshold: float = 0.5) -> float:
    """Fraction of GT boxes matched (greedy, same class) by some detection."""
    hit = total = 0
    for dets, gts in zip(detections, ground_truths):
        for cls in {g.class_id for g in gts}:
            dc = sorted((d for d in dets if d.class_id == cls), key=lambda d: -d.score)
            gc = [g for g in gts if g.class_id == cls]
            hit += sum(_match_image(dc, gc, iou_threshold))
            total += len(gc)
    return hit / total if total else 1.0
