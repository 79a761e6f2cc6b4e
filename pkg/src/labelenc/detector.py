"""Anchor-free (FCOS-style, no centerness) detector: backbone + FPN, shared head, loss, decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .codec import Annotation
from .config import DetectorConfig
from .nn import FPN, generator, init_conv_

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PRIOR_PROB = 0.01
# exp() argument cap for box regression; beyond this distances are ~3000 strides.
MAX_LOG_DISTANCE = 8.0
DEFAULT_LEVEL_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, math.inf))

Pyramid = list[torch.Tensor]
LevelOutputs = list[tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def box(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.gn1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.gn2 = nn.GroupNorm(_groups(c_out), c_out)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), nn.GroupNorm(_groups(c_out), c_out)
            )

    def reset_parameters(self, g: torch.Generator) -> None:
        init_conv_(self.conv1, g)
        init_conv_(self.conv2, g)
        if self.shortcut is not None:
            init_conv_(self.shortcut[0], g, gain=1.0)
        for m in self.modules():
            if isinstance(m, nn.GroupNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.gn1(self.conv1(x)))
        out = self.gn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class Backbone(nn.Module):
    """Stem (stride 2) + four residual stages (strides 4..32) + FPN on strides 8/16/32."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        w = list(config.backbone_widths)
        self.config = config
        self.stem = nn.Conv2d(3, w[0], 3, stride=2, padding=1, bias=False)
        self.stem_gn = nn.GroupNorm(_groups(w[0]), w[0])
        c_in = w[0]
        self.stages = nn.ModuleList()
        for c_out in w:
            self.stages.append(BasicBlock(c_in, c_out, stride=2))
            c_in = c_out
        self.fpn = FPN(w[1:], config.fpn_channels)
        self.frozen = False

    def reset_parameters(self, g: torch.Generator) -> None:
        init_conv_(self.stem, g)
        nn.init.ones_(self.stem_gn.weight)
        nn.init.zeros_(self.stem_gn.bias)
        for stage in self.stages:
            stage.reset_parameters(g)
        self.fpn.reset_parameters(g)

    def forward(self, images: torch.Tensor) -> Pyramid:
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size {h}x{w} not divisible by 32")
        x = F.relu(self.stem_gn(self.stem(images)))
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return self.fpn(feats[1:])


class Head(nn.Module):
    """Shared across levels: 2-conv tower, class logits, positive (l, t, r, b) distances."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        c = config.fpn_channels
        self.config = config
        self.tower = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1, bias=False) for _ in range(2))
        self.cls_pred = nn.Conv2d(c, config.num_classes, 3, padding=1)
        self.reg_pred = nn.Conv2d(c, 4, 3, padding=1)
        self.frozen = False

    def reset_parameters(self, g: torch.Generator) -> None:
        for conv in self.tower:
            init_conv_(conv, g)
        with torch.no_grad():
            self.cls_pred.weight.normal_(0.0, 0.01, generator=g)
            self.cls_pred.bias.fill_(-math.log((1 - PRIOR_PROB) / PRIOR_PROB))
            self.reg_pred.weight.normal_(0.0, 0.01, generator=g)
            self.reg_pred.bias.zero_()

    def forward(self, pyramid: Pyramid) -> LevelOutputs:
        c = self.config.fpn_channels
        outs = []
        for x, stride in zip(pyramid, self.config.pyramid_strides):
            if x.shape[1] != c:
                raise ValueError(f"head expects {c} channels, got {x.shape[1]}")
            for conv in self.tower:
                # Bias-free and affine-free so an all-zero input maps to zero.
                x = F.relu(F.group_norm(conv(x), _groups(c)))
            logits = self.cls_pred(x)
            dist = stride * torch.exp(self.reg_pred(x).clamp(max=MAX_LOG_DISTANCE))
            outs.append((logits, dist))
        return outs


def build_backbone(config: DetectorConfig, seed: int, tag: str = "backbone") -> Backbone:
    m = Backbone(config)
    m.reset_parameters(generator(seed, tag))
    return m


def build_head(config: DetectorConfig, seed: int, tag: str = "head") -> Head:
    m = Head(config)
    m.reset_parameters(generator(seed, tag))
    return m


def backbone_forward(backbone: Backbone, images: torch.Tensor) -> Pyramid:
    """``images``: (N, 3, H, W), or a single (H, W, 3) array."""
    x = torch.as_tensor(images, dtype=backbone.stem.weight.dtype)
    if x.dim() == 3:
        x = x.permute(2, 0, 1).unsqueeze(0)
    return backbone(x)


def head_forward(head: Head, pyramid: Pyramid) -> LevelOutputs:
    return head(pyramid)


# --- target assignment -------------------------------------------------------


def locations(height: int, width: int, strides: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    """Location centers (L, 2) in (x, y) pixels, concatenated over levels, and level index (L,)."""
    pts, lvl = [], []
    for k, s in enumerate(strides):
        ys = (torch.arange(height // s, dtype=torch.float64) + 0.5) * s
        xs = (torch.arange(width // s, dtype=torch.float64) + 0.5) * s
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pts.append(torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1))
        lvl.append(torch.full((xx.numel(),), k, dtype=torch.long))
    return torch.cat(pts), torch.cat(lvl)


def assign_targets(
    annotations: Sequence[Annotation],
    height: int,
    width: int,
    pyramid_strides: Sequence[int] = (8, 16, 32),
    level_ranges: Sequence[tuple[float, float]] = DEFAULT_LEVEL_RANGES,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-location class target (-1 = background), (l, t, r, b) target, positive mask.

    A location is positive for a box if it lies strictly inside it and max(l, t, r, b)
    falls in (lo, hi] of the location's level; ties go to the smallest-area box.
    """
    pts, lvl = locations(height, width, pyramid_strides)
    n = pts.shape[0]
    cls_t = torch.full((n,), -1, dtype=torch.long)
    reg_t = torch.zeros((n, 4), dtype=torch.float64)
    if not annotations:
        return cls_t, reg_t, torch.zeros(n, dtype=torch.bool)
    boxes = torch.tensor([a.box() for a in annotations], dtype=torch.float64)
    classes = torch.tensor([a.class_id for a in annotations], dtype=torch.long)
    ranges = torch.tensor(level_ranges, dtype=torch.float64)[lvl]
    x, y = pts[:, 0:1], pts[:, 1:2]
    ltrb = torch.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], dim=2)
    inside = ltrb.min(dim=2).values > 0
    m = ltrb.max(dim=2).values
    in_range = (m > ranges[:, 0:1]) & (m <= ranges[:, 1:2])
    areas = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).expand(n, -1)
    areas = torch.where(inside & in_range, areas, torch.full_like(areas, math.inf))
    best_area, best = areas.min(dim=1)
    pos = torch.isfinite(best_area)
    cls_t[pos] = classes[best[pos]]
    reg_t[pos] = ltrb[pos, best[pos]]
    return cls_t, reg_t, pos


def batch_targets(
    annotations: Sequence[Sequence[Annotation]], height: int, width: int, config: DetectorConfig
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    out = [assign_targets(a, height, width, config.pyramid_strides, config.level_ranges) for a in annotations]
    return tuple(torch.stack(t) for t in zip(*out))  # type: ignore[return-value]


# --- loss ---------------------------------------------------------------------


def flatten_outputs(outputs: LevelOutputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-level maps -> logits (N, L, C) and distances (N, L, 4), level-major order."""
    logits = torch.cat([lg.flatten(2).transpose(1, 2) for lg, _ in outputs], dim=1)
    dists = torch.cat([d.flatten(2).transpose(1, 2) for _, d in outputs], dim=1)
    return logits, dists


def focal_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Summed sigmoid focal loss; ``targets`` is one-hot with the same shape as ``logits``."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = FOCAL_ALPHA * targets + (1 - FOCAL_ALPHA) * (1 - targets)
    return (alpha_t * ce * (1 - p_t) ** FOCAL_GAMMA).sum()


def giou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Summed 1 - GIoU for boxes given as (l, t, r, b) distances from a shared point."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    area_p = (pl + pr) * (pt + pb)
    area_t = (tl + tr) * (tt + tb)
    inter = (torch.minimum(pl, tl) + torch.minimum(pr, tr)) * (torch.minimum(pt, tt) + torch.minimum(pb, tb))
    union = area_p + area_t - inter
    enclose = (torch.maximum(pl, tl) + torch.maximum(pr, tr)) * (torch.maximum(pt, tt) + torch.maximum(pb, tb))
    giou = inter / union - (enclose - union) / enclose
    return (1 - giou).sum()


def detection_loss_terms(
    outputs: LevelOutputs, targets: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    logits, dists = flatten_outputs(outputs)
    cls_t, reg_t, pos = targets
    if torch.isnan(logits).any() or torch.isnan(dists).any():
        raise FloatingPointError("NaN in detection predictions")
    if logits.shape[:2] != cls_t.shape:
        raise ValueError(f"prediction/target shape mismatch: {tuple(logits.shape[:2])} vs {tuple(cls_t.shape)}")
    onehot = torch.zeros_like(logits)
    onehot[pos] = F.one_hot(cls_t[pos], logits.shape[-1]).to(logits.dtype)
    norm = max(1.0, float(pos.sum()))
    cls_loss = focal_loss(logits, onehot) / norm
    if pos.any():
        reg_loss = giou_loss(dists[pos], reg_t[pos].to(dists.dtype)) / norm
    else:
        reg_loss = dists.sum() * 0.0
    return cls_loss, reg_loss


def detection_loss(outputs: LevelOutputs, targets) -> torch.Tensor:
    cls_loss, reg_loss = detection_loss_terms(outputs, targets)
    return cls_loss + reg_loss


# --- decoding -------------------------------------------------------------------


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of (x0, y0, x1, y1) boxes, (A, 4) x (B, 4) -> (A, B); 0 where union is 0."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def nms(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou_thresh: float) -> torch.Tensor:
    """Per-class greedy NMS; returns kept indices by descending score.

    A box is suppressed when its IoU with a kept same-class box is >= ``iou_thresh``.
    """
    order = torch.sort(scores, descending=True, stable=True).indices
    suppressed = torch.zeros(len(scores), dtype=torch.bool)
    keep = []
    for i in order.tolist():
        if suppressed[i]:
            continue
        keep.append(i)
        same = classes == classes[i]
        ious = box_iou(boxes[i : i + 1], boxes)[0]
        suppressed |= same & (ious >= iou_thresh)
    return torch.tensor(keep, dtype=torch.long)


@torch.no_grad()
def decode_detections(
    outputs: LevelOutputs,
    height: int,
    width: int,
    score_thresh: float = 0.05,
    nms_iou: float = 0.6,
    max_dets: int = 100,
    pre_nms_top_k: int = 1000,
) -> list[list[Detection]]:
    """Threshold, per-class greedy NMS, keep the ``max_dets`` best per image."""
    strides = [height // lg.shape[-2] for lg, _ in outputs]
    pts, lvl = locations(height, width, strides)
    logits, dists = flatten_outputs(outputs)
    results = []
    for b in range(logits.shape[0]):
        scores_all = torch.sigmoid(logits[b].double())
        d = dists[b].double()
        boxes_l, scores_l, classes_l = [], [], []
        for k in range(len(outputs)):
            sel = lvl == k
            sc = scores_all[sel]
            loc_idx, cls_idx = torch.nonzero(sc > score_thresh, as_tuple=True)
            s = sc[loc_idx, cls_idx]
            if s.numel() > pre_nms_top_k:
                s, top = s.topk(pre_nms_top_k)
                loc_idx, cls_idx = loc_idx[top], cls_idx[top]
            p = pts[sel][loc_idx]
            dd = d[sel][loc_idx]
            bx = torch.stack([p[:, 0] - dd[:, 0], p[:, 1] - dd[:, 1], p[:, 0] + dd[:, 2], p[:, 1] + dd[:, 3]], 1)
            boxes_l.append(bx)
            scores_l.append(s)
            classes_l.append(cls_idx)
        boxes = torch.cat(boxes_l)
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, width)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, height)
        scores = torch.cat(scores_l)
        classes = torch.cat(classes_l)
        keep = nms(boxes, scores, classes, nms_iou)[:max_dets]
        results.append(
            [
                Detection(int(classes[i]), float(scores[i]), *(float(v) for v in boxes[i]))
                for i in keep.tolist()
            ]
        )
    return results
