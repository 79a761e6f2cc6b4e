"""Training procedures: plain detector baseline, Step 1 (label AutoEncoder with auxiliary
detector), Step 2 (detector under frozen label-encoder supervision)."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import torch
from torch import nn

from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import DetectorConfig, RunConfig, TrainConfig, config_hash
from .datasets import Batch, Dataset, infinite_batches
from .detector import Backbone, Head, batch_targets, build_backbone, build_head, decode_detections, detection_loss
from .distance import AdaptationPyramid, build_adaptation, distance_loss
from .encoder import LabelEncoder, build_encoder
from .nn import derive_seed, freeze, trainable_parameters

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class LossHistory:
    records: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, it: int, name: str, value: float) -> None:
        self.records.append((it, name, value))

    def series(self, name: str) -> list[float]:
        return [v for _, n, v in self.records if n == name]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for it, name, value in self.records:
                f.write(json.dumps({"iteration": it, "loss": name, "value": value}) + "\n")


@dataclass
class TrainedDetector:
    backbone: Backbone
    head: Head
    history: LossHistory


@dataclass
class Step1Output:
    encoder: LabelEncoder
    head: Head
    history: LossHistory
    # Auxiliary detector (theta'_f, shared head), kept only on request for the Step1-only ablation.
    auxiliary: TrainedDetector | None = None


# --- schedule -------------------------------------------------------------------------


def lr_boundaries(total: int, decay_points: tuple[float, float], offset: int = 0) -> tuple[int, int]:
    return tuple(offset + int(round(p * total)) for p in decay_points)  # type: ignore[return-value]


def lr_at(it: int, base_lr: float, boundaries: tuple[int, ...]) -> float:
    """Step decay: lr / 10**k after k boundaries."""
    return base_lr / 10 ** sum(it >= b for b in boundaries)


def step1_length(cfg: TrainConfig) -> tuple[int, int]:
    """(warmup iterations without L3, total Step-1 iterations); warmup is on top of total_iters."""
    warmup = int(round(cfg.step1_warmup_frac * cfg.total_iters))
    return warmup, warmup + cfg.total_iters


def step2_aux_stop(cfg: TrainConfig) -> int:
    """First iteration without the auxiliary distance loss."""
    return cfg.total_iters - int(round(cfg.step2_aux_drop_frac * cfg.total_iters))


def make_optimizer(modules: list[nn.Module], cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        trainable_parameters(*modules), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )


# --- losses with explicit gradient routing ---------------------------------------------


def step1_losses(
    encoder: LabelEncoder,
    head: Head,
    backbone: Backbone | None,
    adapt: AdaptationPyramid | None,
    batch: Batch,
    det_cfg: DetectorConfig,
    use_l2: bool = True,
    use_l3: bool = True,
) -> dict[str, torch.Tensor]:
    """L1 = L_det(d(h(y)), y); L2 = L_det(d(f(I)), y); L3 = L_dis(f(I), sg[h(y)]).

    The same ``head`` serves L1 and L2. L3 sees the encoder output detached.
    """
    H, W = batch.images.shape[-2:]
    targets = batch_targets(batch.annotations, H, W, det_cfg)
    x_h = encoder(batch.labels)
    losses = {"L1": detection_loss(head(x_h), targets)}
    if use_l2 or use_l3:
        x_f = backbone(batch.images)
        if use_l2:
            losses["L2"] = detection_loss(head(x_f), targets)
        if use_l3:
            losses["L3"] = distance_loss(x_f, [x.detach() for x in x_h], adapt)
    return losses


def step2_losses(
    backbone: Backbone,
    head: Head,
    encoder: LabelEncoder | None,
    adapt: AdaptationPyramid | None,
    batch: Batch,
    det_cfg: DetectorConfig,
    use_aux: bool,
) -> dict[str, torch.Tensor]:
    """L_det on the detector; optional L_dis against the frozen encoder (no gradient to it)."""
    H, W = batch.images.shape[-2:]
    targets = batch_targets(batch.annotations, H, W, det_cfg)
    x_f = backbone(batch.images)
    losses = {"det": detection_loss(head(x_f), targets)}
    if use_aux:
        with torch.no_grad():
            x_h = encoder(batch.labels)
        losses["dis"] = distance_loss(x_f, x_h, adapt)
    return losses


# --- training loop --------------------------------------------------------------------


def _snapshot(snapshot_dir, stores, it, cfg: TrainConfig) -> None:
    if snapshot_dir is None:
        return
    path = Path(snapshot_dir) / f"diverged_iter{it}.ckpt"
    save_checkpoint(stores, {"iteration": it, "reason": "non-finite loss", "train": cfg.__dict__}, path)
    log.error("wrote diagnostic snapshot %s", path)


def _optimize(
    stores: dict[str, nn.Module],
    batches: Iterator[Batch],
    cfg: TrainConfig,
    total: int,
    boundaries: tuple[int, ...],
    loss_fn,
    history: LossHistory,
    snapshot_dir=None,
    weights: dict[str, float] | None = None,
) -> None:
    """Shared SGD loop. ``loss_fn(it, batch)`` returns named terms; the total is their weighted sum."""
    weights = weights or {}
    modules = list(stores.values())
    opt = make_optimizer(modules, cfg)
    params = [p for g in opt.param_groups for p in g["params"]]
    for m in modules:
        m.train()
    for it in range(total):
        batch = next(batches)
        for g in opt.param_groups:
            g["lr"] = lr_at(it, cfg.lr, boundaries)
        try:
            terms = loss_fn(it, batch)
        except FloatingPointError as e:
            _snapshot(snapshot_dir, stores, it, cfg)
            raise TrainingDiverged(f"iteration {it}: {e}") from e
        loss = sum(weights.get(k, 1.0) * v for k, v in terms.items())
        values = {k: float(v.detach()) for k, v in terms.items()}
        values["total"] = float(loss.detach())
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            _snapshot(snapshot_dir, stores, it, cfg)
            raise TrainingDiverged(f"iteration {it}: non-finite {bad[0]} = {values[bad[0]]}")
        if it % cfg.log_every == 0 or it == total - 1:
            for k, v in values.items():
                history.add(it, k, v)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.clip_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad_norm)
        opt.step()
    for m in modules:
        m.eval()


def _batches(dataset: Dataset, cfg: TrainConfig, render: bool, augment_prob: float = 0.5, per_box: bool = True):
    return infinite_batches(
        dataset,
        cfg.batch_size,
        cfg.data_seed,
        render=render,
        aug_seed=cfg.aug_seed if render else None,
        augment_prob=augment_prob,
        augment_per_box=per_box,
        stats=dataset.channel_stats(),
    )


def train_baseline(dataset: Dataset, config: RunConfig, snapshot_dir=None) -> TrainedDetector:
    """Detector trained on L_det alone."""
    config.validate()
    cfg, det_cfg = config.train, config.detector
    backbone = build_backbone(det_cfg, cfg.param_seed, "backbone")
    head = build_head(det_cfg, cfg.param_seed, "head")
    history = LossHistory()

    def loss_fn(it, batch):
        return step2_losses(backbone, head, None, None, batch, det_cfg, use_aux=False)

    boundaries = lr_boundaries(cfg.total_iters, cfg.lr_decay_points)
    stores = {"backbone": backbone, "head": head}
    _optimize(stores, _batches(dataset, cfg, render=False), cfg, cfg.total_iters, boundaries, loss_fn, history, snapshot_dir)
    return TrainedDetector(backbone, head, history)


def train_step1(dataset: Dataset, config: RunConfig, snapshot_dir=None, keep_auxiliary: bool = False) -> Step1Output:
    """Joint L1 + lam1*L2 + lam2*L3 with a shared head; L3 enters after the warmup."""
    config.validate()
    cfg, det_cfg = config.train, config.detector
    seed = cfg.param_seed
    encoder = build_encoder(config.encoder, derive_seed(seed, "step1/encoder"))
    head = build_head(det_cfg, seed, "step1/head")
    recon_only = cfg.step1_reconstruction_only
    stores: dict[str, nn.Module] = {"encoder": encoder, "head": head}
    backbone = adapt = None
    if not recon_only:
        backbone = build_backbone(det_cfg, seed, "step1/backbone")
        adapt = build_adaptation(det_cfg.fpn_channels, len(det_cfg.pyramid_strides), seed, "step1/adapt")
        stores.update(backbone=backbone, adapt=adapt)
    warmup, total = step1_length(cfg)
    history = LossHistory()

    def loss_fn(it, batch):
        return step1_losses(
            encoder, head, backbone, adapt, batch, det_cfg, use_l2=not recon_only, use_l3=not recon_only and it >= warmup
        )

    boundaries = lr_boundaries(cfg.total_iters, cfg.lr_decay_points, offset=warmup)
    batches = _batches(dataset, cfg, True, config.data.augment_prob, config.data.augment_per_box)
    _optimize(stores, batches, cfg, total, boundaries, loss_fn, history, snapshot_dir, {"L2": cfg.lam1, "L3": cfg.lam2})
    # The auxiliary backbone and adaptation nets are discarded unless asked for.
    aux = None
    if keep_auxiliary and backbone is not None:
        aux = TrainedDetector(backbone, copy.deepcopy(head), history)
    return Step1Output(encoder, head, history, aux)


def check_step1_compatible(step1: Step1Output, config: RunConfig) -> None:
    ref_enc = LabelEncoder(config.encoder)
    ref_head = Head(config.detector)
    for name, ref, got in (("encoder", ref_enc, step1.encoder), ("head", ref_head, step1.head)):
        got_state = got.state_dict()
        for k, t in ref.state_dict().items():
            if k not in got_state:
                raise CheckpointError(f"Step-1 {name} lacks array {k}")
            if got_state[k].shape != t.shape:
                raise CheckpointError(
                    f"Step-1 {name} array {k}: shape {tuple(got_state[k].shape)} != expected {tuple(t.shape)}"
                )


def train_step2(
    dataset: Dataset, step1: Step1Output, config: RunConfig, snapshot_dir=None, history_out: list | None = None
) -> TrainedDetector:
    """Detector training with frozen-encoder supervision and/or head init from Step 1."""
    config.validate()
    cfg, det_cfg = config.train, config.detector
    check_step1_compatible(step1, config)
    backbone = build_backbone(det_cfg, cfg.param_seed, "backbone")
    if cfg.step2_use_head_init:
        head = copy.deepcopy(step1.head)
        head.frozen = False
        for p in head.parameters():
            p.requires_grad_(True)
    else:
        head = build_head(det_cfg, cfg.param_seed, "head")
    stores: dict[str, nn.Module] = {"backbone": backbone, "head": head}
    encoder = adapt = None
    use_sup = cfg.step2_use_supervision
    if use_sup:
        encoder = freeze(step1.encoder)
        encoder.eval()
        adapt = build_adaptation(det_cfg.fpn_channels, len(det_cfg.pyramid_strides), cfg.param_seed, "step2/adapt")
        stores["adapt"] = adapt
    stop = step2_aux_stop(cfg)
    history = LossHistory()

    def loss_fn(it, batch):
        return step2_losses(backbone, head, encoder, adapt, batch, det_cfg, use_aux=use_sup and it < stop)

    boundaries = lr_boundaries(cfg.total_iters, cfg.lr_decay_points)
    batches = _batches(dataset, cfg, use_sup, config.data.augment_prob, config.data.augment_per_box)
    _optimize(stores, batches, cfg, cfg.total_iters, boundaries, loss_fn, history, snapshot_dir, {"dis": cfg.lam})
    # Encoder and adaptation nets are not part of the returned detector.
    return TrainedDetector(backbone, head, history)


# --- inference --------------------------------------------------------------------------


@torch.no_grad()
def predict(backbone: Backbone, head: Head, dataset: Dataset, det_cfg: DetectorConfig, stats=None, batch_size: int = 32):
    """Detections for every sample, in dataset order."""
    from .datasets import collate

    mean, std = stats if stats is not None else dataset.channel_stats()
    backbone.eval()
    head.eval()
    out = []
    for start in range(0, len(dataset), batch_size):
        batch = collate(dataset.samples[start : start + batch_size], mean, std, dataset.num_classes)
        H, W = batch.images.shape[-2:]
        outputs = head(backbone(batch.images))
        out.extend(decode_detections(outputs, H, W, det_cfg.score_thresh, det_cfg.nms_iou, det_cfg.max_dets))
    return out


@torch.no_grad()
def reconstruct(encoder: LabelEncoder, head: Head, dataset: Dataset, det_cfg: DetectorConfig, score_thresh=None, batch_size: int = 32):
    """Decode d(h(y)) for un-augmented label maps of every sample."""
    from .datasets import collate

    mean, std = dataset.channel_stats()
    encoder.eval()
    head.eval()
    out = []
    thresh = det_cfg.score_thresh if score_thresh is None else score_thresh
    for start in range(0, len(dataset), batch_size):
        batch = collate(dataset.samples[start : start + batch_size], mean, std, dataset.num_classes, render=True)
        H, W = batch.labels.shape[-2:]
        outputs = head(encoder(batch.labels))
        out.extend(decode_detections(outputs, H, W, thresh, det_cfg.nms_iou, det_cfg.max_dets))
    return out


# --- persistence ----------------------------------------------------------------------------


def _metadata(config: RunConfig, kind: str, iteration: int) -> dict:
    t = config.train
    return {
        "kind": kind,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
        "iteration": iteration,
        "seeds": {"param": t.param_seed, "data": t.data_seed, "augment": t.aug_seed},
    }


def save_step1(step1: Step1Output, config: RunConfig, path) -> Path:
    _, total = step1_length(config.train)
    return save_checkpoint({"encoder": step1.encoder, "head": step1.head}, _metadata(config, "step1", total), path)


def load_step1(path, config: RunConfig) -> Step1Output:
    arrays, meta = load_checkpoint(path, expected_config_hash=config_hash(config))
    if meta.get("kind") != "step1":
        raise CheckpointError(f"{path}: not a Step-1 checkpoint (kind={meta.get('kind')})")
    encoder = LabelEncoder(config.encoder)
    head = Head(config.detector)
    load_into({"encoder": encoder, "head": head}, arrays)
    return Step1Output(encoder, head, LossHistory())


def save_detector(det: TrainedDetector, config: RunConfig, path, kind: str = "detector") -> Path:
    return save_checkpoint({"backbone": det.backbone, "head": det.head}, _metadata(config, kind, config.train.total_iters), path)


def load_detector(path, config: RunConfig) -> TrainedDetector:
    arrays, _ = load_checkpoint(path, expected_config_hash=config_hash(config))
    backbone = Backbone(config.detector)
    head = Head(config.detector)
    load_into({"backbone": backbone, "head": head}, arrays)
    return TrainedDetector(backbone, head, LossHistory())

