"""Command-line entry point.

    labelenc gen-data --config c.json --out data/
    labelenc train-step1 --config c.json --out runs/s1
    labelenc train-step2 --config c.json --out runs/s2   # needs paths.step1_checkpoint
    labelenc eval --config c.json

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError
from .codec import AnnotationError, Annotation, render_labels
from .config import ConfigError, RunConfig, desk_config, load_config
from .datasets import Dataset, DatasetError, collate, generate_synthetic, load_coco_json, save_dataset
from .detector import Detection
from .evaluation import evaluate
from .pipeline import (
    load_detector,
    load_step1,
    predict,
    save_detector,
    save_step1,
    train_baseline,
    train_step1,
    train_step2,
)
from .viz import DEFAULT_LEVEL, viz_feature_intensity, viz_label_channels

log = logging.getLogger("labelenc")

VALIDATION_ERRORS = (ConfigError, DatasetError, AnnotationError, CheckpointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (sections: data, encoder, detector, train, paths)")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--preset", choices=["desk", "full"], default="desk", help="defaults the config file overrides")

    parser = _Parser(prog="labelenc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="generate synthetic train/val sets")
    sub.add_parser("train-baseline", parents=[common], help="train a detector on L_det only")
    sub.add_parser("train-step1", parents=[common], help="learn the label encoder (Step 1)")
    sub.add_parser("train-step2", parents=[common], help="train a detector with label-encoder supervision")
    sub.add_parser("eval", parents=[common], help="mmAP of a detector checkpoint or a predictions file")
    p = sub.add_parser("viz-labels", parents=[common], help="dump label-map channels as grayscale images")
    p.add_argument("--count", type=int, default=4)
    p = sub.add_parser("viz-features", parents=[common], help="feature-intensity images of pyramid levels")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--level", type=int, default=DEFAULT_LEVEL)
    return parser


def effective_config(args) -> RunConfig:
    base = desk_config() if args.preset == "desk" else RunConfig()
    cfg = load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.validate()
    return cfg


def _dataset(cfg: RunConfig, key: str, split: str) -> Dataset:
    path = getattr(cfg.paths, key)
    if path is None:
        d = cfg.data
        n = d.num_train if split == "train" else d.num_val
        log.info("paths.%s unset; generating %d synthetic %s images", key, n, split)
        return generate_synthetic(
            n, d.image_size, d.num_classes, (d.min_objects, d.max_objects), d.seed, d.min_box_size, d.max_box_size, split
        )
    p = Path(path)
    ann = p / "annotations.json" if p.is_dir() else p
    return load_coco_json(ann, ann.parent, min_size=cfg.data.coco_min_size, split=split)


def _require(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg.paths, key)
    if value is None:
        raise ConfigError(f"missing required config key: paths.{key}")
    return value


def _write_eval(report, out: Path) -> None:
    text = report.to_text()
    (out / "metrics.txt").write_text(text)
    sys.stdout.write(text)


def _coco_detections(pred_path: Path, gt_path: Path) -> tuple[list, list, list[str]]:
    gt = json.loads(gt_path.read_text())
    preds = json.loads(pred_path.read_text())
    cats = sorted(gt["categories"], key=lambda c: c["id"])
    cat_index = {c["id"]: k for k, c in enumerate(cats)}
    order = [img["id"] for img in gt["images"]]
    pos = {img_id: i for i, img_id in enumerate(order)}
    gts: list[list[Annotation]] = [[] for _ in order]
    for a in gt.get("annotations", []):
        x, y, w, h = a["bbox"]
        if w > 0 and h > 0:
            gts[pos[a["image_id"]]].append(Annotation(cat_index[a["category_id"]], x, y, x + w, y + h))
    dets: list[list[Detection]] = [[] for _ in order]
    for r in preds:
        if r["image_id"] not in pos or r["category_id"] not in cat_index:
            raise DatasetError(f"image {r.get('image_id')}: prediction refers to unknown image or category")
        x, y, w, h = r["bbox"]
        dets[pos[r["image_id"]]].append(Detection(cat_index[r["category_id"]], float(r["score"]), x, y, x + w, y + h))
    for d in dets:
        d.sort(key=lambda t: -t.score)
    return dets, gts, [c.get("name", str(c["id"])) for c in cats]


def run(args) -> None:
    cfg = effective_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    cmd = args.command

    if cmd == "gen-data":
        for split in ("train", "val"):
            key = "dataset" if split == "train" else "val_dataset"
            cfg.paths.__setattr__(key, None)
            save_dataset(_dataset(cfg, key, split), out / split)
        log.info("wrote %s and %s", out / "train", out / "val")
        return

    if cmd in ("train-baseline", "train-step1", "train-step2"):
        train = _dataset(cfg, "dataset", "train")
        if cmd == "train-step1":
            s1 = train_step1(train, cfg, snapshot_dir=out)
            save_step1(s1, cfg, out / "step1.ckpt")
            s1.history.write_jsonl(out / "losses.jsonl")
            return
        if cmd == "train-baseline":
            det = train_baseline(train, cfg, snapshot_dir=out)
        else:
            s1 = load_step1(_require(cfg, "step1_checkpoint"), cfg)
            det = train_step2(train, s1, cfg, snapshot_dir=out)
        save_detector(det, cfg, out / "detector.ckpt", kind=cmd)
        det.history.write_jsonl(out / "losses.jsonl")
        if cfg.paths.val_dataset is not None:
            val = _dataset(cfg, "val_dataset", "val")
            dets = predict(det.backbone, det.head, val, cfg.detector, stats=train.channel_stats())
            _write_eval(evaluate(dets, [s.annotations for s in val], val.manifest.class_names), out)
        return

    if cmd == "eval":
        if cfg.paths.predictions is not None:
            dets, gts, names = _coco_detections(Path(cfg.paths.predictions), Path(_require(cfg, "ground_truth")))
        else:
            det = load_detector(_require(cfg, "detector_checkpoint"), cfg)
            val = _dataset(cfg, "val_dataset", "val")
            stats = _dataset(cfg, "dataset", "train").channel_stats()
            dets = predict(det.backbone, det.head, val, cfg.detector, stats=stats)
            gts, names = [s.annotations for s in val], val.manifest.class_names
        _write_eval(evaluate(dets, gts, names), out)
        return

    ds = _dataset(cfg, "val_dataset", "val")
    samples = ds.samples[: args.count]
    if cmd == "viz-labels":
        for s in samples:
            viz_label_channels(render_labels(s.annotations, ds.num_classes, s.height, s.width), out / "labels", s.id)
        return

    if cmd == "viz-features":
        stats = ds.channel_stats()
        batch = collate(samples, *stats, ds.num_classes, render=True)
        with torch.no_grad():
            if cfg.paths.detector_checkpoint is not None:
                det = load_detector(cfg.paths.detector_checkpoint, cfg)
                feats = det.backbone(batch.images)[args.level]
                for s, f in zip(samples, feats):
                    viz_feature_intensity(f, out / "features" / f"{s.id}_backbone.png")
            if cfg.paths.step1_checkpoint is not None:
                s1 = load_step1(cfg.paths.step1_checkpoint, cfg)
                feats = s1.encoder(batch.labels)[args.level]
                for s, f in zip(samples, feats):
                    viz_feature_intensity(f, out / "features" / f"{s.id}_encoder.png")
            if cfg.paths.detector_checkpoint is None and cfg.paths.step1_checkpoint is None:
                raise ConfigError("viz-features needs paths.detector_checkpoint or paths.step1_checkpoint")
        return


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    try:
        run(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
