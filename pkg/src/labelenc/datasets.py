"""Synthetic shape datasets, COCO-format ingestion and persistence, deterministic batching."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .codec import Annotation, AnnotationError, augment_labels, clip_annotations, draw_box_scales

log = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 50


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    annotations: list[Annotation]
    id: str

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetManifest:
    split: str
    num_samples: int
    num_classes: int
    class_names: list[str]
    image_size: tuple[int, int] | None  # (H, W) when all images share it
    source: str  # "synthetic:seed=<n>" or the annotation path


@dataclass
class Dataset:
    samples: list[Sample]
    manifest: DatasetManifest
    _stats: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def num_classes(self) -> int:
        return self.manifest.num_classes

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and std over every pixel of every image."""
        if self._stats is None:
            s = np.zeros(3)
            ss = np.zeros(3)
            n = 0
            for smp in self.samples:
                px = smp.image.reshape(-1, 3).astype(np.float64)
                s += px.sum(0)
                ss += (px**2).sum(0)
                n += px.shape[0]
            mean = s / max(n, 1)
            std = np.sqrt(np.maximum(ss / max(n, 1) - mean**2, 1e-12))
            self._stats = (mean.astype(np.float32), std.astype(np.float32))
        return self._stats

    def subset(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        samples = [self.samples[i] for i in indices]
        m = self.manifest
        manifest = DatasetManifest(split or m.split, len(samples), m.num_classes, m.class_names, m.image_size, m.source)
        return Dataset(samples, manifest)


# --- synthetic generation -----------------------------------------------------------

_PATTERNS = ("hstripes", "vstripes", "checker")


def class_names(num_classes: int) -> list[str]:
    names = []
    for k in range(num_classes):
        shape = "rectangle" if k % 2 == 0 else "ellipse"
        names.append(shape if k < 2 else f"{shape}_{_PATTERNS[((k - 2) // 2) % len(_PATTERNS)]}")
    return names


def _shape_mask(k: int, h: int, w: int) -> np.ndarray:
    if k % 2 == 0:
        return np.ones((h, w), dtype=bool)
    yy = (np.arange(h) + 0.5 - h / 2) / (h / 2)
    xx = (np.arange(w) + 0.5 - w / 2) / (w / 2)
    return yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0


def _pattern(k: int, h: int, w: int) -> np.ndarray:
    """1 where the object colour is drawn, 0 where the secondary colour is."""
    if k < 2:
        return np.ones((h, w), dtype=bool)
    name = _PATTERNS[((k - 2) // 2) % len(_PATTERNS)]
    yy, xx = np.mgrid[0:h, 0:w]
    if name == "hstripes":
        return (yy // 3) % 2 == 0
    if name == "vstripes":
        return (xx // 3) % 2 == 0
    return ((yy // 3) + (xx // 3)) % 2 == 0


def _contrasting_colour(rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    while True:
        c = rng.uniform(0.0, 1.0, 3)
        if np.abs(c - background).mean() > 0.3:
            return c


def _try_generate(rng, image_size, num_classes, n_obj, min_box, max_box):
    bg = rng.uniform(0.2, 0.8, 3)
    img = np.broadcast_to(bg, (image_size, image_size, 3)).copy()
    anns: list[Annotation] = []
    occupied = np.zeros((image_size, image_size), dtype=bool)
    for _ in range(n_obj):
        k = int(rng.integers(num_classes))
        for _ in range(MAX_PLACEMENT_TRIES):
            w = int(rng.integers(min_box, max_box + 1))
            h = int(rng.integers(min_box, max_box + 1))
            x0 = int(rng.integers(0, image_size - w + 1))
            y0 = int(rng.integers(0, image_size - h + 1))
            # Keep a 2 px gap so tight boxes are never occluded.
            if not occupied[max(y0 - 2, 0) : y0 + h + 2, max(x0 - 2, 0) : x0 + w + 2].any():
                break
        else:
            return None
        mask = _shape_mask(k, h, w)
        pat = _pattern(k, h, w)
        fg = _contrasting_colour(rng, bg)
        fg2 = _contrasting_colour(rng, bg)
        colour = np.where(pat[..., None], fg, fg2)
        region = img[y0 : y0 + h, x0 : x0 + w]
        region[mask] = colour[mask]
        occupied[y0 : y0 + h, x0 : x0 + w] = True
        rows = np.nonzero(mask.any(1))[0]
        cols = np.nonzero(mask.any(0))[0]
        anns.append(
            Annotation(k, float(x0 + cols[0]), float(y0 + rows[0]), float(x0 + cols[-1] + 1), float(y0 + rows[-1] + 1))
        )
    img = img + rng.normal(0.0, 0.06, img.shape)
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return pixels, anns


def generate_synthetic(
    num_images: int,
    image_size: int = 128,
    num_classes: int = 2,
    objects_per_image: tuple[int, int] = (1, 4),
    seed: int = 0,
    min_box: int = 12,
    max_box: int = 72,
    split: str = "train",
) -> Dataset:
    """Filled shapes on noisy backgrounds; boxes are the shapes' tight pixel bounds.

    Image ``i`` depends only on (seed, split, i), so prefixes of larger datasets agree.
    """
    if image_size % 32:
        raise DatasetError(f"image_size must be divisible by 32, got {image_size}")
    if num_classes < 1:
        raise DatasetError("num_classes must be >= 1")
    lo, hi = objects_per_image
    split_key = int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little")
    samples = []
    for i in range(num_images):
        rng = np.random.default_rng([seed, split_key, i])
        while True:
            n_obj = int(rng.integers(lo, hi + 1))
            out = _try_generate(rng, image_size, num_classes, n_obj, min_box, max_box)
            if out is not None:
                break
        pixels, anns = out
        samples.append(Sample(pixels.astype(np.float32) / 255.0, anns, f"{split}-{i:06d}"))
    manifest = DatasetManifest(
        split, num_images, num_classes, class_names(num_classes), (image_size, image_size), f"synthetic:seed={seed}"
    )
    return Dataset(samples, manifest)


# --- COCO json ----------------------------------------------------------------------


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write PNG images plus ``annotations.json`` in COCO schema; manifest goes under "info"."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for idx, s in enumerate(dataset.samples):
        fname = f"images/{s.id}.png"
        pixels = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(directory / fname)
        images.append({"id": idx + 1, "file_name": fname, "width": s.width, "height": s.height})
        for a in s.annotations:
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": idx + 1,
                    "category_id": a.class_id + 1,
                    "bbox": [a.x_min, a.y_min, a.width, a.height],
                    "area": a.area,
                    "iscrowd": 0,
                }
            )
    categories = [{"id": k + 1, "name": n} for k, n in enumerate(dataset.manifest.class_names)]
    doc = {
        "info": {"manifest": asdict(dataset.manifest)},
        "images": images,
        "annotations": annotations,
        "categories": categories,
    }
    path = directory / "annotations.json"
    path.write_text(json.dumps(doc))
    return path


def _resize(image: np.ndarray, anns: list[Annotation], min_size: int) -> tuple[np.ndarray, list[Annotation]]:
    h, w = image.shape[:2]
    scale = min_size / min(h, w)
    if scale == 1.0:
        return image, anns
    nh, nw = int(round(h * scale)), int(round(w * scale))
    pil = Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8))
    out = np.asarray(pil.resize((nw, nh), Image.BILINEAR), dtype=np.float32) / 255.0
    sx, sy = nw / w, nh / h
    scaled = [Annotation(a.class_id, a.x_min * sx, a.y_min * sy, a.x_max * sx, a.y_max * sy) for a in anns]
    return out, clip_annotations(scaled, nh, nw)


def load_coco_json(
    annotation_path: str | Path, image_root: str | Path | None = None, min_size: int | None = None, split: str = "coco"
) -> Dataset:
    """Load a COCO-schema annotation file.

    Boxes become corner form, category ids are densified to [0, C) in ascending id order,
    and when ``min_size`` is given each image is resized so its shorter edge equals it.
    Padding to multiples of 32 happens at batching time, after normalization.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root) if image_root is not None else annotation_path.parent
    try:
        doc = json.loads(annotation_path.read_text())
        cats = sorted(doc["categories"], key=lambda c: c["id"])
        images = doc["images"]
        anns = doc.get("annotations", [])
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"{annotation_path}: malformed COCO file ({e})") from e
    cat_index = {c["id"]: k for k, c in enumerate(cats)}
    per_image: dict = {img.get("id"): [] for img in images}
    for rec in anns:
        image_id = rec.get("image_id")
        try:
            x, y, w, h = (float(v) for v in rec["bbox"])
            k = cat_index[rec["category_id"]]
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"image {image_id}: malformed annotation record {rec.get('id')} ({e})") from e
        if image_id not in per_image:
            raise DatasetError(f"image {image_id}: annotation {rec.get('id')} refers to unknown image")
        if w <= 0 or h <= 0:
            log.warning("image %s: dropping zero-area bbox %s", image_id, rec["bbox"])
            continue
        per_image[image_id].append(Annotation(k, x, y, x + w, y + h))
    samples = []
    for img in images:
        image_id = img.get("id")
        try:
            path = image_root / img["file_name"]
        except KeyError as e:
            raise DatasetError(f"image {image_id}: missing field {e}") from e
        if not path.exists():
            raise DatasetError(f"image {image_id}: file not found: {path}")
        pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        h, w = pixels.shape[:2]
        boxes = clip_annotations(per_image[image_id], h, w)
        if min_size is not None:
            pixels, boxes = _resize(pixels, boxes, min_size)
        samples.append(Sample(pixels, boxes, str(image_id)))
    sizes = {s.image.shape[:2] for s in samples}
    info = doc.get("info", {}).get("manifest", {}) if isinstance(doc.get("info"), dict) else {}
    manifest = DatasetManifest(
        info.get("split", split),
        len(samples),
        len(cats),
        [c.get("name", str(c["id"])) for c in cats],
        tuple(sizes.pop()) if len(sizes) == 1 else None,
        str(annotation_path),
    )
    return Dataset(samples, manifest)


# --- batching -----------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # (N, 3, H, W), normalized, zero-padded
    annotations: list[list[Annotation]]
    labels: torch.Tensor | None  # (N, C, H, W)
    ids: list[str]
    indices: list[int]


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _pad_size(samples: Sequence[Sample], multiple: int = 32) -> tuple[int, int]:
    h = max(s.height for s in samples)
    w = max(s.width for s in samples)
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def collate(
    samples: Sequence[Sample],
    mean: np.ndarray,
    std: np.ndarray,
    num_classes: int,
    render: bool = False,
    aug_rng: np.random.Generator | None = None,
    augment_prob: float = 0.5,
    augment_per_box: bool = True,
    indices: Sequence[int] | None = None,
) -> Batch:
    H, W = _pad_size(samples)
    images = np.zeros((len(samples), 3, H, W), dtype=np.float32)
    labels = np.zeros((len(samples), num_classes, H, W), dtype=np.float32) if render else None
    for b, s in enumerate(samples):
        images[b, :, : s.height, : s.width] = ((s.image - mean) / std).transpose(2, 0, 1)
        if render:
            n = len(s.annotations)
            u = draw_box_scales(n, aug_rng, augment_prob, augment_per_box) if aug_rng is not None else np.ones(n)
            try:
                labels[b] = augment_labels(list(zip(s.annotations, u)), num_classes, H, W).values
            except AnnotationError as e:
                raise DatasetError(f"sample {s.id}: {e}") from e
    return Batch(
        torch.from_numpy(images),
        [list(s.annotations) for s in samples],
        torch.from_numpy(labels) if labels is not None else None,
        [s.id for s in samples],
        list(indices) if indices is not None else list(range(len(samples))),
    )


def batch_iterator(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int,
    epoch: int,
    render: bool = False,
    aug_seed: int | None = None,
    augment_prob: float = 0.5,
    augment_per_box: bool = True,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Iterator[Batch]:
    """One epoch of batches in the (seed, epoch)-determined order.

    When ``render`` is set, label maps are drawn at the padded size; ``aug_seed`` enables
    the random per-box intensity augmentation.
    """
    mean, std = stats if stats is not None else dataset.channel_stats()
    order = shuffle_order(len(dataset), shuffle_seed, epoch)
    aug_rng = np.random.default_rng([aug_seed, epoch]) if aug_seed is not None else None
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size].tolist()
        yield collate(
            [dataset[i] for i in idx],
            mean,
            std,
            dataset.num_classes,
            render=render,
            aug_rng=aug_rng,
            augment_prob=augment_prob,
            augment_per_box=augment_per_box,
            indices=idx,
        )


def infinite_batches(dataset: Dataset, batch_size: int, shuffle_seed: int, **kwargs) -> Iterator[Batch]:
    epoch = 0
    while True:
        yield from batch_iterator(dataset, batch_size, shuffle_seed, epoch, **kwargs)
        epoch += 1
