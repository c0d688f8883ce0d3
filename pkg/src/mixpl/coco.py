"""COCO annotation/results I/O, dataset splitting and procedural datasets."""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .boxes import Annotation, BBox, DatasetIndex, Detection, LabeledImage, clip_box
from .raster import ImageRaster

logger = logging.getLogger(__name__)


class CocoFormatError(ValueError):
    """Document is not a well-formed COCO annotation file."""

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CocoValidationError(ValueError):
    """Document parses but references ids that do not exist."""

    def __init__(self, message, annotation_ids=()):
        self.annotation_ids = list(annotation_ids)
        super().__init__(f"{message}: annotation ids {self.annotation_ids}")


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CocoFormatError(str(e), location=str(path)) from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise CocoFormatError(e.msg, location=f"{path}:{e.lineno}:{e.colno}") from e


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise CocoFormatError(f"missing key {key!r}", location=where)
    return obj[key]


def parse_dataset(doc: Mapping, source: str = "<document>") -> DatasetIndex:
    """Build a DatasetIndex from an in-memory COCO annotation document."""
    if not isinstance(doc, dict):
        raise CocoFormatError("top level must be an object", location=source)
    for key in ("images", "annotations", "categories"):
        if not isinstance(_require(doc, key, source), list):
            raise CocoFormatError(f"{key!r} must be an array", location=source)

    categories = {}
    for i, cat in enumerate(doc["categories"]):
        where = f"{source}:categories[{i}]"
        categories[int(_require(cat, "id", where))] = str(cat.get("name", ""))

    images = {}
    for i, img in enumerate(doc["images"]):
        where = f"{source}:images[{i}]"
        iid = int(_require(img, "id", where))
        if iid in images:
            raise CocoFormatError(f"duplicate image id {iid}", location=where)
        images[iid] = dict(width=int(_require(img, "width", where)),
                           height=int(_require(img, "height", where)),
                           file_name=str(img.get("file_name", "")), anns=[])

    missing_image, unknown_cat = [], []
    n_crowd = 0
    for i, ann in enumerate(doc["annotations"]):
        where = f"{source}:annotations[{i}]"
        aid = _require(ann, "id", where)
        iid = int(_require(ann, "image_id", where))
        cid = int(_require(ann, "category_id", where))
        bbox = _require(ann, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise CocoFormatError("bbox must be [x, y, w, h]", location=where)
        if iid not in images:
            missing_image.append(aid)
            continue
        if cid not in categories:
            unknown_cat.append(aid)
            continue
        if ann.get("iscrowd", 0):
            n_crowd += 1
            continue
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            logger.warning("%s: dropping zero-area box", where)
            continue
        info = images[iid]
        box = clip_box(BBox.from_xywh(x, y, w, h), info["width"], info["height"])
        if box is None:
            logger.warning("%s: box lies outside its image, dropped", where)
            continue
        info["anns"].append(Annotation(box, cid))

    if missing_image:
        raise CocoValidationError("annotations reference missing images", missing_image)
    if unknown_cat:
        raise CocoValidationError("annotations reference unknown categories", unknown_cat)
    if n_crowd:
        logger.warning("%s: ignored %d crowd annotations", source, n_crowd)

    return DatasetIndex(
        tuple(LabeledImage(iid, v["width"], v["height"], tuple(v["anns"]), v["file_name"])
              for iid, v in images.items()),
        categories)


def load_dataset(path) -> DatasetIndex:
    return parse_dataset(_read_json(path), source=str(path))


def dataset_to_coco(index: DatasetIndex) -> dict:
    images, annotations = [], []
    ann_id = 1
    for img in index.images:
        images.append({"id": img.image_id, "width": img.width, "height": img.height,
                       "file_name": img.file_name or f"{img.image_id:012d}.png"})
        for ann in img.annotations:
            annotations.append({"id": ann_id, "image_id": img.image_id,
                                "category_id": ann.category,
                                "bbox": list(ann.box.to_xywh()),
                                "area": ann.box.area, "iscrowd": 0})
            ann_id += 1
    categories = [{"id": cid, "name": name} for cid, name in sorted(index.categories.items())]
    return {"images": images, "annotations": annotations, "categories": categories}


def dump_dataset(index: DatasetIndex, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_coco(index)))


def split_dataset(index: DatasetIndex, fraction: float, seed: int):
    """Uniform random labeled/unlabeled partition.

    The labeled side gets ``floor(fraction * N)`` images, the count used
    by the common COCO semi-supervised split files (10% of 118287 is
    11828). Both halves keep the original image order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"split fraction must be in (0, 1], got {fraction}")
    n = len(index)
    n_labeled = int(math.floor(fraction * n + 1e-9))  # tolerate 0.29 * 100 = 28.999...
    order = np.random.default_rng(seed).permutation(n)
    chosen = np.zeros(n, dtype=bool)
    chosen[order[:n_labeled]] = True
    ids = index.image_ids
    labeled = [i for i, keep in zip(ids, chosen) if keep]
    unlabeled = [i for i, keep in zip(ids, chosen) if not keep]
    return index.subset(labeled), index.subset(unlabeled)


def detections_to_results(dets: Mapping[int, Sequence[Detection]]) -> list:
    out = []
    for image_id in dets:
        for d in dets[image_id]:
            out.append({"image_id": int(image_id), "category_id": int(d.category),
                        "bbox": [float(v) for v in d.box.to_xywh()],
                        "score": float(d.score)})
    return out


def emit_detections(dets: Mapping[int, Sequence[Detection]], path) -> None:
    """Write per-image detections as a COCO results array."""
    try:
        Path(path).write_text(json.dumps(detections_to_results(dets), indent=None))
    except OSError as e:
        raise OSError(f"cannot write detections to {path}: {e}") from e


def results_to_detections(records: Sequence[Mapping], source="<results>") -> dict:
    out = {}
    if not isinstance(records, list):
        raise CocoFormatError("results document must be an array", location=source)
    for i, rec in enumerate(records):
        where = f"{source}[{i}]"
        box = BBox.from_xywh(*_require(rec, "bbox", where))
        det = Detection(box, int(_require(rec, "category_id", where)),
                        float(_require(rec, "score", where)))
        out.setdefault(int(_require(rec, "image_id", where)), []).append(det)
    return out


def load_detections(path) -> dict:
    return results_to_detections(_read_json(path), source=str(path))


# --------------------------------------------------------------------------
# Procedural datasets

# COCO instance share per scale band, roughly 41% / 34% / 24%.
COCO_SCALE_MIX = (0.41, 0.34, 0.25)
_SIDE_RANGES = {"small": (8.0, 32.0), "medium": (32.0, 96.0), "large": (96.0, 480.0)}
_IMAGE_SHAPES = ((1333, 1000), (1333, 750), (1000, 1333), (1333, 889))


def _sample_box(rng, width, height, scale):
    lo, hi = _SIDE_RANGES[scale]
    # sample the side of an equal-area square, then an aspect ratio
    for _ in range(100):
        side = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
        w, h = side * math.sqrt(aspect), side / math.sqrt(aspect)
        if w < width and h < height:
            x = rng.uniform(0, width - w)
            y = rng.uniform(0, height - h)
            return BBox(x, y, x + w, y + h)
    side = min(width, height, hi) * 0.9
    return BBox(0.0, 0.0, side, side)


def zipf_weights(n_categories: int, exponent: float = 1.2) -> np.ndarray:
    w = 1.0 / np.arange(1, n_categories + 1) ** exponent
    return w / w.sum()


def make_synthetic_dataset(n_images: int, n_categories: int = 10, seed: int = 0,
                           objects_per_image: float = 7.0,
                           scale_mix: Sequence[float] = COCO_SCALE_MIX,
                           category_weights: Optional[Sequence[float]] = None,
                           image_shapes: Sequence = _IMAGE_SHAPES,
                           first_id: int = 1) -> DatasetIndex:
    """Random COCO-like dataset: Poisson object counts, COCO scale mix, Zipf categories."""
    rng = np.random.default_rng(seed)
    cat_w = zipf_weights(n_categories) if category_weights is None else np.asarray(category_weights, float)
    cat_w = cat_w / cat_w.sum()
    mix = np.asarray(scale_mix, float) / np.sum(scale_mix)
    images = []
    for k in range(n_images):
        width, height = image_shapes[rng.integers(len(image_shapes))]
        n_obj = max(1, rng.poisson(objects_per_image))
        anns = []
        for _ in range(n_obj):
            scale = ("small", "medium", "large")[rng.choice(3, p=mix)]
            cat = int(rng.choice(n_categories, p=cat_w)) + 1
            anns.append(Annotation(_sample_box(rng, width, height, scale), cat))
        images.append(LabeledImage(first_id + k, int(width), int(height), tuple(anns)))
    categories = {c + 1: f"cat{c + 1}" for c in range(n_categories)}
    return DatasetIndex(tuple(images), categories)


def make_long_tail_dataset(n_images: int, fractions: Sequence[float], seed: int = 0,
                           size=(640, 480), max_instances: int = 3) -> DatasetIndex:
    """Dataset where category ``c + 1`` appears in exactly ``round(fractions[c] * N)`` images.

    Each membership contributes 1..``max_instances`` instances. Images left
    without any category stay unannotated.
    """
    rng = np.random.default_rng(seed)
    width, height = size
    anns = [[] for _ in range(n_images)]
    for c, frac in enumerate(fractions):
        k = int(math.floor(frac * n_images + 0.5))
        for idx in rng.choice(n_images, size=k, replace=False):
            for _ in range(rng.integers(1, max_instances + 1)):
                scale = ("small", "medium", "large")[rng.integers(3)]
                anns[idx].append(Annotation(_sample_box(rng, width, height, scale), c + 1))
    images = tuple(LabeledImage(i + 1, width, height, tuple(a)) for i, a in enumerate(anns))
    return DatasetIndex(images, {c + 1: f"cat{c + 1}" for c in range(len(fractions))})


def _category_color(category: int) -> np.ndarray:
    rng = np.random.default_rng(1000 + category)
    return rng.integers(60, 256, size=3).astype(np.uint8)


def render_image(img: LabeledImage, seed: int = 0) -> ImageRaster:
    """Cheap procedural raster: a noisy gradient with category-colored boxes."""
    rng = np.random.default_rng([seed, img.image_id])
    h, w = img.height, img.width
    ramp = np.linspace(20, 90, w, dtype=np.float32)[None, :, None]
    base = np.broadcast_to(ramp, (h, w, 3)) + rng.integers(0, 24, size=(1, 1, 3))
    noise = rng.integers(0, 16, size=(h // 8 + 1, w // 8 + 1, 3), dtype=np.uint8)
    noise = np.repeat(np.repeat(noise, 8, axis=0), 8, axis=1)[:h, :w]
    data = (base + noise).clip(0, 255).astype(np.uint8)
    for ann in img.annotations:
        b = ann.box
        x1, y1 = int(b.x1), int(b.y1)
        x2, y2 = max(int(math.ceil(b.x2)), x1 + 1), max(int(math.ceil(b.y2)), y1 + 1)
        data[y1:y2, x1:x2] = _category_color(ann.category)
    return ImageRaster(data, w, h)
