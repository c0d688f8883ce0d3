"""Box and annotation primitives shared across the pipeline.

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous pixel coordinates.
COCO ``(x, y, w, h)`` only appears at the I/O boundary.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

SMALL_AREA = 32 ** 2
LARGE_AREA = 96 ** 2
SCALE_CLASSES = ("small", "medium", "large")

# boxes narrower/shorter than this after a transform are dropped
MIN_BOX_SIDE = 1.0


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_xywh(self) -> tuple:
        return (self.x1, self.y1, self.width, self.height)

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def corners(self) -> np.ndarray:
        """The four corners as a (4, 2) array, clockwise from top-left."""
        return np.array([[self.x1, self.y1], [self.x2, self.y1],
                         [self.x2, self.y2], [self.x1, self.y2]])


@dataclass(frozen=True)
class Annotation:
    """A ground-truth instance: box plus category id."""
    box: BBox
    category: int


@dataclass(frozen=True)
class Detection:
    """A scored prediction. Ground truth is never represented this way."""
    box: BBox
    category: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (N, 4) and (M, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def area_class(b: BBox) -> str:
    """COCO scale band; exactly 32**2 and exactly 96**2 are both medium."""
    return area_class_of(b.area)


def area_class_of(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area > LARGE_AREA:
        return "large"
    return "medium"


def clip_box(b: BBox, w: float, h: float, min_side: float = 0.0) -> Optional[BBox]:
    """Intersect ``b`` with the frame ``[0, w] x [0, h]``.

    Returns None when the intersection is degenerate, i.e. a side is
    ``<= min_side`` (``min_side=0`` only rejects empty intersections).
    """
    if w <= 0 or h <= 0:
        raise ValueError(f"frame size must be positive, got {w}x{h}")
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(w)), min(b.y2, float(h))
    if x2 - x1 <= min_side or y2 - y1 <= min_side:
        return None
    if (x1, y1, x2, y2) == (b.x1, b.y1, b.x2, b.y2):
        return b
    return BBox(x1, y1, x2, y2)


def with_box(label, box: BBox):
    """Copy of an Annotation/Detection carrying a new box."""
    return dataclasses.replace(label, box=box)


def boxes_array(labels: Iterable) -> np.ndarray:
    arr = [lab.box.to_array() for lab in labels]
    if not arr:
        return np.zeros((0, 4))
    return np.stack(arr)


def count_by_scale(labels: Iterable) -> dict:
    counts = dict.fromkeys(SCALE_CLASSES, 0)
    for lab in labels:
        counts[area_class(lab.box)] += 1
    return counts


@dataclass(frozen=True)
class LabeledImage:
    image_id: int
    width: int
    height: int
    annotations: tuple = ()
    file_name: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.image_id}: invalid size {self.width}x{self.height}")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        for ann in self.annotations:
            b = ann.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(f"image {self.image_id}: annotation box {b} outside frame")

    @property
    def size(self) -> tuple:
        return (self.width, self.height)

    @property
    def categories(self) -> frozenset:
        return frozenset(a.category for a in self.annotations)


@dataclass(frozen=True)
class DatasetIndex:
    images: tuple
    categories: Mapping[int, str]
    membership: Mapping[int, frozenset] = field(init=False, repr=False)
    _by_id: Mapping[int, LabeledImage] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        images = tuple(self.images)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "categories", dict(self.categories))
        by_id = {}
        for img in images:
            if img.image_id in by_id:
                raise ValueError(f"duplicate image id {img.image_id}")
            by_id[img.image_id] = img
        members = {c: set() for c in self.categories}
        for img in images:
            for ann in img.annotations:
                if ann.category not in members:
                    raise ValueError(
                        f"image {img.image_id}: unknown category {ann.category}")
                members[ann.category].add(img.image_id)
        object.__setattr__(self, "membership", {c: frozenset(s) for c, s in members.items()})
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, image_id: int) -> LabeledImage:
        return self._by_id[image_id]

    @property
    def image_ids(self) -> list:
        return [img.image_id for img in self.images]

    def subset(self, image_ids: Sequence[int]) -> "DatasetIndex":
        return DatasetIndex(tuple(self._by_id[i] for i in image_ids), self.categories)
