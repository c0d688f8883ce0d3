"""Box-consistent weak/strong augmentation pipelines.

Every op accepts either an :class:`ImageRaster` or a bare ``(width, height)``
size. With a bare size the geometry, label mapping and random draws are
identical but no pixels are touched, which is what the simulator uses to run
thousands of iterations quickly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from sklearn.base import BaseEstimator

from . import color
from .boxes import MIN_BOX_SIDE
from .raster import ImageRaster
from .transforms import AffineTransform, to_index_space, warp_labels

PIPELINE_KINDS = ("labeled", "weak", "strong")
COLOR_SPACE = tuple(color.COLOR_OPS)
GEOMETRIC_OPS = {
    "ShearX": (-0.3, 0.3),
    "ShearY": (-0.3, 0.3),
    "TranslateX": (-0.1, 0.1),
    "TranslateY": (-0.1, 0.1),
    "Rotate": (-30.0, 30.0),
}
GEOMETRIC_SPACE = tuple(GEOMETRIC_OPS)
_INTERP = {"bilinear": cv2.INTER_LINEAR, "nearest": cv2.INTER_NEAREST}


def _size_of(r) -> Tuple[int, int]:
    if isinstance(r, ImageRaster):
        if r.padded:
            raise ValueError("augmentations expect unpadded rasters")
        return r.size
    w, h = r
    return int(w), int(h)


def _like(r, data: np.ndarray, size):
    """Return a raster if ``r`` was one, else just the size."""
    if isinstance(r, ImageRaster):
        return ImageRaster(data, size[0], size[1])
    return tuple(size)


def _round_px(x: float) -> int:
    return max(1, int(math.floor(x + 0.5)))


# --------------------------------------------------------------------------
# resize / flip

def resize_target(size, short_side: float, long_cap: float) -> Tuple[int, int]:
    """Output size for a given short side, shrunk so the long side fits the cap."""
    w, h = size
    scale = short_side / min(w, h)
    if max(w, h) * scale > long_cap:
        scale = long_cap / max(w, h)
    return _round_px(w * scale), _round_px(h * scale)


def resize(r, labels, new_size, interpolation="bilinear"):
    """Deterministic resize; boxes scale by the exact per-axis pixel ratios."""
    w, h = _size_of(r)
    nw, nh = new_size
    tf = AffineTransform.scale(nw / w, nh / h)
    data = None
    if isinstance(r, ImageRaster):
        data = r.data if (nw, nh) == (w, h) else cv2.resize(
            r.data, (nw, nh), interpolation=_INTERP[interpolation])
    return _like(r, data, (nw, nh)), warp_labels(labels, tf, (nw, nh)), tf


def random_resize(r, labels, rng, short_range=(400, 1200), long_cap=1333,
                  interpolation="bilinear"):
    short = rng.uniform(*short_range)
    return resize(r, labels, resize_target(_size_of(r), short, long_cap), interpolation)


def flip(r, labels):
    w, h = _size_of(r)
    tf = AffineTransform.hflip(w)
    data = r.data[:, ::-1] if isinstance(r, ImageRaster) else None
    return _like(r, data, (w, h)), warp_labels(labels, tf, (w, h)), tf


def random_flip(r, labels, rng, prob=0.5):
    if rng.random() < prob:
        return flip(r, labels)
    return r, list(labels), AffineTransform.identity()


# --------------------------------------------------------------------------
# RandAugment

def geometric_transform(op: str, magnitude: float, size) -> AffineTransform:
    w, h = size
    center = (w / 2.0, h / 2.0)
    if op == "ShearX":
        return AffineTransform.shear(magnitude, 0.0, center)
    if op == "ShearY":
        return AffineTransform.shear(0.0, magnitude, center)
    if op == "TranslateX":
        return AffineTransform.translate(magnitude * w, 0.0)
    if op == "TranslateY":
        return AffineTransform.translate(0.0, magnitude * h)
    if op == "Rotate":
        return AffineTransform.rotate(magnitude, center)
    raise ValueError(f"unknown geometric op {op!r}")


def warp(r, labels, tf: AffineTransform, interpolation="bilinear"):
    """Apply ``tf`` keeping the canvas size; uncovered pixels become 0."""
    size = _size_of(r)
    data = None
    if isinstance(r, ImageRaster):
        data = cv2.warpAffine(r.data, to_index_space(tf), size,
                              flags=_INTERP[interpolation],
                              borderMode=cv2.BORDER_CONSTANT, borderValue=(0, 0, 0))
    return _like(r, data, size), warp_labels(labels, tf, size), tf


def apply_geometric(r, labels, op, magnitude, interpolation="bilinear"):
    return warp(r, labels, geometric_transform(op, magnitude, _size_of(r)), interpolation)


def apply_color(r, op, magnitude=None):
    if not isinstance(r, ImageRaster):
        return r
    fn, rng_ = color.COLOR_OPS[op]
    data = fn(r.data) if rng_ is None else fn(r.data, magnitude)
    return ImageRaster(data, r.width, r.height)


def sample_magnitude(op: str, rng) -> Optional[float]:
    if op in GEOMETRIC_OPS:
        return float(rng.uniform(*GEOMETRIC_OPS[op]))
    span = color.COLOR_OPS[op][1]
    if span is None:
        return None
    if op == "Posterize":
        return int(rng.integers(span[0], span[1] + 1))
    return float(rng.uniform(*span))


def rand_augment(r, labels, rng, space="color", n_ops=1, interpolation="bilinear"):
    """Apply ``n_ops`` ops drawn uniformly from the color or geometric space.

    Returns ``(r', labels', transform)``; ``transform`` is None when only
    color ops ran.
    """
    if space not in ("color", "geometric"):
        raise ValueError(f"unknown RandAugment space {space!r}")
    ops = COLOR_SPACE if space == "color" else GEOMETRIC_SPACE
    tf = None
    labels = list(labels)
    for _ in range(n_ops):
        op = ops[rng.integers(len(ops))]
        magnitude = sample_magnitude(op, rng)
        if space == "color":
            r = apply_color(r, op, magnitude)
        else:
            r, labels, step = apply_geometric(r, labels, op, magnitude, interpolation)
            tf = step if tf is None else step @ tf
    return r, labels, tf


# --------------------------------------------------------------------------
# random erasing

def sample_erasing(size, rng, patches=(1, 20), ratio=(0.0, 0.1)) -> list:
    """Integer pixel rectangles ``(x1, y1, x2, y2)`` to erase."""
    w, h = size
    n = int(rng.integers(patches[0], patches[1] + 1))
    rects = []
    for _ in range(n):
        pw = int(rng.uniform(*ratio) * w)
        ph = int(rng.uniform(*ratio) * h)
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        if pw > 0 and ph > 0:
            rects.append((x0, y0, x0 + pw, y0 + ph))
    return rects


def erase(r, rects):
    if not isinstance(r, ImageRaster) or not rects:
        return r
    data = r.data.copy()
    for x1, y1, x2, y2 in rects:
        data[y1:y2, x1:x2] = 0
    return ImageRaster(data, r.width, r.height)


def erased_coverage(box, rects) -> float:
    """Exact fraction of ``box`` area covered by the union of pixel ``rects``.

    Builds an occupancy mask over the pixel window the box touches and
    weights each pixel by its overlap with the (continuous) box.
    """
    if not rects:
        return 0.0
    c0, r0 = int(math.floor(box.x1)), int(math.floor(box.y1))
    c1, r1 = int(math.ceil(box.x2)), int(math.ceil(box.y2))
    mask = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for x1, y1, x2, y2 in rects:
        xa, xb = max(x1, c0), min(x2, c1)
        ya, yb = max(y1, r0), min(y2, r1)
        if xa < xb and ya < yb:
            mask[ya - r0:yb - r0, xa - c0:xb - c0] = True
    if not mask.any():
        return 0.0
    cols = np.arange(c0, c1)
    rows = np.arange(r0, r1)
    wx = np.clip(np.minimum(cols + 1, box.x2) - np.maximum(cols, box.x1), 0, None)
    wy = np.clip(np.minimum(rows + 1, box.y2) - np.maximum(rows, box.y1), 0, None)
    covered = float(wy @ mask.astype(np.float64) @ wx)
    return covered / box.area


def filter_erased(labels, rects, thr=0.7) -> list:
    return [lab for lab in labels if erased_coverage(lab.box, rects) <= thr]


def random_erasing(r, labels, rng, patches=(1, 20), ratio=(0.0, 0.1), thr=0.7,
                   n_patches=None):
    """Zero out random patches; drop labels more than ``thr`` covered.

    ``n_patches`` forces the patch count (test hook).
    """
    if n_patches is not None:
        patches = (n_patches, n_patches)
    rects = sample_erasing(_size_of(r), rng, patches, ratio)
    return erase(r, rects), filter_erased(labels, rects, thr)


# --------------------------------------------------------------------------
# pipelines

@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "strong"
    short_range: Tuple[float, float] = (400, 1200)
    long_cap: float = 1333
    flip_prob: float = 0.5
    n_color_ops: int = 1
    n_geometric_ops: int = 1
    erase_patches: Tuple[int, int] = (1, 20)
    erase_ratio: Tuple[float, float] = (0.0, 0.1)
    erase_thr: float = 0.7
    seed: int = 0
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.kind not in PIPELINE_KINDS:
            raise ValueError(f"pipeline kind must be one of {PIPELINE_KINDS}, got {self.kind!r}")
        lo, hi = self.short_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad short-side range {self.short_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip probability {self.flip_prob} outside [0, 1]")
        if self.n_color_ops < 0 or self.n_geometric_ops < 0:
            raise ValueError("op counts must be non-negative")
        p_lo, p_hi = self.erase_patches
        if not 0 <= p_lo <= p_hi:
            raise ValueError(f"bad erase patch range {self.erase_patches}")
        r_lo, r_hi = self.erase_ratio
        if not 0.0 <= r_lo <= r_hi <= 1.0:
            raise ValueError(f"bad erase ratio range {self.erase_ratio}")
        if self.interpolation not in _INTERP:
            raise ValueError(f"interpolation must be one of {tuple(_INTERP)}")

    @property
    def stages(self) -> tuple:
        base = ("resize", "flip")
        if self.kind == "weak":
            return base
        if self.kind == "labeled":
            return base + ("color",)
        return base + ("color", "geometric", "erasing")


class AugmentedView(NamedTuple):
    raster: object          # ImageRaster, or (w, h) in geometry-only mode
    labels: list
    transform: AffineTransform
    erased: list            # pixel rectangles zeroed by random erasing

    @property
    def size(self):
        return _size_of(self.raster)


_KIND_STREAM = {"labeled": 0, "weak": 1, "strong": 2}


def view_rng(seed: int, image_id: int, kind: str, *extra) -> np.random.Generator:
    """Per-image RNG stream so pipelines are reproducible per (seed, image)."""
    return np.random.default_rng([int(seed), *map(int, extra), int(image_id), _KIND_STREAM[kind]])


def apply_pipeline(spec: AugmentSpec, r, labels, rng) -> AugmentedView:
    """Run the stages for ``spec.kind`` in order, composing their transforms."""
    labels = list(labels)
    r, labels, tf = random_resize(r, labels, rng, spec.short_range, spec.long_cap,
                                  spec.interpolation)
    r, labels, step = random_flip(r, labels, rng, spec.flip_prob)
    tf = step @ tf
    erased = []
    if spec.kind in ("labeled", "strong"):
        r, labels, _ = rand_augment(r, labels, rng, "color", spec.n_color_ops)
    if spec.kind == "strong":
        r, labels, step = rand_augment(r, labels, rng, "geometric", spec.n_geometric_ops,
                                       spec.interpolation)
        if step is not None:
            tf = step @ tf
        erased = sample_erasing(_size_of(r), rng, spec.erase_patches, spec.erase_ratio)
        r = erase(r, erased)
        labels = filter_erased(labels, erased, spec.erase_thr)
    return AugmentedView(r, labels, tf, erased)


def transfer_labels(weak_labels, weak_tf: AffineTransform, strong_tf: AffineTransform,
                    size, min_side: float = MIN_BOX_SIDE) -> list:
    """Move labels from the weak view into the strong view of the same image."""
    to_strong = strong_tf @ weak_tf.inverse()
    return warp_labels(weak_labels, to_strong, size, min_side=min_side)


class AugmentPipeline(BaseEstimator):
    """Estimator-style wrapper around :func:`apply_pipeline`.

    Stateless: ``fit`` only validates parameters. ``transform`` takes
    ``(image_id, raster, labels)`` triples and returns one
    :class:`AugmentedView` each, using a stream derived from
    ``(seed, image_id)``.
    """

    def __init__(self, kind="strong", short_range=(400, 1200), long_cap=1333,
                 flip_prob=0.5, n_color_ops=1, n_geometric_ops=1,
                 erase_patches=(1, 20), erase_ratio=(0.0, 0.1), erase_thr=0.7,
                 seed=0, interpolation="bilinear"):
        self.kind = kind
        self.short_range = short_range
        self.long_cap = long_cap
        self.flip_prob = flip_prob
        self.n_color_ops = n_color_ops
        self.n_geometric_ops = n_geometric_ops
        self.erase_patches = erase_patches
        self.erase_ratio = erase_ratio
        self.erase_thr = erase_thr
        self.seed = seed
        self.interpolation = interpolation

    def to_spec(self) -> AugmentSpec:
        return AugmentSpec(**self.get_params())

    def fit(self, X=None, y=None):
        self.spec_ = self.to_spec()
        return self

    def transform(self, X: Sequence) -> list:
        spec = self.to_spec()
        return [apply_pipeline(spec, r, labels, view_rng(spec.seed, image_id, spec.kind))
                for image_id, r, labels in X]

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)
