"""Pseudo-label filtering, the pseudo-label cache, Mixup/Mosaic and batch assembly."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import cv2
import numpy as np
from sklearn.base import BaseEstimator

from .augment import _size_of
from .boxes import Detection
from .coco import detections_to_results
from .raster import ImageRaster, pad_batch, pad_to, unpad, write_raw
from .transforms import AffineTransform, warp_labels

logger = logging.getLogger(__name__)

# classification loss family -> pseudo-label confidence threshold
THRESHOLD_PRESETS = {"ce-loss": 0.7, "focal": 0.4, "fcos": 0.3}


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: int
    detections: tuple = ()
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))

    def __len__(self):
        return len(self.detections)

    def __iter__(self):
        return iter(self.detections)

    @property
    def source_id(self) -> str:
        return f"{self.image_id}@{self.iteration}"


def filter_by_threshold(dets: Sequence[Detection], thr: float) -> list:
    """Keep detections scoring at least ``thr``, in their original order."""
    if not 0.0 <= thr <= 1.0:
        raise ValueError(f"threshold {thr} outside [0, 1]")
    return [d for d in dets if d.score >= thr]


def filter_empty_images(batch) -> Tuple[list, int]:
    """Drop ``(raster, PseudoLabelSet)`` pairs with no pseudo-labels.

    Returns the surviving pairs and how many were removed.
    """
    kept = [item for item in batch if len(item[1]) > 0]
    return kept, len(batch) - len(kept)


class PseudoLabelFilter(BaseEstimator):
    """Confidence-threshold filter with optional empty-image removal.

    ``transform`` maps a list of ``(raster, PseudoLabelSet)`` pairs to the
    filtered list and records ``n_removed_``.
    """

    def __init__(self, thr=0.7, filter_empty=True):
        self.thr = thr
        self.filter_empty = filter_empty

    def fit(self, X=None, y=None):
        if not 0.0 <= self.thr <= 1.0:
            raise ValueError(f"threshold {self.thr} outside [0, 1]")
        return self

    def transform(self, X):
        out = [(r, PseudoLabelSet(pl.image_id, filter_by_threshold(pl.detections, self.thr),
                                  pl.iteration))
               for r, pl in X]
        self.n_removed_ = 0
        if self.filter_empty:
            out, self.n_removed_ = filter_empty_images(out)
        return out

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)


# --------------------------------------------------------------------------
# cache

class CacheWarmup(LookupError):
    """Raised when sampling an empty cache (first iteration)."""


@dataclass(frozen=True)
class CacheEntry:
    raster: object  # unpadded ImageRaster, or (w, h) in geometry-only mode
    labels: PseudoLabelSet
    iteration: int

    @property
    def source_id(self) -> str:
        return f"{self.labels.image_id}@{self.iteration}"


class PseudoLabelCache:
    """Pseudo-labeled images from the most recent iteration(s).

    ``window=1`` keeps only the nearest previous iteration: each ``put``
    replaces the contents wholesale. Larger windows keep a FIFO of
    iterations (ablation knob).
    """

    def __init__(self, window: int = 1):
        if window < 1:
            raise ValueError("cache window must be >= 1")
        self.window = window
        self._iterations = deque(maxlen=window)

    def put(self, entries, iteration: int) -> None:
        stored = []
        for raster, labels in entries:
            if isinstance(raster, ImageRaster) and raster.padded:
                raster = unpad(raster)
            stored.append(CacheEntry(raster, labels, iteration))
        self._iterations.append(stored)

    @property
    def entries(self) -> list:
        return [e for it in self._iterations for e in it]

    def __len__(self):
        return sum(len(it) for it in self._iterations)

    def sample(self, k: int, rng) -> List[CacheEntry]:
        """``k`` entries, without replacement when the cache holds enough."""
        entries = self.entries
        if not entries:
            raise CacheWarmup("pseudo-label cache is empty")
        idx = rng.choice(len(entries), size=k, replace=k > len(entries))
        return [entries[i] for i in idx]


# --------------------------------------------------------------------------
# mixing

class Composite(NamedTuple):
    raster: object
    labels: list
    n_dropped: int = 0


def pseudo_mixup(a, b, alpha: float = 0.5) -> Composite:
    """Overlay two ``(raster, labels)`` pairs and concatenate their labels.

    Both rasters are zero-padded bottom/right to the common size and blended
    as ``alpha * a + (1 - alpha) * b``, rounded half up.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"mixup alpha {alpha} outside [0, 1]")
    (ra, la), (rb, lb) = a, b
    (wa, ha), (wb, hb) = _size_of(ra), _size_of(rb)
    w, h = max(wa, wb), max(ha, hb)
    labels = list(la) + list(lb)
    if not isinstance(ra, ImageRaster):
        return Composite((w, h), labels)
    pa, pb = pad_to(ra, w, h).data, pad_to(rb, w, h).data
    mixed = np.floor(alpha * pa.astype(np.float64) + (1.0 - alpha) * pb.astype(np.float64) + 0.5)
    return Composite(ImageRaster(mixed.clip(0, 255).astype(np.uint8), w, h), labels)


class MosaicLayout(NamedTuple):
    transforms: list   # per input: scale then offset into the canvas
    sizes: list        # per input: resized (w, h)
    origins: list      # per input: top-left of its cell
    canvas: tuple      # (w, h)


def mosaic_layout(sizes, longest_edge: float) -> MosaicLayout:
    """2x2 grid: inputs 0..3 go top-left, top-right, bottom-left, bottom-right.

    Each input is resized (aspect kept) to the given longest edge. Column
    widths and row heights are the max over their members.
    """
    if len(sizes) != 4:
        raise ValueError(f"mosaic needs exactly 4 inputs, got {len(sizes)}")
    new_sizes = []
    for w, h in sizes:
        s = longest_edge / max(w, h)
        new_sizes.append((max(1, int(math.floor(w * s + 0.5))),
                          max(1, int(math.floor(h * s + 0.5)))))
    col_w = (max(new_sizes[0][0], new_sizes[2][0]), max(new_sizes[1][0], new_sizes[3][0]))
    row_h = (max(new_sizes[0][1], new_sizes[1][1]), max(new_sizes[2][1], new_sizes[3][1]))
    origins = [(0, 0), (col_w[0], 0), (0, row_h[0]), (col_w[0], row_h[0])]
    transforms = []
    for (w, h), (nw, nh), (ox, oy) in zip(sizes, new_sizes, origins):
        transforms.append(AffineTransform.translate(ox, oy) @ AffineTransform.scale(nw / w, nh / h))
    return MosaicLayout(transforms, new_sizes, origins, (sum(col_w), sum(row_h)))


def pseudo_mosaic(four, rng=None, size_range=(400, 800), longest_edge=None,
                  interpolation="bilinear") -> Composite:
    """Compose 4 ``(raster, labels)`` pairs into one 2x2 mosaic.

    One longest edge is drawn per composite from ``size_range`` unless
    ``longest_edge`` is given. ``n_dropped`` counts boxes that became
    degenerate, so ``len(labels) + n_dropped`` equals the input label total.
    """
    four = list(four)
    if len(four) != 4:
        raise ValueError(f"mosaic needs exactly 4 inputs, got {len(four)}")
    if longest_edge is None:
        if rng is None:
            raise ValueError("pseudo_mosaic needs an rng or a fixed longest_edge")
        longest_edge = int(rng.integers(size_range[0], size_range[1] + 1))
    layout = mosaic_layout([_size_of(r) for r, _ in four], longest_edge)
    labels, n_in = [], 0
    for (_, labs), tf in zip(four, layout.transforms):
        labs = list(labs)
        n_in += len(labs)
        labels.extend(warp_labels(labs, tf, layout.canvas))
    n_dropped = n_in - len(labels)
    if n_dropped:
        logger.debug("mosaic dropped %d degenerate boxes", n_dropped)
    if not isinstance(four[0][0], ImageRaster):
        return Composite(layout.canvas, labels, n_dropped)
    cw, ch = layout.canvas
    canvas = np.zeros((ch, cw, 3), dtype=np.uint8)
    interp = cv2.INTER_LINEAR if interpolation == "bilinear" else cv2.INTER_NEAREST
    for (r, _), (nw, nh), (ox, oy) in zip(four, layout.sizes, layout.origins):
        data = r.data if (nw, nh) == r.size else cv2.resize(r.data, (nw, nh), interpolation=interp)
        canvas[oy:oy + nh, ox:ox + nw] = data
    return Composite(ImageRaster(canvas, cw, ch), labels, n_dropped)


# --------------------------------------------------------------------------
# batch composition

class LabeledSample(NamedTuple):
    image_id: int
    raster: object
    labels: list


@dataclass
class MixedSample:
    raster: object
    labels: list
    kind: str                 # "mixup" | "mosaic"
    sources: tuple            # source ids ("image@iteration") that fed this output
    weight: float
    n_dropped: int = 0


@dataclass
class PseudoBatch:
    labeled: list
    mixed: list
    iteration: int
    w_u: float
    warmup: bool = False
    n_filtered_empty: int = 0
    unlabeled_in: int = 0

    @property
    def weights(self) -> list:
        return [1.0] * len(self.labeled) + [m.weight for m in self.mixed]

    @property
    def composition(self) -> list:
        rows = [{"index": i, "kind": "labeled", "weight": 1.0,
                 "sources": [str(s.image_id)], "n_labels": len(s.labels)}
                for i, s in enumerate(self.labeled)]
        offset = len(self.labeled)
        rows += [{"index": offset + i, "kind": m.kind, "weight": m.weight,
                  "sources": list(m.sources), "n_labels": len(m.labels)}
                 for i, m in enumerate(self.mixed)]
        return rows

    def padded_rasters(self) -> list:
        """Every raster zero-padded to the batch-wide max size."""
        rasters = [s.raster for s in self.labeled] + [m.raster for m in self.mixed]
        return pad_batch(rasters)


def _source(item) -> str:
    if isinstance(item, CacheEntry):
        return item.source_id
    return item[1].source_id


def _as_pair(item):
    if isinstance(item, CacheEntry):
        return item.raster, item.labels.detections
    return item[0], item[1].detections


def compose_training_batch(labeled, unlabeled, cache: PseudoLabelCache, rng, iteration=0,
                           w_u=2.0, alpha=0.5, mosaic_range=(400, 800)) -> PseudoBatch:
    """Build the MixPL training batch for one iteration.

    ``unlabeled`` holds ``(raster, PseudoLabelSet)`` pairs already strongly
    augmented and filtered. Each one is mixed with a distinct cache sample;
    one mosaic is built from 4 of the 2n raw images. When the cache is empty
    the mixing partners come from the current batch instead. Afterwards the
    current pairs replace the cache contents (an iteration with no
    pseudo-labeled images leaves the cache alone).
    """
    labeled = [s if isinstance(s, LabeledSample) else LabeledSample(*s) for s in labeled]
    current = list(unlabeled)
    n = len(current)
    if n == 0:
        return PseudoBatch(labeled, [], iteration, w_u)

    warmup = False
    try:
        partners = cache.sample(n, rng)
    except CacheWarmup:
        warmup = True
        if n == 1:
            partners = [current[0]]
        else:
            partners = [current[(i + int(rng.integers(1, n))) % n] for i in range(n)]

    mixed = []
    for cur, partner in zip(current, partners):
        comp = pseudo_mixup(_as_pair(cur), _as_pair(partner), alpha)
        mixed.append(MixedSample(comp.raster, comp.labels, "mixup",
                                 (_source(cur), _source(partner)), w_u))

    pool = current + list(partners)
    picks = rng.choice(len(pool), size=4, replace=len(pool) < 4)
    chosen = [pool[i] for i in picks]
    comp = pseudo_mosaic([_as_pair(c) for c in chosen], rng, mosaic_range)
    n_empty = 0
    if comp.labels:
        mixed.append(MixedSample(comp.raster, comp.labels, "mosaic",
                                 tuple(_source(c) for c in chosen), w_u, comp.n_dropped))
    else:
        # every box degenerated when down-sampled; an unlabeled composite is not trained on
        logger.debug("mosaic lost all %d labels, dropped", comp.n_dropped)
        n_empty = 1

    cache.put(current, iteration)
    return PseudoBatch(labeled, mixed, iteration, w_u, warmup=warmup, n_filtered_empty=n_empty,
                       unlabeled_in=n)


class MixPLComposer(BaseEstimator):
    """Stateful batch composer owning the pseudo-label cache.

    ``fit`` resets the cache; ``compose`` builds one iteration's batch with
    an RNG stream derived from ``(seed, iteration)``.
    """

    def __init__(self, w_u=2.0, alpha=0.5, mosaic_range=(400, 800), cache_window=1, seed=0):
        self.w_u = w_u
        self.alpha = alpha
        self.mosaic_range = mosaic_range
        self.cache_window = cache_window
        self.seed = seed

    def fit(self, X=None, y=None):
        lo, hi = self.mosaic_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad mosaic range {self.mosaic_range}")
        if self.w_u < 0:
            raise ValueError("w_u must be non-negative")
        self.cache_ = PseudoLabelCache(self.cache_window)
        return self

    def compose(self, labeled, unlabeled, iteration: int) -> PseudoBatch:
        if not hasattr(self, "cache_"):
            self.fit()
        rng = np.random.default_rng([int(self.seed), int(iteration), 7])
        return compose_training_batch(labeled, unlabeled, self.cache_, rng, iteration,
                                      self.w_u, self.alpha, self.mosaic_range)


def _label_records(image_key, labels) -> list:
    dets = [d if isinstance(d, Detection) else Detection(d.box, d.category, 1.0) for d in labels]
    return detections_to_results({image_key: dets})


def dump_batch(batch: PseudoBatch, directory) -> Path:
    """Write rasters (raw format), per-image results docs and a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    items = [(s.raster, s.labels) for s in batch.labeled] + [(m.raster, m.labels) for m in batch.mixed]
    for i, (raster, labels) in enumerate(items):
        if isinstance(raster, ImageRaster):
            write_raw(raster, out / f"{i:03d}.mxpl")
        (out / f"{i:03d}.json").write_text(json.dumps(_label_records(i, labels)))
    manifest = {"iteration": batch.iteration, "warmup": batch.warmup, "w_u": batch.w_u,
                "items": batch.composition}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
