"""Teacher-student loop simulator producing pseudo-label statistics."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .augment import AugmentSpec, apply_pipeline, filter_erased, transfer_labels, view_rng
from .boxes import DatasetIndex, LabeledImage, count_by_scale
from .coco import render_image
from .pseudo import (THRESHOLD_PRESETS, LabeledSample, MixPLComposer, PseudoLabelSet,
                     filter_by_threshold, filter_empty_images)
from .resample import LabeledResampler
from .teacher import TeacherProfile, category_deciles, preset_profile, run_teacher


@dataclass(frozen=True)
class SimConfig:
    preset: str = "ce-loss"
    thr: Optional[float] = None
    n_labeled: int = 1
    n_unlabeled: int = 4
    w_u: float = 2.0
    alpha: float = 0.5
    mosaic_range: Tuple[int, int] = (400, 800)
    power: float = 0.5
    iterations: int = 100
    seed: int = 0
    render: bool = False
    filter_empty: bool = True
    cache_window: int = 1
    erase_thr: float = 0.7
    augment: Mapping = field(default_factory=dict)   # AugmentSpec overrides

    @property
    def threshold(self) -> float:
        if self.thr is not None:
            return self.thr
        return THRESHOLD_PRESETS[self.preset]

    def __post_init__(self):
        if self.preset not in THRESHOLD_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.thr is not None and not 0.0 <= self.thr <= 1.0:
            raise ValueError(f"threshold {self.thr} outside [0, 1]")
        if self.n_labeled < 0 or self.n_unlabeled < 0 or self.iterations < 0:
            raise ValueError("batch sizes and iteration count must be non-negative")
        clash = {"kind", "seed", "erase_thr"} & set(self.augment)
        if clash:
            raise ValueError(f"augment overrides may not set {sorted(clash)}")


@dataclass
class IterationStats:
    iteration: int
    gt: Dict[str, int]
    pl: Dict[str, int]
    empty_images: int
    fp_count: int
    detected: int
    filtered: int
    cache_occupancy: int
    gt_by_category: Dict[int, int]
    pl_by_category: Dict[int, int]
    n_mixed: int = 0

    @property
    def pl_total(self) -> int:
        return sum(self.pl.values())


class SimStats(list):
    """A list of :class:`IterationStats` with CSV export."""

    def __init__(self, rows=(), categories=()):
        super().__init__(rows)
        self.categories = sorted(categories)

    def header(self) -> list:
        cols = ["iter", "gt_s", "gt_m", "gt_l", "pl_s", "pl_m", "pl_l", "empty_images", "fp_count"]
        for c in self.categories:
            cols += [f"gt_cat{c}", f"pl_cat{c}"]
        return cols

    def rows(self) -> Iterator[list]:
        for s in self:
            row = [s.iteration, s.gt["small"], s.gt["medium"], s.gt["large"],
                   s.pl["small"], s.pl["medium"], s.pl["large"], s.empty_images, s.fp_count]
            for c in self.categories:
                row += [s.gt_by_category.get(c, 0), s.pl_by_category.get(c, 0)]
            yield row

    def to_csv(self, delimiter=",") -> str:
        buf = io.StringIO()
        buf.write(delimiter.join(self.header()) + "\n")
        for row in self.rows():
            buf.write(delimiter.join(str(v) for v in row) + "\n")
        return buf.getvalue()

    def totals(self, start=0, stop=None) -> Tuple[Dict[str, int], Dict[str, int]]:
        gt = dict.fromkeys(("small", "medium", "large"), 0)
        pl = dict(gt)
        for s in self[start:stop]:
            for k in gt:
                gt[k] += s.gt[k]
                pl[k] += s.pl[k]
        return gt, pl

    def category_log_table(self, delimiter=",") -> str:
        """Cumulative per-category counts as log10(1 + n)."""
        gt, pl = {}, {}
        for s in self:
            for c, n in s.gt_by_category.items():
                gt[c] = gt.get(c, 0) + n
            for c, n in s.pl_by_category.items():
                pl[c] = pl.get(c, 0) + n
        lines = [delimiter.join(("category", "log_gt", "log_pl"))]
        for c in self.categories:
            lines.append(delimiter.join((str(c), f"{math.log10(1 + gt.get(c, 0)):.4f}",
                                         f"{math.log10(1 + pl.get(c, 0)):.4f}")))
        return "\n".join(lines) + "\n"


def _cycle(order_fn):
    epoch = 0
    while True:
        for item in order_fn(epoch):
            yield item
        epoch += 1


def run_simulation(labeled: DatasetIndex, unlabeled: DatasetIndex,
                   profile: Optional[TeacherProfile] = None,
                   config: SimConfig = SimConfig()) -> Iterator[IterationStats]:
    """Yield one :class:`IterationStats` per simulated training iteration.

    Each iteration samples labeled (repeat-factor resampled) and unlabeled
    images, builds weak/strong views, runs the synthetic teacher on the weak
    view, filters by threshold, moves pseudo-labels to the strong view,
    drops empty images and composes the MixPL batch (updating the cache).
    Deterministic under ``config.seed``.
    """
    if profile is None:
        profile = preset_profile(config.preset)
    thr = config.threshold
    seed = config.seed

    labeled_pool = DatasetIndex(tuple(img for img in labeled if img.annotations),
                                labeled.categories)
    sampler = LabeledResampler(config.power).fit(labeled_pool) if len(labeled_pool) else None
    deciles = category_deciles(sampler.frequency_) if sampler else {}
    categories = sorted(labeled.categories)

    labeled_iter = _cycle(
        lambda e: sampler.sample_epoch(rng=np.random.default_rng([seed, e, 1]))) if sampler else None
    unl_ids = unlabeled.image_ids
    unlabeled_iter = _cycle(
        lambda e: np.random.default_rng([seed, e, 2]).permutation(unl_ids).tolist()) if unl_ids else None

    specs = {kind: AugmentSpec(kind=kind, seed=seed, erase_thr=config.erase_thr, **config.augment)
             for kind in ("labeled", "weak", "strong")}
    composer = MixPLComposer(config.w_u, config.alpha, config.mosaic_range,
                             config.cache_window, seed).fit()

    def source(img: LabeledImage):
        return render_image(img, seed) if config.render else img.size

    for it in range(config.iterations):
        batch_l = []
        for _ in range(config.n_labeled if labeled_iter else 0):
            img = labeled_pool[next(labeled_iter)]
            view = apply_pipeline(specs["labeled"], source(img), img.annotations,
                                  view_rng(seed, img.image_id, "labeled", it))
            batch_l.append(LabeledSample(img.image_id, view.raster, view.labels))

        gt = dict.fromkeys(("small", "medium", "large"), 0)
        pl = dict(gt)
        gt_cat, pl_cat = {}, {}
        fp = detected = filtered = 0
        pseudo = []
        for _ in range(config.n_unlabeled if unlabeled_iter else 0):
            img = unlabeled[next(unlabeled_iter)]
            src = source(img)
            weak = apply_pipeline(specs["weak"], src, img.annotations,
                                  view_rng(seed, img.image_id, "weak", it))
            strong = apply_pipeline(specs["strong"], src, [],
                                    view_rng(seed, img.image_id, "strong", it))
            weak_img = LabeledImage(img.image_id, *weak.size, tuple(weak.labels))
            out = run_teacher(profile, weak_img, it, np.random.default_rng([seed, it, img.image_id, 3]),
                              deciles, categories)
            kept = filter_by_threshold(out.detections, thr)
            detected += out.n_true
            fp += out.n_false
            filtered += len(out.detections) - len(kept)
            for k, v in count_by_scale(weak.labels).items():
                gt[k] += v
            for k, v in count_by_scale(kept).items():
                pl[k] += v
            for a in weak.labels:
                gt_cat[a.category] = gt_cat.get(a.category, 0) + 1
            for d in kept:
                pl_cat[d.category] = pl_cat.get(d.category, 0) + 1

            moved = transfer_labels(kept, weak.transform, strong.transform, strong.size)
            moved = filter_erased(moved, strong.erased, config.erase_thr)
            pseudo.append((strong.raster, PseudoLabelSet(img.image_id, moved, it)))

        n_empty = 0
        if config.filter_empty:
            pseudo, n_empty = filter_empty_images(pseudo)
        batch = composer.compose(batch_l, pseudo, it)
        yield IterationStats(it, gt, pl, n_empty, fp, detected, filtered,
                             len(composer.cache_), gt_cat, pl_cat, len(batch.mixed))


def simulate(labeled, unlabeled, profile=None, config: SimConfig = SimConfig()) -> SimStats:
    return SimStats(run_simulation(labeled, unlabeled, profile, config), labeled.categories)
