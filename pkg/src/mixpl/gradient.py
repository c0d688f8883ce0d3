"""Gradient-norm and gradient-density analysis of TP/FP/TN/FN anchor samples.

For a sigmoid classifier with logit ``x`` and ``p = sigmoid(x)`` the BCE
gradient with respect to ``x`` is ``p - p*``; its magnitude ``|p - p*|`` is
the per-sample gradient norm binned into densities here.
"""
from __future__ import annotations

import dataclasses
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentSpec, apply_pipeline, filter_erased, erased_coverage, view_rng
from .boxes import BBox, LabeledImage, boxes_array, clip_box, iou_matrix
from .pseudo import mosaic_layout
from .teacher import BlendAttenuationScorer, TeacherProfile, run_teacher
from .transforms import warp_labels

TAXONOMY = ("TP", "FP", "TN", "FN")
AUGMENTATIONS = ("weak", "strong", "mixup", "mosaic")
BCE_EPS = 1e-7

# (stride, anchor sides) per pyramid level
DEFAULT_LEVELS = ((8, (16, 24)), (16, (32, 48)), (32, (64, 96)), (64, (128, 192)),
                  (128, (256, 384)))


def bce_loss(p, p_star, eps: float = BCE_EPS):
    """Binary cross-entropy ``-p* log p - (1 - p*) log(1 - p)``, with p clamped."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    p_star = np.asarray(p_star, dtype=np.float64)
    out = -p_star * np.log(p) - (1.0 - p_star) * np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def gradient_norm(p, p_star):
    """``|p - p*|``: ``1 - p`` for positives, ``p`` for negatives."""
    out = np.abs(np.asarray(p, dtype=np.float64) - np.asarray(p_star, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def generate_anchors(w, h, stride, scales) -> np.ndarray:
    """Square anchors of every side in ``scales`` centred on each stride cell.

    Returns an (N, 4) corner-form array clipped to the image; anchors that
    clip to nothing are dropped.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    scales = list(scales)
    if not scales:
        return np.zeros((0, 4))
    cx = (np.arange(int(math.ceil(w / stride))) + 0.5) * stride
    cy = (np.arange(int(math.ceil(h / stride))) + 0.5) * stride
    cx, cy = np.meshgrid(cx, cy)
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)
    centers = centers[(centers[:, 0] < w) & (centers[:, 1] < h)]
    out = []
    for s in scales:
        half = s / 2.0
        boxes = np.concatenate([centers - half, centers + half], axis=1)
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, w)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, h)
        keep = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        out.append(boxes[keep])
    return np.concatenate(out, axis=0)


def pyramid_anchors(w, h, levels=DEFAULT_LEVELS) -> np.ndarray:
    return np.concatenate([generate_anchors(w, h, stride, scales) for stride, scales in levels])


@dataclass(frozen=True)
class SampleRecord:
    anchor: BBox
    p: float
    p_star_pl: int
    p_star_gt: int
    taxonomy: str
    g: float


def taxonomy_of(pl_positive, gt_positive) -> np.ndarray:
    pl = np.asarray(pl_positive, dtype=bool)
    gt = np.asarray(gt_positive, dtype=bool)
    return np.where(pl, np.where(gt, "TP", "FP"), np.where(gt, "FN", "TN"))


@dataclass
class SampleSet:
    """Column-oriented anchor samples; ``p`` and ``g`` stay NaN until scored."""
    anchors: np.ndarray
    pl_target: np.ndarray
    gt_target: np.ndarray
    pl_match: np.ndarray   # index of best-IoU pseudo-label, -1 if none
    gt_match: np.ndarray   # index of best-IoU ground truth, -1 if none
    p: np.ndarray
    g: np.ndarray

    @property
    def taxonomy(self) -> np.ndarray:
        return taxonomy_of(self.pl_target, self.gt_target)

    def __len__(self):
        return len(self.anchors)

    def score(self, p) -> "SampleSet":
        p = np.asarray(p, dtype=np.float64)
        return dataclasses.replace(self, p=p, g=gradient_norm(p, self.pl_target.astype(float)))

    def records(self) -> List[SampleRecord]:
        tax = self.taxonomy
        return [SampleRecord(BBox(*map(float, a)), float(p), int(pl), int(gt), str(t), float(g))
                for a, p, pl, gt, t, g in zip(self.anchors, self.p, self.pl_target,
                                              self.gt_target, tax, self.g)]


def _best_match(anchors, boxes, iou_thr):
    ious = iou_matrix(anchors, boxes)
    if ious.shape[1] == 0:
        return np.zeros(len(anchors), dtype=bool), np.full(len(anchors), -1)
    best = ious.argmax(axis=1)
    positive = ious[np.arange(len(anchors)), best] >= iou_thr
    return positive, np.where(positive, best, -1)


def assign_samples(anchors, gt_labels, pseudo_labels, iou_thr: float = 0.5) -> SampleSet:
    """Label each anchor positive/negative under GT and under pseudo-labels.

    An anchor is positive for a label set iff its max IoU against it is at
    least ``iou_thr``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_pos, gt_idx = _best_match(anchors, boxes_array(gt_labels), iou_thr)
    pl_pos, pl_idx = _best_match(anchors, boxes_array(pseudo_labels), iou_thr)
    nan = np.full(len(anchors), np.nan)
    return SampleSet(anchors, pl_pos.astype(np.int8), gt_pos.astype(np.int8),
                     pl_idx, gt_idx, nan, nan.copy())


@dataclass
class DensityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    taxonomy: str
    augmentation: str = ""
    threshold: Optional[float] = None

    @property
    def bin_centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, delimiter=",") -> str:
        lines = [f"bin_center{delimiter}count"]
        lines += [f"{c:.6f}{delimiter}{n:g}" for c, n in zip(self.bin_centers, self.counts)]
        return "\n".join(lines) + "\n"


def density(samples, bins: int = 64, smooth: int = 0, augmentation="", threshold=None
            ) -> Dict[str, DensityHistogram]:
    """Per-taxonomy histogram of gradient norms over ``bins`` uniform bins of [0, 1].

    ``samples`` is a :class:`SampleSet` or a sequence of :class:`SampleRecord`.
    ``smooth > 0`` replaces each count by the sum over ``smooth`` neighbouring
    bins either side (GHM-style neighbourhood density).
    """
    if isinstance(samples, SampleSet):
        g, tax = samples.g, samples.taxonomy
    else:
        g = np.array([r.g for r in samples], dtype=np.float64)
        tax = np.array([r.taxonomy for r in samples])
    if np.isnan(g).any():
        raise ValueError("samples carry unscored gradient norms")
    edges = np.linspace(0.0, 1.0, bins + 1)
    out = {}
    for t in TAXONOMY:
        counts, _ = np.histogram(g[tax == t], bins=edges)
        if smooth > 0:
            kernel = np.ones(2 * smooth + 1)
            counts = np.convolve(counts, kernel, mode="same")
        out[t] = DensityHistogram(edges, counts, t, augmentation, threshold)
    return out


# --------------------------------------------------------------------------
# scenes: boxes with latent strength and visibility, pushed through augmentations

@dataclass(frozen=True)
class SceneObject:
    box: BBox
    category: int
    strength: float
    visibility: float = 1.0


@dataclass(frozen=True)
class Scene:
    """One image's GT and (unthresholded) pseudo-labels in a shared frame.

    Pseudo-label ``strength`` is the teacher score; thresholding keeps the
    ones with ``strength >= thr``.
    """
    image_id: int
    size: Tuple[int, int]
    gt: tuple
    pl: tuple

    def threshold(self, thr: float) -> list:
        return [o for o in self.pl if o.strength >= thr]


def make_scene(image: LabeledImage, profile: TeacherProfile, iteration, rng) -> Scene:
    out = run_teacher(profile, image, iteration, rng)
    gt = tuple(SceneObject(a.box, a.category, float(s))
               for a, s in zip(image.annotations, out.strength))
    pl = tuple(SceneObject(d.box, d.category, d.score) for d in out.detections)
    return Scene(image.image_id, image.size, gt, pl)


def _scale_visibility(objs, factor):
    return [dataclasses.replace(o, visibility=o.visibility * factor) for o in objs]


def augment_scene(scene: Scene, kind: str, rng, erase_thr=0.7) -> Scene:
    """Weak or strong view of a scene; erased pixels reduce object visibility."""
    view = apply_pipeline(AugmentSpec(kind=kind), scene.size, [], rng)
    size = view.size
    gt = warp_labels(scene.gt, view.transform, size)
    pl = warp_labels(scene.pl, view.transform, size)
    if view.erased:
        pl = filter_erased(pl, view.erased, erase_thr)
        gt = [dataclasses.replace(o, visibility=o.visibility * (1 - erased_coverage(o.box, view.erased)))
              for o in gt]
        pl = [dataclasses.replace(o, visibility=o.visibility * (1 - erased_coverage(o.box, view.erased)))
              for o in pl]
    return Scene(scene.image_id, size, tuple(gt), tuple(pl))


def mixup_scene(a: Scene, b: Scene, alpha=0.5) -> Scene:
    size = (max(a.size[0], b.size[0]), max(a.size[1], b.size[1]))
    gt = _scale_visibility(a.gt, alpha) + _scale_visibility(b.gt, 1 - alpha)
    pl = _scale_visibility(a.pl, alpha) + _scale_visibility(b.pl, 1 - alpha)
    return Scene(a.image_id, size, tuple(gt), tuple(pl))


def mosaic_scene(four: Sequence[Scene], longest_edge: float) -> Scene:
    """Down-sampled objects keep ``sqrt(scale factor)`` of their visibility."""
    layout = mosaic_layout([s.size for s in four], longest_edge)
    gt, pl = [], []
    for s, tf, (nw, _) in zip(four, layout.transforms, layout.sizes):
        factor = min(1.0, math.sqrt(nw / s.size[0]))
        gt += _scale_visibility(warp_labels(s.gt, tf, layout.canvas), factor)
        pl += _scale_visibility(warp_labels(s.pl, tf, layout.canvas), factor)
    return Scene(four[0].image_id, layout.canvas, tuple(gt), tuple(pl))


def score_scene_samples(scene: Scene, samples: SampleSet, pl_objects, scorer: BlendAttenuationScorer,
                        noise: np.ndarray) -> SampleSet:
    """Student probabilities for every anchor of a scene."""
    n = len(samples)
    strength = np.full(n, scorer.background)
    vis = np.ones(n)
    gt_idx, pl_idx = samples.gt_match, samples.pl_match
    if scene.gt:
        gs = np.array([o.strength for o in scene.gt])
        gv = np.array([o.visibility for o in scene.gt])
        m = gt_idx >= 0
        strength[m], vis[m] = gs[gt_idx[m]], gv[gt_idx[m]]
    if pl_objects:
        ps = np.array([o.strength for o in pl_objects])
        pv = np.array([o.visibility for o in pl_objects])
        m = (gt_idx < 0) & (pl_idx >= 0)
        strength[m], vis[m] = ps[pl_idx[m]], pv[pl_idx[m]]
    s = np.clip(strength, scorer.eps, 1 - scorer.eps)
    z = vis * (special.logit(s) + scorer.noise * noise) + (1 - vis) * special.logit(scorer.background)
    return samples.score(special.expit(z))


@dataclass
class GradientReport:
    histograms: Dict[Tuple[str, float, str], DensityHistogram]
    samples: Dict[Tuple[str, float], List[SampleSet]]
    bins: int

    def g_values(self, augmentation, threshold, taxonomy) -> np.ndarray:
        parts = [s.g[s.taxonomy == taxonomy] for s in self.samples[(augmentation, threshold)]]
        return np.concatenate(parts) if parts else np.zeros(0)

    def mean_g(self, augmentation, threshold, taxonomy) -> float:
        g = self.g_values(augmentation, threshold, taxonomy)
        return float(g.mean()) if len(g) else float("nan")

    def count(self, augmentation, threshold, taxonomy) -> int:
        return self.histograms[(augmentation, threshold, taxonomy)].total

    def n_anchors(self, augmentation, threshold) -> int:
        return sum(len(s) for s in self.samples[(augmentation, threshold)])

    def grid_text(self, delimiter=",") -> str:
        """Long-format table: augmentation, threshold, taxonomy, bin_center, count."""
        buf = io.StringIO()
        buf.write(delimiter.join(("augmentation", "threshold", "taxonomy", "bin_center", "count")) + "\n")
        for (aug, thr, tax), h in self.histograms.items():
            for c, n in zip(h.bin_centers, h.counts):
                buf.write(f"{aug}{delimiter}{thr:g}{delimiter}{tax}{delimiter}{c:.6f}{delimiter}{n:g}\n")
        return buf.getvalue()

    def write_csv(self, directory) -> List[Path]:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for (aug, thr, tax), h in self.histograms.items():
            path = out / f"density_{tax}_{aug}_thr{thr:.2f}.csv"
            path.write_text(h.to_csv())
            paths.append(path)
        return paths

    def write_svg(self, path, taxonomies=("TP", "FN")) -> Path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        thresholds = sorted({thr for _, thr, _ in self.histograms})
        augs = list(dict.fromkeys(aug for aug, _, _ in self.histograms))
        fig, axes = plt.subplots(len(taxonomies), len(thresholds), squeeze=False,
                                 figsize=(4 * len(thresholds), 3 * len(taxonomies)))
        for i, tax in enumerate(taxonomies):
            for j, thr in enumerate(thresholds):
                ax = axes[i][j]
                for aug in augs:
                    h = self.histograms[(aug, thr, tax)]
                    ax.plot(h.bin_centers, h.counts, label=aug)
                ax.set_yscale("symlog")
                ax.set_title(f"{tax}, thr={thr:g}")
                ax.set_xlabel("gradient norm")
        axes[0][0].legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
        return Path(path)


_AUG_STREAM = {a: i for i, a in enumerate(AUGMENTATIONS)}


def _strong(scenes, i, seed, k):
    return augment_scene(scenes[i], "strong", view_rng(seed, scenes[i].image_id, "strong", k))


def augmented_views(scenes: Sequence[Scene], augmentation: str, seed=0, alpha=0.5,
                    mosaic_range=(400, 800)) -> List[Scene]:
    """One augmented scene per input scene.

    Mixup pairs scene ``i`` with ``i + 1``; mosaic combines ``i .. i + 3``
    (cyclically). Both operate on strong views, as in training.
    """
    n = len(scenes)
    out = []
    for i in range(n):
        if augmentation == "weak":
            out.append(augment_scene(scenes[i], "weak", view_rng(seed, scenes[i].image_id, "weak", 0)))
        elif augmentation == "strong":
            out.append(_strong(scenes, i, seed, 0))
        elif augmentation == "mixup":
            out.append(mixup_scene(_strong(scenes, i, seed, 0), _strong(scenes, (i + 1) % n, seed, 1), alpha))
        elif augmentation == "mosaic":
            rng = np.random.default_rng([seed, i, 11])
            edge = int(rng.integers(mosaic_range[0], mosaic_range[1] + 1))
            four = [_strong(scenes, (i + k) % n, seed, k) for k in range(4)]
            out.append(mosaic_scene(four, edge))
        else:
            raise ValueError(f"unknown augmentation {augmentation!r}")
    return out


def compare_augmentations(scenes: Sequence[Scene], augmentations=AUGMENTATIONS,
                          scorer: Optional[BlendAttenuationScorer] = None,
                          thresholds=(0.5, 0.7, 0.9), iou_thr=0.5, bins=64, smooth=0,
                          levels=DEFAULT_LEVELS, seed=0, alpha=0.5) -> GradientReport:
    """Gradient-density histograms for every (augmentation, threshold, taxonomy).

    Each augmented view is built once; thresholds only change which
    pseudo-labels are kept, and the student noise per anchor is shared
    across thresholds so reclassification is monotone.
    """
    scorer = scorer or BlendAttenuationScorer()
    histograms, samples = {}, {}
    for aug in augmentations:
        views = augmented_views(scenes, aug, seed, alpha)
        per_thr = {thr: [] for thr in thresholds}
        for k, view in enumerate(views):
            anchors = pyramid_anchors(*view.size, levels)
            noise = np.random.default_rng([seed, _AUG_STREAM.get(aug, 9), k, 5]).standard_normal(len(anchors))
            for thr in thresholds:
                kept = view.threshold(thr)
                s = assign_samples(anchors, view.gt, kept, iou_thr)
                per_thr[thr].append(score_scene_samples(view, s, kept, scorer, noise))
        for thr in thresholds:
            samples[(aug, thr)] = per_thr[thr]
            merged = _concat(per_thr[thr])
            for tax, h in density(merged, bins, smooth, aug, thr).items():
                histograms[(aug, thr, tax)] = h
    return GradientReport(histograms, samples, bins)


def _concat(sets: Sequence[SampleSet]) -> SampleSet:
    if not sets:
        empty = np.zeros(0)
        return SampleSet(np.zeros((0, 4)), empty.astype(np.int8), empty.astype(np.int8),
                         empty.astype(int), empty.astype(int), empty, empty)
    return SampleSet(*(np.concatenate([getattr(s, f.name) for s in sets])
                       for f in dataclasses.fields(SampleSet)))


class GradientDensityAnalyzer(BaseEstimator):
    """Estimator front-end for :func:`compare_augmentations`.

    ``fit`` takes a list of :class:`Scene` and stores ``report_``.
    """

    def __init__(self, thresholds=(0.5, 0.7, 0.9), augmentations=AUGMENTATIONS, bins=64,
                 iou_thr=0.5, smooth=0, alpha=0.5, seed=0):
        self.thresholds = thresholds
        self.augmentations = augmentations
        self.bins = bins
        self.iou_thr = iou_thr
        self.smooth = smooth
        self.alpha = alpha
        self.seed = seed

    def fit(self, X: Sequence[Scene], y=None, scorer=None):
        if not X:
            raise ValueError("need at least one scene")
        for thr in self.thresholds:
            if not 0.0 <= thr <= 1.0:
                raise ValueError(f"threshold {thr} outside [0, 1]")
        self.report_ = compare_augmentations(X, self.augmentations, scorer, tuple(self.thresholds),
                                             self.iou_thr, self.bins, self.smooth,
                                             seed=self.seed, alpha=self.alpha)
        return self

    def mean_g(self, augmentation, threshold, taxonomy="FN") -> float:
        check_is_fitted(self, "report_")
        return self.report_.mean_g(augmentation, threshold, taxonomy)
