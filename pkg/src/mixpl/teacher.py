"""Synthetic teacher: recall schedules, score model, predictions and EMA."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, special, stats

from .boxes import SCALE_CLASSES, BBox, Detection, LabeledImage, area_class, clip_box
from .coco import COCO_SCALE_MIX, _sample_box

# mean detection score per scale class (small, medium, large) by detector family
SCORE_TARGETS = {
    "faster-rcnn": (0.304, 0.406, 0.509),
    "retinanet": (0.147, 0.186, 0.205),
}


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreDist:
    """Normal(``loc``, ``sigma``) truncated to [0, 1]; ``sigma=0`` is a point mass."""
    loc: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("score sigma must be non-negative")

    @property
    def mean(self) -> float:
        if self.sigma == 0:
            return min(max(self.loc, 0.0), 1.0)
        a, b = (0.0 - self.loc) / self.sigma, (1.0 - self.loc) / self.sigma
        return float(stats.truncnorm.mean(a, b, loc=self.loc, scale=self.sigma))

    def sample(self, rng, n=None):
        """Inverse-CDF sampling; draws exactly one uniform per value."""
        u = rng.random(n)
        if self.sigma == 0:
            return np.full_like(u, self.mean) if n is not None else self.mean
        a, b = (0.0 - self.loc) / self.sigma, (1.0 - self.loc) / self.sigma
        lo, hi = special.ndtr(a), special.ndtr(b)
        x = self.loc + self.sigma * special.ndtri(lo + u * (hi - lo))
        return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class RecallCurve:
    """Logistic ramp from ``floor`` to ``asymptote`` centred on ``midpoint``."""
    floor: float
    asymptote: float
    midpoint: float = 300.0
    steepness: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.floor <= self.asymptote <= 1.0:
            raise ValueError(f"recall curve needs 0 <= floor <= asymptote <= 1, got {self}")
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")

    def __call__(self, iteration: float) -> float:
        z = (iteration - self.midpoint) / self.steepness
        return self.floor + (self.asymptote - self.floor) * special.expit(z)

    @classmethod
    def constant(cls, value: float) -> "RecallCurve":
        return cls(value, value)


def _default_recall():
    return {"small": RecallCurve(0.05, 0.50, 400.0), "medium": RecallCurve(0.20, 0.80, 400.0),
            "large": RecallCurve(0.30, 0.97, 400.0)}


def _default_scores():
    # Faster R-CNN calibration, means 0.304 / 0.406 / 0.509
    return {"small": ScoreDist(0.2222, 0.25), "medium": ScoreDist(0.3761, 0.25),
            "large": ScoreDist(0.5116, 0.25)}


@dataclass(frozen=True)
class TeacherProfile:
    recall: Mapping[str, RecallCurve] = field(default_factory=_default_recall)
    # head -> tail recall multipliers, one per category-frequency decile
    decile_multipliers: Tuple[float, ...] = (1.0, 0.97, 0.94, 0.91, 0.88, 0.85, 0.82, 0.79, 0.76, 0.73)
    scores: Mapping[str, ScoreDist] = field(default_factory=_default_scores)
    fp_rate: float = 2.9
    fp_score: ScoreDist = ScoreDist(0.75, 0.15)
    fp_scale_mix: Tuple[float, float, float] = (0.0, 0.2, 0.8)
    jitter: float = 0.02
    category_recall: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for key in ("recall", "scores"):
            missing = set(SCALE_CLASSES) - set(getattr(self, key))
            if missing:
                raise ValueError(f"{key} missing scale classes {sorted(missing)}")
        if len(self.decile_multipliers) != 10:
            raise ValueError("need exactly 10 decile multipliers")
        if any(not 0.0 <= m <= 1.0 for m in self.decile_multipliers):
            raise ValueError("decile multipliers must be in [0, 1]")
        if self.fp_rate < 0 or self.jitter < 0:
            raise ValueError("fp_rate and jitter must be non-negative")
        means = [self.scores[s].mean for s in SCALE_CLASSES]
        if not means[0] <= means[1] <= means[2]:
            raise ValueError(f"score means must grow with object size, got {means}")

    def recall_at(self, scale: str, iteration: float, decile: int = 0, category=None) -> float:
        mult = self.category_recall.get(category, self.decile_multipliers[decile])
        return float(min(1.0, max(0.0, self.recall[scale](iteration) * mult)))

    def replace(self, **changes) -> "TeacherProfile":
        return dataclasses.replace(self, **changes)

    @classmethod
    def trivial(cls, recall: float = 1.0, score: float = 0.9) -> "TeacherProfile":
        """Constant recall, fixed scores, no false positives, no jitter."""
        return cls(recall={s: RecallCurve.constant(recall) for s in SCALE_CLASSES},
                   decile_multipliers=(1.0,) * 10,
                   scores={s: ScoreDist(score, 0.0) for s in SCALE_CLASSES},
                   fp_rate=0.0, jitter=0.0)


def truncnorm_loc_for_mean(target: float, sigma: float) -> float:
    """Location of a [0, 1]-truncated normal with the given sigma and mean."""
    if not 0.0 < target < 1.0:
        raise CalibrationError(f"target mean {target} is not reachable inside (0, 1)")
    if sigma == 0:
        return target
    f = lambda loc: ScoreDist(loc, sigma).mean - target
    lo, hi = -10.0 * sigma - 1.0, 1.0 + 10.0 * sigma
    if f(lo) > 0 or f(hi) < 0:
        raise CalibrationError(f"mean {target} unreachable with sigma {sigma}")
    return float(optimize.brentq(f, lo, hi, xtol=1e-12))


def calibrate_scores(profile: TeacherProfile, targets) -> TeacherProfile:
    """Shift each scale's score location so its truncated mean hits the target.

    ``targets`` is a (small, medium, large) tuple or a scale->mean mapping.
    Sigmas are kept.
    """
    if not isinstance(targets, Mapping):
        targets = dict(zip(SCALE_CLASSES, targets))
    vals = [targets[s] for s in SCALE_CLASSES]
    if not vals[0] <= vals[1] <= vals[2]:
        raise CalibrationError(f"targets must be ordered small <= medium <= large, got {vals}")
    scores = {s: ScoreDist(truncnorm_loc_for_mean(targets[s], profile.scores[s].sigma),
                           profile.scores[s].sigma)
              for s in SCALE_CLASSES}
    return profile.replace(scores=scores)


def category_deciles(frequencies: Mapping[int, float]) -> Dict[int, int]:
    """Rank categories by frequency (most common first) into deciles 0..9."""
    cats = sorted(frequencies, key=lambda c: (-frequencies[c], c))
    n = len(cats)
    return {c: min(9, (10 * i) // n) for i, c in enumerate(cats)} if n else {}


def _jitter_box(box: BBox, sigma_frac: float, rng) -> np.ndarray:
    noise = rng.normal(0.0, 1.0, 4)
    w, h = box.width, box.height
    return box.to_array() + sigma_frac * noise * np.array([w, h, w, h])


@dataclass
class TeacherOutput:
    """Everything one teacher pass produced for one image.

    ``strength`` holds a latent score for every GT instance (the score the
    teacher reports when it detects it). ``origin[i]`` is the GT index behind
    ``detections[i]``, or -1 for a false positive.
    """
    detections: list
    origin: list
    strength: np.ndarray
    detected: np.ndarray

    @property
    def n_true(self) -> int:
        return sum(1 for o in self.origin if o >= 0)

    @property
    def n_false(self) -> int:
        return sum(1 for o in self.origin if o < 0)


def run_teacher(profile: TeacherProfile, image: LabeledImage, iteration, rng,
                deciles: Optional[Mapping[int, int]] = None,
                categories: Optional[Sequence[int]] = None) -> TeacherOutput:
    deciles = deciles or {}
    anns = image.annotations
    n = len(anns)
    scales = [area_class(a.box) for a in anns]
    strength = np.array([profile.scores[s].sample(rng) for s in scales], dtype=np.float64)
    hit = rng.random(n)
    recall = np.array([profile.recall_at(s, iteration, deciles.get(a.category, 0), a.category)
                       for s, a in zip(scales, anns)])
    detected = hit < recall
    dets, origin = [], []
    for i, ann in enumerate(anns):
        if not detected[i]:
            continue
        box = ann.box
        if profile.jitter > 0:
            x1, y1, x2, y2 = _jitter_box(box, profile.jitter, rng)
            box = clip_box(BBox(float(min(x1, x2 - 1e-6)), float(min(y1, y2 - 1e-6)),
                                float(x2), float(y2)), image.width, image.height)
            if box is None:
                detected[i] = False
                continue
        dets.append(Detection(box, ann.category, float(strength[i])))
        origin.append(i)

    n_fp = rng.poisson(profile.fp_rate) if profile.fp_rate > 0 else 0
    if n_fp:
        cats = list(categories) if categories else sorted({a.category for a in anns}) or [1]
        mix = np.asarray(profile.fp_scale_mix, float)
        mix = mix / mix.sum()
        for _ in range(n_fp):
            scale = SCALE_CLASSES[rng.choice(3, p=mix)]
            box = _sample_box(rng, image.width, image.height, scale)
            cat = int(cats[rng.integers(len(cats))])
            dets.append(Detection(box, cat, float(profile.fp_score.sample(rng))))
            origin.append(-1)
    return TeacherOutput(dets, origin, strength, detected)


def simulate_predictions(profile: TeacherProfile, image: LabeledImage, iteration, rng,
                         deciles=None, categories=None) -> list:
    """Teacher detections for one image: recalled GT (jittered) plus false positives."""
    return run_teacher(profile, image, iteration, rng, deciles, categories).detections


def ema_update(teacher, student, m: float) -> np.ndarray:
    """``m * teacher + (1 - m) * student``, elementwise."""
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"parameter vectors differ in shape: {t.shape} vs {s.shape}")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    return m * t + (1.0 - m) * s


class EMATeacher:
    """Keeps teacher parameters as an EMA of a student parameter vector."""

    def __init__(self, params, momentum: float = 0.999):
        self.params = np.array(params, dtype=np.float64)
        self.momentum = momentum
        self.steps = 0

    def update(self, student) -> np.ndarray:
        self.params = ema_update(self.params, student, self.momentum)
        self.steps += 1
        return self.params


# --------------------------------------------------------------------------
# student response model used by the gradient analysis

@dataclass(frozen=True)
class BlendAttenuationScorer:
    """Student foreground probability for an anchor.

    An anchor covering an object of latent strength ``s`` seen at visibility
    ``v`` gets logit ``v * (logit(s) + eps) + (1 - v) * logit(background)``.
    Mixup scales ``v`` by the blend weight of the object's source image, so
    an object overlaid on another image's background drifts toward the
    background response. Anchors on background get ``logit(background) + eps``.
    """
    background: float = 0.05
    noise: float = 0.5
    eps: float = 1e-4

    def foreground(self, strength, visibility, rng) -> np.ndarray:
        s = np.clip(np.asarray(strength, dtype=np.float64), self.eps, 1 - self.eps)
        v = np.asarray(visibility, dtype=np.float64)
        z = special.logit(s) + self.noise * rng.standard_normal(s.shape)
        return special.expit(v * z + (1.0 - v) * special.logit(self.background))

    def negative(self, n: int, rng) -> np.ndarray:
        z = special.logit(self.background) + self.noise * rng.standard_normal(n)
        return special.expit(z)


PRESET_TARGETS = {"ce-loss": "faster-rcnn", "focal": "retinanet", "fcos": "retinanet"}


def preset_profile(preset: str = "ce-loss") -> TeacherProfile:
    """Teacher profile whose scale-wise mean scores follow the preset's detector family."""
    if preset not in PRESET_TARGETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESET_TARGETS)}")
    base = TeacherProfile()
    if PRESET_TARGETS[preset] == "retinanet":
        base = base.replace(scores={s: ScoreDist(0.15, 0.12) for s in SCALE_CLASSES},
                            fp_score=ScoreDist(0.3, 0.12))
    return calibrate_scores(base, SCORE_TARGETS[PRESET_TARGETS[preset]])
