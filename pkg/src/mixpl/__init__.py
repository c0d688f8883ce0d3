"""Data pipeline for mixed pseudo-label semi-supervised object detection.

Box primitives, COCO I/O, weak/strong augmentation with exact box
transfer, Pseudo Mixup / Pseudo Mosaic batch composition, labeled
resampling, gradient-density analysis and a synthetic teacher simulator.
"""
from .augment import AugmentPipeline, AugmentSpec, apply_pipeline, transfer_labels
from .boxes import (Annotation, BBox, DatasetIndex, Detection, LabeledImage, area_class,
                    clip_box, iou)
from .coco import load_dataset, split_dataset
from .gradient import GradientDensityAnalyzer, bce_loss, gradient_norm
from .pseudo import (MixPLComposer, PseudoLabelCache, PseudoLabelFilter, pseudo_mixup,
                     pseudo_mosaic)
from .raster import ImageRaster
from .resample import LabeledResampler
from .simulate import SimConfig, simulate
from .teacher import TeacherProfile, calibrate_scores, ema_update, preset_profile
from .transforms import AffineTransform

__version__ = "0.1.0"

__all__ = [
    "AffineTransform", "Annotation", "AugmentPipeline", "AugmentSpec", "BBox", "DatasetIndex",
    "Detection", "GradientDensityAnalyzer", "ImageRaster", "LabeledImage", "LabeledResampler",
    "MixPLComposer", "PseudoLabelCache", "PseudoLabelFilter", "SimConfig", "TeacherProfile",
    "apply_pipeline", "area_class", "bce_loss", "calibrate_scores", "clip_box", "ema_update",
    "gradient_norm", "iou", "load_dataset", "preset_profile", "pseudo_mixup", "pseudo_mosaic",
    "simulate", "split_dataset", "transfer_labels",
]
