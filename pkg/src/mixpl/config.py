"""Versioned JSON run configuration with defaults for every field.

Schema (version 1)::

    {
      "version": 1,
      "seed": 0,
      "out": null,                      # falls back to $MIXPL_OUT, then ./mixpl-out
      "dataset": {
        "path": null,                   # COCO annotation file; synthetic data when null
        "unlabeled_path": null,         # optional separate unlabeled set (skips splitting)
        "kind": null,                   # "coco-like" | "long-tail"; null picks per command
        "n_images": 200,
        "n_categories": 10,
        "objects_per_image": 7.0,
        "fractions": [1.0, 0.64, 0.36, 0.25, 0.16, 0.09, 0.04, 0.04, 0.02, 0.01]
      },
      "split": {"fraction": 0.1},
      "preset": "ce-loss",              # ce-loss | focal | fcos
      "thr": null,                      # null uses the preset threshold
      "batch": {"n_labeled": 1, "n_unlabeled": 4},
      "w_u": 2.0,
      "alpha": 0.5,
      "mosaic_range": [400, 800],
      "power": 0.5,
      "iterations": 100,
      "render": false,
      "filter_empty": true,
      "cache_window": 1,
      "erase_thr": 0.7,
      "augment": {},                    # AugmentSpec overrides shared by all views
      "teacher": {},                    # fp_rate, jitter, fp_score [loc, sigma], fp_scale_mix
      "grad": {"n_scenes": 8, "iteration": 1000, "thresholds": [0.5, 0.7, 0.9],
               "augmentations": ["weak", "strong", "mixup", "mosaic"],
               "bins": 64, "smooth": 0, "iou_thr": 0.5, "svg": false},
      "images": null                    # image ids for mix / mosaic; null takes the first ones
    }
"""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Mapping, Optional

SCHEMA_VERSION = 1
OUT_ENV = "MIXPL_OUT"
DEFAULT_OUT = "mixpl-out"

DEFAULTS: dict = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "out": None,
    "dataset": {
        "path": None,
        "unlabeled_path": None,
        "kind": None,
        "n_images": 200,
        "n_categories": 10,
        "objects_per_image": 7.0,
        "fractions": [1.0, 0.64, 0.36, 0.25, 0.16, 0.09, 0.04, 0.04, 0.02, 0.01],
    },
    "split": {"fraction": 0.1},
    "preset": "ce-loss",
    "thr": None,
    "batch": {"n_labeled": 1, "n_unlabeled": 4},
    "w_u": 2.0,
    "alpha": 0.5,
    "mosaic_range": [400, 800],
    "power": 0.5,
    "iterations": 100,
    "render": False,
    "filter_empty": True,
    "cache_window": 1,
    "erase_thr": 0.7,
    "augment": {},
    "teacher": {},
    "grad": {
        "n_scenes": 8,
        "iteration": 1000,
        "thresholds": [0.5, 0.7, 0.9],
        "augmentations": ["weak", "strong", "mixup", "mosaic"],
        "bins": 64,
        "smooth": 0,
        "iou_thr": 0.5,
        "svg": False,
    },
    "images": None,
}

# sections whose keys are free-form and checked by the consumer
_OPEN_SECTIONS = {"augment", "teacher"}
_AUGMENT_KEYS = {"short_range", "long_cap", "flip_prob", "n_color_ops", "n_geometric_ops",
                 "erase_patches", "erase_ratio", "interpolation"}
_TEACHER_KEYS = {"fp_rate", "jitter", "fp_score", "fp_scale_mix"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: Mapping, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict) and key not in _OPEN_SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{where}.{key}: expected an object")
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check(cfg: dict) -> dict:
    if cfg["version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']!r} (expected {SCHEMA_VERSION})")
    bad = set(cfg["augment"]) - _AUGMENT_KEYS
    if bad:
        raise ConfigError(f"augment: unknown keys {sorted(bad)}")
    bad = set(cfg["teacher"]) - _TEACHER_KEYS
    if bad:
        raise ConfigError(f"teacher: unknown keys {sorted(bad)}")
    lo, hi = cfg["mosaic_range"]
    if not 0 < lo <= hi:
        raise ConfigError(f"mosaic_range must satisfy 0 < lo <= hi, got {cfg['mosaic_range']}")
    kind = cfg["dataset"]["kind"]
    if kind not in (None, "coco-like", "long-tail"):
        raise ConfigError(f"dataset.kind must be coco-like or long-tail, got {kind!r}")
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> dict:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
        if not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        if "version" not in doc:
            raise ConfigError(f"{path}: missing 'version'")
        cfg = _merge(cfg, doc, "config")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, sub = key.partition(".")
        if sub:
            cfg[section][sub] = value
        else:
            cfg[key] = value
    return _check(cfg)


def output_dir(cfg: Mapping) -> Path:
    return Path(cfg["out"] or os.environ.get(OUT_ENV) or DEFAULT_OUT)
