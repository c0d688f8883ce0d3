"""``mixpl`` command-line entry point.

Every subcommand reads the JSON config (see :mod:`mixpl.config`), applies
flag overrides and writes machine-readable outputs to the output directory.
Errors exit nonzero with a single ``mixpl: <module>: <message>`` line.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import coco
from .boxes import SCALE_CLASSES, DatasetIndex, area_class, count_by_scale
from .config import DEFAULTS, ConfigError, load_config, output_dir
from .pseudo import filter_by_threshold, pseudo_mixup, pseudo_mosaic, THRESHOLD_PRESETS
from .raster import write_png, write_raw
from .resample import LabeledResampler
from .simulate import SimConfig, simulate
from .teacher import ScoreDist, preset_profile, run_teacher

logger = logging.getLogger("mixpl")

COMMANDS = ("split", "mix", "mosaic", "resample-plan", "grad-density", "simulate", "stats")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _mosaic_range(text: str):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi integers, got {text!r}")
    return [lo, hi]


def _add_common(p: argparse.ArgumentParser):
    d = DEFAULTS
    p.add_argument("--config", help="JSON config file, schema version 1 (default: built-in defaults)")
    p.add_argument("--seed", type=int, help=f"global seed (default: {d['seed']})")
    p.add_argument("--out", help="output directory (default: $MIXPL_OUT, else ./mixpl-out)")
    p.add_argument("--preset", choices=sorted(THRESHOLD_PRESETS),
                   help=f"detector preset selecting the score threshold (default: {d['preset']})")
    p.add_argument("--thr", type=float, help="pseudo-label score threshold (default: preset value: "
                   + ", ".join(f"{k} {v}" for k, v in THRESHOLD_PRESETS.items()) + ")")
    p.add_argument("--power", type=float, help=f"labeled resampling power (default: {d['power']})")
    p.add_argument("--wu", type=float, dest="w_u", help=f"unlabeled loss weight (default: {d['w_u']})")
    p.add_argument("--iters", type=int, dest="iterations",
                   help=f"simulated iterations (default: {d['iterations']})")
    p.add_argument("--mosaic-range", type=_mosaic_range, dest="mosaic_range", metavar="LO:HI",
                   help="mosaic longest-edge range (default: %d:%d)" % tuple(d["mosaic_range"]))
    p.add_argument("--alpha", type=float, help=f"mixup blend weight (default: {d['alpha']})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixpl", description="Mixed pseudo-label data pipeline tools.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "split": "split a dataset into labeled/unlabeled COCO files",
        "mix": "Pseudo Mixup of two images with their pseudo-labels",
        "mosaic": "Pseudo Mosaic of four images with their pseudo-labels",
        "resample-plan": "repeat factors of the labeled set",
        "grad-density": "gradient-density histograms per taxonomy, augmentation and threshold",
        "simulate": "teacher-student simulation statistics",
        "stats": "scale and category statistics of a dataset",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        _add_common(p)
        if name == "split":
            p.add_argument("--fraction", type=float,
                           help=f"labeled fraction (default: {DEFAULTS['split']['fraction']})")
        if name in ("mix", "mosaic"):
            p.add_argument("--images", type=int, nargs="+",
                           help="source image ids (default: the first images of the dataset)")
        if name == "grad-density":
            p.add_argument("--svg", action="store_true", default=None,
                           help="also write a line plot as SVG, needs matplotlib (default: off)")
        if name == "simulate":
            p.add_argument("--render", action="store_true", default=None,
                           help="render pixel rasters instead of geometry-only views (default: off)")
    return parser


def _overrides(args) -> dict:
    keys = ("seed", "out", "preset", "thr", "power", "w_u", "iterations", "mosaic_range", "alpha",
            "images", "render")
    out = {k: getattr(args, k, None) for k in keys}
    out["split.fraction"] = getattr(args, "fraction", None)
    out["grad.svg"] = getattr(args, "svg", None)
    return out


# --------------------------------------------------------------------------
# inputs

def _dataset(cfg, default_kind="coco-like") -> DatasetIndex:
    d = cfg["dataset"]
    if d["path"]:
        return coco.load_dataset(d["path"])
    kind = d["kind"] or default_kind
    if kind == "long-tail":
        return coco.make_long_tail_dataset(d["n_images"], d["fractions"], seed=cfg["seed"])
    return coco.make_synthetic_dataset(d["n_images"], d["n_categories"], seed=cfg["seed"],
                                       objects_per_image=d["objects_per_image"])


def _splits(cfg):
    index = _dataset(cfg)
    if cfg["dataset"]["unlabeled_path"]:
        return index, coco.load_dataset(cfg["dataset"]["unlabeled_path"])
    return coco.split_dataset(index, cfg["split"]["fraction"], cfg["seed"])


def _profile(cfg):
    profile = preset_profile(cfg["preset"])
    t = dict(cfg["teacher"])
    if "fp_score" in t:
        t["fp_score"] = ScoreDist(*t["fp_score"])
    if "fp_scale_mix" in t:
        t["fp_scale_mix"] = tuple(t["fp_scale_mix"])
    return profile.replace(**t) if t else profile


def _threshold(cfg) -> float:
    return cfg["thr"] if cfg["thr"] is not None else THRESHOLD_PRESETS[cfg["preset"]]


def _pseudo_labeled(cfg, n):
    """Rendered images with thresholded teacher predictions as pseudo-labels."""
    index = _dataset(cfg)
    ids = cfg["images"] or index.image_ids[:n]
    if len(ids) != n:
        raise ValueError(f"need exactly {n} image ids, got {len(ids)}")
    profile, thr, seed = _profile(cfg), _threshold(cfg), cfg["seed"]
    items = []
    for iid in ids:
        img = index[iid]
        out = run_teacher(profile, img, cfg["iterations"], np.random.default_rng([seed, iid, 3]))
        items.append((iid, coco.render_image(img, seed), filter_by_threshold(out.detections, thr)))
    return items


def _write_composite(out: Path, name, composite, sources, extra=None):
    write_raw(composite.raster, out / f"{name}.mxpl")
    write_png(composite.raster, out / f"{name}.png")
    coco.emit_detections({0: composite.labels}, out / f"{name}.json")
    manifest = {"composite": f"{name}.mxpl", "sources": list(sources),
                "size": list(composite.raster.size), "n_labels": len(composite.labels),
                "n_dropped": composite.n_dropped}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands

def cmd_split(cfg, out: Path):
    index = _dataset(cfg)
    labeled, unlabeled = coco.split_dataset(index, cfg["split"]["fraction"], cfg["seed"])
    coco.dump_dataset(labeled, out / "labeled.json")
    coco.dump_dataset(unlabeled, out / "unlabeled.json")
    print(f"labeled {len(labeled)} unlabeled {len(unlabeled)}")


def cmd_mix(cfg, out: Path):
    (ia, ra, la), (ib, rb, lb) = _pseudo_labeled(cfg, 2)
    comp = pseudo_mixup((ra, la), (rb, lb), cfg["alpha"])
    _write_composite(out, "mixup", comp, [ia, ib], {"alpha": cfg["alpha"]})
    print(f"mixup of {ia},{ib}: {comp.raster.width}x{comp.raster.height}, {len(comp.labels)} labels")


def cmd_mosaic(cfg, out: Path):
    items = _pseudo_labeled(cfg, 4)
    rng = np.random.default_rng([cfg["seed"], 13])
    comp = pseudo_mosaic([(r, l) for _, r, l in items], rng, tuple(cfg["mosaic_range"]))
    _write_composite(out, "mosaic", comp, [i for i, _, _ in items])
    print(f"mosaic of {[i for i, _, _ in items]}: {comp.raster.width}x{comp.raster.height}, "
          f"{len(comp.labels)} labels, {comp.n_dropped} dropped")


def cmd_resample_plan(cfg, out: Path):
    index = _dataset(cfg, default_kind="long-tail")
    table = LabeledResampler(cfg["power"]).fit(index).plan_table()
    (out / "resample_plan.csv").write_text(table)
    print(table, end="")


def cmd_grad_density(cfg, out: Path):
    from .gradient import GradientDensityAnalyzer, make_scene

    g = cfg["grad"]
    index = _dataset(cfg)
    profile, seed = _profile(cfg), cfg["seed"]
    scenes = [make_scene(img, profile, g["iteration"], np.random.default_rng([seed, img.image_id, 3]))
              for img in list(index)[:g["n_scenes"]]]
    analyzer = GradientDensityAnalyzer(tuple(g["thresholds"]), tuple(g["augmentations"]), g["bins"],
                                       g["iou_thr"], g["smooth"], cfg["alpha"], seed).fit(scenes)
    report = analyzer.report_
    paths = report.write_csv(out)
    (out / "grid.csv").write_text(report.grid_text())
    if g["svg"]:
        report.write_svg(out / "density.svg")
    print("augmentation,threshold,mean_g_FN,n_FN")
    for aug in g["augmentations"]:
        for thr in g["thresholds"]:
            print(f"{aug},{thr:g},{report.mean_g(aug, thr, 'FN'):.4f},{report.count(aug, thr, 'FN')}")
    logger.info("wrote %d histogram files", len(paths))


def cmd_simulate(cfg, out: Path):
    labeled, unlabeled = _splits(cfg)
    config = SimConfig(preset=cfg["preset"], thr=cfg["thr"], n_labeled=cfg["batch"]["n_labeled"],
                       n_unlabeled=cfg["batch"]["n_unlabeled"], w_u=cfg["w_u"], alpha=cfg["alpha"],
                       mosaic_range=tuple(cfg["mosaic_range"]), power=cfg["power"],
                       iterations=cfg["iterations"], seed=cfg["seed"], render=cfg["render"],
                       filter_empty=cfg["filter_empty"], cache_window=cfg["cache_window"],
                       erase_thr=cfg["erase_thr"], augment=cfg["augment"])
    stats = simulate(labeled, unlabeled, _profile(cfg), config)
    (out / "stats.csv").write_text(stats.to_csv())
    (out / "category_log.csv").write_text(stats.category_log_table())
    gt, pl = stats.totals()
    print("scale,gt,pl")
    for s in SCALE_CLASSES:
        print(f"{s},{gt[s]},{pl[s]}")


def cmd_stats(cfg, out: Path):
    index = _dataset(cfg)
    lines = ["category,name,images,small,medium,large"]
    per_cat = {c: dict.fromkeys(SCALE_CLASSES, 0) for c in index.categories}
    for img in index:
        for a in img.annotations:
            per_cat[a.category][area_class(a.box)] += 1
    for c in sorted(per_cat):
        row = per_cat[c]
        lines.append(f"{c},{index.categories[c]},{len(index.membership[c])},"
                     f"{row['small']},{row['medium']},{row['large']}")
    text = "\n".join(lines) + "\n"
    (out / "dataset_stats.csv").write_text(text)
    total = count_by_scale(a for img in index for a in img.annotations)
    n = sum(total.values())
    print(f"images {len(index)} instances {n}")
    for s in SCALE_CLASSES:
        share = total[s] / n if n else 0.0
        print(f"{s} {total[s]} {share:.4f}")


HANDLERS = {"split": cmd_split, "mix": cmd_mix, "mosaic": cmd_mosaic,
            "resample-plan": cmd_resample_plan, "grad-density": cmd_grad_density,
            "simulate": cmd_simulate, "stats": cmd_stats}


def _provenance(exc: BaseException) -> str:
    """Name of the innermost mixpl module in the traceback."""
    if isinstance(exc, (ConfigError, _UsageError)):
        return "config" if isinstance(exc, ConfigError) else "cli"
    pkg = Path(__file__).parent
    name = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent == pkg:
            name = path.stem
    return name


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        cfg = load_config(args.config, _overrides(args))
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except Exception as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"mixpl: {_provenance(exc)}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, _UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
