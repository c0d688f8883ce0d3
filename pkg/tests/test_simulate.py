import numpy as np
import pytest

from mixpl.boxes import DatasetIndex
from mixpl.coco import make_synthetic_dataset, split_dataset
from mixpl.simulate import SimConfig, SimStats, simulate
from mixpl.teacher import TeacherProfile


@pytest.fixture(scope="module")
def split():
    return split_dataset(make_synthetic_dataset(60, n_categories=5, seed=3), 0.2, seed=0)


def test_zero_iterations(split):
    stats = simulate(*split, config=SimConfig(iterations=0))
    assert isinstance(stats, SimStats) and len(stats) == 0
    assert stats.to_csv().count("\n") == 1


def test_header(split):
    stats = simulate(*split, config=SimConfig(iterations=1))
    cats = sorted(split[0].categories)
    want = ["iter", "gt_s", "gt_m", "gt_l", "pl_s", "pl_m", "pl_l", "empty_images", "fp_count"]
    for c in cats:
        want += [f"gt_cat{c}", f"pl_cat{c}"]
    assert stats.to_csv().splitlines()[0].split(",") == want


def test_trivial_teacher_reproduces_gt(split):
    stats = simulate(*split, TeacherProfile.trivial(), SimConfig(iterations=20, thr=0.0))
    for s in stats:
        assert s.pl == s.gt
        assert s.pl_by_category == s.gt_by_category
        assert s.fp_count == 0


def test_conservation(split):
    for preset in ("ce-loss", "focal"):
        stats = simulate(*split, config=SimConfig(iterations=30, preset=preset, seed=1))
        for s in stats:
            assert s.pl_total == s.detected + s.fp_count - s.filtered
            assert s.pl_total <= s.detected + s.fp_count
            assert sum(s.pl_by_category.values()) == s.pl_total
            assert sum(s.gt_by_category.values()) == sum(s.gt.values())


def test_threshold_one_keeps_nothing_below(split):
    stats = simulate(*split, config=SimConfig(iterations=10, thr=1.0))
    assert all(s.pl_total == 0 for s in stats)
    assert all(s.empty_images == 4 for s in stats)


def test_deterministic(split):
    cfg = SimConfig(iterations=15, seed=7)
    a = simulate(*split, config=cfg)
    b = simulate(*split, config=cfg)
    assert a.to_csv() == b.to_csv()
    assert a.category_log_table() == b.category_log_table()
    c = simulate(*split, config=SimConfig(iterations=15, seed=8))
    assert c.to_csv() != a.to_csv()


def test_render_matches_geometry_mode():
    data = make_synthetic_dataset(12, n_categories=3, seed=5, image_shapes=[(320, 240)])
    lab, unl = split_dataset(data, 0.25, seed=0)
    geo = simulate(lab, unl, config=SimConfig(iterations=3, seed=2))
    ras = simulate(lab, unl, config=SimConfig(iterations=3, seed=2, render=True))
    assert geo.to_csv() == ras.to_csv()


def test_unlabeled_only():
    data = make_synthetic_dataset(10, seed=0)
    empty = DatasetIndex((), data.categories)
    stats = simulate(empty, data, config=SimConfig(iterations=3))
    assert len(stats) == 3 and all(sum(s.gt.values()) > 0 for s in stats)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(preset="yolo")
    with pytest.raises(ValueError):
        SimConfig(thr=1.5)
    with pytest.raises(ValueError):
        SimConfig(augment={"seed": 1})
    assert SimConfig(preset="fcos").threshold == 0.3


def test_category_log_table(split):
    stats = simulate(*split, config=SimConfig(iterations=5))
    lines = stats.category_log_table().splitlines()
    assert lines[0] == "category,log_gt,log_pl"
    gt = {}
    for s in stats:
        for c, n in s.gt_by_category.items():
            gt[c] = gt.get(c, 0) + n
    for line in lines[1:]:
        c, lg, _ = line.split(",")
        assert float(lg) == pytest.approx(np.log10(1 + gt.get(int(c), 0)), abs=1e-4)
