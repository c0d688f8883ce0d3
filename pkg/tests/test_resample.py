import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixpl.boxes import Annotation, BBox, DatasetIndex, LabeledImage
from mixpl.coco import make_long_tail_dataset
from mixpl.resample import (DEFAULT_POWER, POWER_ABLATION, LabeledResampler, RepeatPlan,
                            build_epoch, category_frequency, category_repeat_factors,
                            repeat_factors)


def _img(iid, cats):
    return LabeledImage(iid, 50, 50, tuple(Annotation(BBox(0, 0, 5, 5), c) for c in cats))


def _index(rows, n_cat=3):
    return DatasetIndex(tuple(_img(i + 1, c) for i, c in enumerate(rows)),
                        {c: str(c) for c in range(1, n_cat + 1)})


class TestFrequency:
    def test_every_image(self):
        assert category_frequency(_index([[1], [1, 2], [1]]))[1] == 1.0

    def test_four_of_hundred(self):
        rows = [[1, 2] if i < 4 else [1] for i in range(100)]
        assert category_frequency(_index(rows))[2] == 0.04

    def test_image_level_count(self):
        assert category_frequency(_index([[2, 2, 2, 2, 2], [1]]))[2] == 0.5

    def test_absent_excluded(self, caplog):
        f = category_frequency(_index([[1]]))
        assert 3 not in f and "3" in caplog.text

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            category_frequency(DatasetIndex((), {}))


class TestRepeatFactors:
    def test_closed_form(self):
        assert category_repeat_factors({1: 0.04}, 0.5)[1] == pytest.approx(5.0, abs=1e-12)

    def test_power_zero(self):
        assert set(category_repeat_factors({1: 0.04, 2: 0.5}, 0.0).values()) == {1.0}

    def test_image_max(self):
        idx = _index([[1, 2]] + [[1]] * 49 + [[2]] * 0, n_cat=2)
        f = {1: 0.5, 2: 0.04}
        _, r_img = repeat_factors(f, 0.5, idx)
        assert r_img[1] == pytest.approx(5.0)

    def test_unannotated_image(self):
        _, r_img = repeat_factors({1: 0.5}, 0.5, _index([[1], []], 1))
        assert r_img[2] == 1.0

    def test_bad_power(self):
        with pytest.raises(ValueError):
            category_repeat_factors({1: 0.5}, 1.5)

    @given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, f1, f2, p1, p2):
        lo, hi = sorted((f1, f2))
        pa, pb = sorted((p1, p2))
        r = category_repeat_factors({1: lo, 2: hi}, pa)
        assert r[1] >= r[2] - 1e-12 and r[2] >= 1.0
        assert r[1] <= category_repeat_factors({1: lo}, pb)[1] + 1e-12

    def test_default_is_best_ablation_row(self):
        for table in POWER_ABLATION.values():
            assert max(table, key=table.get) == DEFAULT_POWER


class TestEpoch:
    def test_all_ones_is_permutation(self, rng):
        idx = _index([[1]] * 20, 1)
        plan = RepeatPlan.from_dataset(idx, 0.5)
        assert sorted(build_epoch(plan, rng)) == list(range(1, 21))

    def test_power_zero_is_shuffle(self, rng):
        idx = make_long_tail_dataset(50, [1.0, 0.1], seed=1)
        plan = RepeatPlan.from_dataset(idx, 0.0)
        assert sorted(build_epoch(plan, rng)) == idx.image_ids

    def test_fractional_mean(self):
        plan = RepeatPlan(0.5, {}, {}, {1: 2.5, 2: 1.0})
        rng = np.random.default_rng(0)
        counts = np.array([build_epoch(plan, rng).count(1) for _ in range(10_000)])
        assert set(np.unique(counts)) == {2, 3}
        assert abs(counts.mean() - 2.5) < 0.05

    def test_rarest_category_boost(self):
        fr = [1.0, 0.5, 0.2, 0.05]
        idx = make_long_tail_dataset(200, fr, seed=3)
        sampler = LabeledResampler(0.5).fit(idx)
        rare = idx.membership[4]
        n_inst = {i: sum(a.category == 4 for a in idx[i].annotations) for i in rare}
        base = sum(n_inst.values())
        total = 0
        epochs = 2000
        for e in range(epochs):
            order = sampler.sample_epoch(seed=e)
            total += sum(n_inst.get(i, 0) for i in order)
        boost = total / epochs / base
        assert boost >= sampler.category_repeat_[4] * 0.95


class TestEstimator:
    def test_attributes_and_table(self):
        idx = make_long_tail_dataset(100, [1.0, 0.25, 0.04], seed=0)
        s = LabeledResampler(power=0.5).fit(idx)
        assert s.frequency_ == {1: 1.0, 2: 0.25, 3: 0.04}
        lines = s.plan_table().splitlines()
        assert lines[0] == "category,f,r_cat"
        assert lines[3] == "3,0.0400,5.0000"
        assert s.expected_epoch_length() == pytest.approx(sum(s.image_repeat_.values()))

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            LabeledResampler().sample_epoch(0)

    def test_params(self):
        assert LabeledResampler().get_params() == {"power": 0.5}
