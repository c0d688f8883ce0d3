import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixpl.boxes import BBox, DatasetIndex, Detection, LabeledImage
from mixpl.coco import (CocoFormatError, CocoValidationError, dataset_to_coco, dump_dataset,
                        emit_detections, load_dataset, load_detections, make_long_tail_dataset,
                        make_synthetic_dataset, parse_dataset, render_image, split_dataset)
from mixpl.raster import (ImageRaster, from_bytes, pad_batch, pad_to, read_png, read_raw,
                          to_bytes, unpad, write_png, write_raw)

from conftest import random_box


def _doc(**extra):
    doc = {"images": [{"id": 7, "width": 100, "height": 80, "file_name": "a.png"}],
           "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 20, 30, 40],
                            "area": 1200, "iscrowd": 0}],
           "categories": [{"id": 3, "name": "cat"}]}
    doc.update(extra)
    return doc


class TestParse:
    def test_minimal(self):
        idx = parse_dataset(_doc())
        assert len(idx) == 1
        ann = idx[7].annotations[0]
        assert ann.box == BBox(10, 20, 40, 60) and ann.category == 3

    def test_missing_image(self):
        doc = _doc()
        doc["annotations"][0]["image_id"] = 99
        with pytest.raises(CocoValidationError) as err:
            parse_dataset(doc)
        assert err.value.annotation_ids == [1]

    def test_unknown_category(self):
        doc = _doc()
        doc["annotations"][0]["category_id"] = 5
        with pytest.raises(CocoValidationError):
            parse_dataset(doc)

    def test_missing_key_location(self):
        doc = _doc()
        del doc["annotations"][0]["bbox"]
        with pytest.raises(CocoFormatError) as err:
            parse_dataset(doc, source="x.json")
        assert err.value.location == "x.json:annotations[0]"

    def test_crowd_ignored(self, caplog):
        doc = _doc()
        doc["annotations"][0]["iscrowd"] = 1
        idx = parse_dataset(doc)
        assert idx[7].annotations == ()
        assert "crowd" in caplog.text

    def test_box_clipped_to_frame(self):
        doc = _doc()
        doc["annotations"][0]["bbox"] = [90, 70, 30, 30]
        assert parse_dataset(doc)[7].annotations[0].box == BBox(90, 70, 100, 80)

    def test_bad_json_location(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"images": [\n  1,\n}')
        with pytest.raises(CocoFormatError) as err:
            load_dataset(p)
        assert err.value.location.startswith(f"{p}:3:")

    def test_round_trip_file(self, tmp_path):
        idx = make_synthetic_dataset(20, seed=3)
        dump_dataset(idx, tmp_path / "d.json")
        back = load_dataset(tmp_path / "d.json")
        assert back.image_ids == idx.image_ids
        for a, b in zip(idx, back):
            assert len(a.annotations) == len(b.annotations)
            for x, y in zip(a.annotations, b.annotations):
                np.testing.assert_allclose(x.box.to_array(), y.box.to_array(), atol=1e-9)
                assert x.category == y.category

    def test_document_keys(self):
        doc = dataset_to_coco(make_synthetic_dataset(2, seed=0))
        assert set(doc) == {"images", "annotations", "categories"}
        assert set(doc["annotations"][0]) == {"id", "image_id", "category_id", "bbox", "area", "iscrowd"}


class TestSplit:
    def _index(self, n):
        return DatasetIndex(tuple(LabeledImage(i + 1, 4, 4) for i in range(n)), {})

    def test_fraction_one(self):
        lab, unl = split_dataset(self._index(10), 1.0, 0)
        assert len(lab) == 10 and len(unl) == 0

    def test_hundred(self):
        lab, unl = split_dataset(self._index(100), 0.1, 0)
        assert (len(lab), len(unl)) == (10, 90)
        assert sorted(lab.image_ids + unl.image_ids) == list(range(1, 101))

    def test_deterministic(self):
        a = split_dataset(self._index(50), 0.3, 5)[0].image_ids
        b = split_dataset(self._index(50), 0.3, 5)[0].image_ids
        assert a == b

    def test_coco_train_ten_percent(self):
        # the public split tool keeps int(percent / 100 * N) images
        n = 118287
        lab, unl = split_dataset(self._index(n), 0.1, 1)
        assert len(lab) == int(10 / 100.0 * n) == 11828
        assert len(lab) + len(unl) == n

    def test_float_noise(self):
        assert len(split_dataset(self._index(100), 0.29, 0)[0]) == 29

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(self._index(5), 0.0, 0)


class TestResults:
    def test_empty(self, tmp_path):
        emit_detections({}, tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text()) == []

    def test_single(self, tmp_path):
        emit_detections({4: [Detection(BBox(1, 2, 4, 8), 2, 0.5)]}, tmp_path / "r.json")
        rec = json.loads((tmp_path / "r.json").read_text())
        assert rec == [{"image_id": 4, "category_id": 2, "bbox": [1.0, 2.0, 3.0, 6.0], "score": 0.5}]

    def test_round_trip_1000(self, tmp_path, rng):
        dets = {}
        for k in range(1000):
            dets.setdefault(int(rng.integers(1, 50)), []).append(
                Detection(random_box(rng), int(rng.integers(1, 80)), float(rng.random())))
        emit_detections(dets, tmp_path / "r.json")
        back = load_detections(tmp_path / "r.json")
        assert sorted(back) == sorted(dets)
        for iid in dets:
            for a, b in zip(dets[iid], back[iid]):
                np.testing.assert_allclose(a.box.to_array(), b.box.to_array(), atol=1e-6)
                assert a.category == b.category and abs(a.score - b.score) < 1e-12


class TestRaster:
    def test_pad_two_by_two(self):
        r = ImageRaster.from_array(np.full((2, 2, 3), 7, np.uint8))
        p = pad_to(r, 4, 4)
        assert p.data.shape == (4, 4, 3)
        assert (p.data == 0).all(axis=2).sum() == 12
        assert p.pad_state == (4, 4) and p.size == (2, 2)

    def test_pad_own_size(self):
        r = ImageRaster.from_array(np.arange(12, dtype=np.uint8).reshape(2, 2, 3))
        p = pad_to(r, 2, 2)
        assert np.array_equal(p.data, r.data) and p.pad_state == (2, 2)

    def test_round_trip_and_fill(self, rng):
        arr = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        r = ImageRaster.from_array(arr)
        p = pad_to(r, 11, 9)
        assert not p.data[5:].any() and not p.data[:, 7:].any()
        assert unpad(p) == r

    def test_double_pad_rejected(self):
        r = ImageRaster.from_array(np.zeros((2, 2, 3), np.uint8))
        with pytest.raises(ValueError):
            pad_to(pad_to(r, 3, 3), 4, 4)
        with pytest.raises(ValueError):
            pad_to(r, 1, 2)

    def test_pad_batch(self, rng):
        rs = [ImageRaster.from_array(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
              for w, h in [(3, 5), (6, 2)]]
        out = pad_batch(rs)
        assert all(p.data.shape == (5, 6, 3) for p in out)

    def test_raw_header_layout(self, rng):
        arr = rng.integers(0, 256, (3, 4, 3), dtype=np.uint8)
        buf = to_bytes(ImageRaster.from_array(arr))
        assert buf[:4] == b"MXPL"
        assert struct.unpack("<IIB", buf[4:13]) == (4, 3, 3)
        assert buf[13:] == arr.tobytes()

    def test_raw_and_png_files(self, tmp_path, rng):
        r = ImageRaster.from_array(rng.integers(0, 256, (6, 9, 3), dtype=np.uint8))
        write_raw(r, tmp_path / "a.mxpl")
        write_png(r, tmp_path / "a.png")
        assert read_raw(tmp_path / "a.mxpl") == r
        assert read_png(tmp_path / "a.png") == r

    def test_raw_rejects_bad_input(self):
        with pytest.raises(ValueError):
            from_bytes(b"XXXX" + bytes(9))
        with pytest.raises(ValueError):
            from_bytes(struct.pack("<4sIIB", b"MXPL", 2, 2, 3) + bytes(5))

    def test_read_only(self):
        r = ImageRaster.from_array(np.zeros((2, 2, 3), np.uint8))
        with pytest.raises(ValueError):
            r.data[0, 0, 0] = 1


class TestSynthetic:
    def test_long_tail_membership_exact(self):
        fr = [1.0, 0.5, 0.25, 0.1, 0.04]
        idx = make_long_tail_dataset(100, fr, seed=2)
        for c, f in enumerate(fr, start=1):
            assert len(idx.membership[c]) == round(f * 100)

    def test_scale_mix_near_coco(self):
        idx = make_synthetic_dataset(400, seed=0)
        from mixpl.boxes import count_by_scale
        counts = count_by_scale(a for img in idx for a in img.annotations)
        total = sum(counts.values())
        assert abs(counts["small"] / total - 0.41) < 0.05
        assert abs(counts["large"] / total - 0.25) < 0.05

    def test_render_deterministic(self):
        img = make_synthetic_dataset(1, seed=4).images[0]
        assert render_image(img, 1) == render_image(img, 1)
        assert render_image(img, 1).size == img.size
