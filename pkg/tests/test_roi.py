import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nucleiseg.labelmap import extract_instances
from nucleiseg.roi import (
    Box,
    Detection,
    box_iou,
    detections_to_labelpatch,
    nms,
    paste_mask,
    resize_mask_to,
    roi_align,
)

from synth import random_detection


def det(box, score, label=1, mask=1.0, num_classes=6):
    """Detection with objectness 1 so the score equals cond[label]."""
    cond = np.zeros(num_classes + 1)
    cond[label] = score
    cond[0] = 1 - score
    return Detection(box, 1.0, cond, np.full((14, 14), mask))


def bilinear_oracle(img, y, x):
    h, w = img.shape
    y = min(max(y, 0.0), h - 1)
    x = min(max(x, 0.0), w - 1)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    return (
        img[y0, x0] * (1 - ly) * (1 - lx)
        + img[y0, x1] * (1 - ly) * lx
        + img[y1, x0] * ly * (1 - lx)
        + img[y1, x1] * ly * lx
    )


class TestBox:
    def test_degenerate(self):
        with pytest.raises(ValueError):
            Box(0, 0, 0, 1)
        with pytest.raises(ValueError):
            Box(0, 2, 1, 1)

    def test_iou_examples(self):
        a = Box(0, 0, 2, 2)
        assert box_iou(a, a) == 1.0
        assert box_iou(a, Box(5, 5, 6, 6)) == 0.0
        assert box_iou(a, Box(2, 0, 4, 2)) == 0.0
        assert box_iou(a, Box(1, 0, 3, 2)) == pytest.approx(2 / 6, abs=1e-15)

    # quarter-pixel grid keeps areas exact, so "1 iff identical" is decidable
    @given(st.lists(st.integers(-40, 40), min_size=8, max_size=8))
    def test_iou_symmetric(self, v):
        v = [x / 4 for x in v]
        a = Box(v[0], v[1], v[0] + abs(v[2]) + 0.25, v[1] + abs(v[3]) + 0.25)
        b = Box(v[4], v[5], v[4] + abs(v[6]) + 0.25, v[5] + abs(v[7]) + 0.25)
        assert box_iou(a, b) == box_iou(b, a)
        assert 0.0 <= box_iou(a, b) <= 1.0
        if a != b:
            assert box_iou(a, b) < 1.0


class TestDetection:
    def test_derived_fields(self):
        d = Detection((0, 0, 4, 4), 0.8, [0.3, 0.1, 0.6], np.zeros((14, 14)))
        np.testing.assert_allclose(d.fused, [0.44, 0.08, 0.48])
        assert d.label == 2
        assert d.score == pytest.approx(0.48)

    def test_background_dominant_still_has_foreground_label(self):
        d = Detection((0, 0, 4, 4), 0.1, [0.9, 0.04, 0.06], np.zeros(196))
        assert d.label == 2

    def test_bad_mask(self):
        with pytest.raises(ValueError):
            Detection((0, 0, 4, 4), 0.5, [0.5, 0.5], np.full((14, 14), 1.5))


class TestNMS:
    def test_single(self):
        d = det((0, 0, 4, 4), 0.9)
        assert nms([d]) == [d]

    def test_identical_boxes(self):
        a, b = det((0, 0, 4, 4), 0.8), det((0, 0, 4, 4), 0.9)
        assert nms([a, b], 0.5) == [b]

    def test_disjoint(self):
        a, b = det((0, 0, 4, 4), 0.8), det((10, 10, 14, 14), 0.9)
        assert nms([a, b]) == [b, a]

    def test_tie_keeps_lower_index(self):
        a, b = det((0, 0, 4, 4), 0.9), det((0, 0, 4, 4), 0.9)
        assert nms([a, b])[0] is a

    def test_threshold_is_inclusive(self):
        # IoU exactly 1/3: kept at threshold 1/3, suppressed below it
        a, b = det((0, 0, 2, 2), 0.9), det((1, 0, 3, 2), 0.8)
        assert len(nms([a, b], box_iou(a.box, b.box))) == 2
        assert len(nms([a, b], 0.3)) == 1

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 0.9))
    def test_properties(self, seed, t):
        rng = np.random.default_rng(seed)
        dets = [random_detection(rng) for _ in range(rng.integers(0, 15))]
        kept = nms(dets, t)
        assert nms(kept, t) == kept
        assert all(any(k is d for d in dets) for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert box_iou(a.box, b.box) <= t
        assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)


class TestRoiAlign:
    def test_constant(self):
        fm = np.full((3, 10, 12), 2.7)
        out = roi_align(fm, Box(-1.3, 0.4, 14.2, 8.8), 7, 5, 3)
        assert out.shape == (7, 5, 3)
        assert np.all(out == 2.7)

    def test_linear_ramp(self):
        ys, xs = np.mgrid[0:16, 0:16].astype(float)
        fm = np.stack([xs, ys, 0.5 * xs - 2 * ys + 3])
        box = Box(2.3, 1.7, 11.1, 12.4)
        out = roi_align(fm, box, 4, 6, 2)
        bw, bh = box.width / 6, box.height / 4
        cx = box.x1 + (np.arange(6) + 0.5) * bw
        cy = box.y1 + (np.arange(4) + 0.5) * bh
        np.testing.assert_allclose(out[:, :, 0], np.broadcast_to(cx, (4, 6)), rtol=0, atol=1e-9)
        np.testing.assert_allclose(out[:, :, 1], np.broadcast_to(cy[:, None], (4, 6)), rtol=0, atol=1e-9)
        np.testing.assert_allclose(out[:, :, 2], 0.5 * cx[None, :] - 2 * cy[:, None] + 3, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("sr", [1, 2, 3])
    def test_whole_map_single_bin(self, sr):
        rng = np.random.default_rng(sr)
        img = rng.random((9, 11))
        box = Box(0, 0, 11, 9)
        samples = [
            bilinear_oracle(img, (iy + 0.5) * 9 / sr, (ix + 0.5) * 11 / sr)
            for iy in range(sr)
            for ix in range(sr)
        ]
        out = roi_align(img, box, 1, 1, sr)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == pytest.approx(np.mean(samples), abs=1e-12)

    def test_random_against_oracle(self):
        rng = np.random.default_rng(7)
        img = rng.random((12, 10))
        box = Box(-2.5, 3.1, 8.7, 14.0)
        out = roi_align(img, box, 3, 4, 2)
        for i in range(3):
            for j in range(4):
                s = [
                    bilinear_oracle(img, box.y1 + (i + (a + 0.5) / 2) * box.height / 3,
                                    box.x1 + (j + (b + 0.5) / 2) * box.width / 4)
                    for a in range(2)
                    for b in range(2)
                ]
                assert out[i, j, 0] == pytest.approx(np.mean(s), abs=1e-12)

    def test_bad_args(self):
        with pytest.raises(ValueError):
            roi_align(np.zeros((4, 4)), (0, 0, 0, 2), 2, 2)
        with pytest.raises(ValueError):
            roi_align(np.zeros((4, 4)), Box(0, 0, 2, 2), 0, 2)


def resize_oracle(gt, size=14):
    """Upsample by ``size`` so every output bin is a whole block, then average."""
    h, w = gt.shape
    up = np.kron((gt != 0).astype(np.int64), np.ones((size, size), dtype=np.int64))
    sums = up.reshape(size, h, size, w).sum(axis=(1, 3))
    return (2 * sums >= h * w).astype(np.uint8)


class TestResizeMask:
    def test_all_ones_and_zeros(self):
        assert resize_mask_to(np.ones((37, 23))).all()
        assert not resize_mask_to(np.zeros((5, 40))).any()

    def test_exact_pooling(self):
        gt = np.zeros((28, 28))
        gt[:, :14] = 1
        expect = np.zeros((14, 14), dtype=np.uint8)
        expect[:, :7] = 1
        np.testing.assert_array_equal(resize_mask_to(gt), expect)

    @given(st.integers(0, 2**32 - 1))
    def test_identity_at_native_size(self, seed):
        m = (np.random.default_rng(seed).random((14, 14)) > 0.5).astype(np.uint8)
        np.testing.assert_array_equal(resize_mask_to(m), m)

    @settings(max_examples=60)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, h, w, seed):
        m = np.random.default_rng(seed).random((h, w)) > 0.5
        np.testing.assert_array_equal(resize_mask_to(m), resize_oracle(m))


class TestPasteMask:
    def test_full_box(self):
        out = paste_mask(np.ones((14, 14)), Box(2, 2, 6, 6), 8, 8)
        expect = np.zeros((8, 8), dtype=bool)
        expect[2:6, 2:6] = True
        np.testing.assert_array_equal(out, expect)

    def test_zero_mask(self):
        assert not paste_mask(np.zeros((14, 14)), Box(1, 1, 7, 7), 8, 8).any()

    def test_left_half(self):
        m = np.zeros((14, 14))
        m[:, :7] = 1
        out = paste_mask(m, Box(0, 0, 14, 14), 14, 14)
        np.testing.assert_array_equal(out, m.astype(bool))

    @pytest.mark.parametrize("box", [(-3, -2, 5, 4), (5.5, 6.2, 11.0, 12.7), (-4, -4, 12, 12)])
    def test_clipping(self, box):
        rng = np.random.default_rng(11)
        m = rng.random((14, 14))
        out = paste_mask(m, Box(*box), 8, 8)
        pad = 6
        shifted = Box(box[0] + pad, box[1] + pad, box[2] + pad, box[3] + pad)
        big = paste_mask(m, shifted, 8 + 2 * pad, 8 + 2 * pad)
        np.testing.assert_array_equal(out, big[pad:pad + 8, pad:pad + 8])

    def test_outside_image(self):
        assert not paste_mask(np.ones((14, 14)), Box(20, 20, 30, 30), 8, 8).any()


class TestDetectionsToLabelPatch:
    def test_empty(self):
        p = detections_to_labelpatch([], 8, 8)
        assert not p.instance_map.any()

    def test_single(self):
        p = detections_to_labelpatch([det((2, 2, 6, 6), 0.9, label=3)], 8, 8)
        expect = np.zeros((8, 8), dtype=int)
        expect[2:6, 2:6] = 1
        np.testing.assert_array_equal(p.instance_map, expect)
        np.testing.assert_array_equal(p.class_map, 3 * expect)

    def test_overlap_goes_to_higher_score(self):
        low, high = det((3, 3, 8, 8), 0.7, label=2), det((0, 0, 5, 5), 0.9, label=1)
        p = detections_to_labelpatch([low, high], 10, 10)
        assert p.instance_map[4, 4] == 1 and p.class_map[4, 4] == 1
        assert p.instance_map[7, 7] == 2 and p.class_map[7, 7] == 2
        assert np.count_nonzero(p.instance_map == 1) == 25
        assert np.count_nonzero(p.instance_map == 2) == 25 - 4

    def test_threshold_is_strict(self):
        p = detections_to_labelpatch([det((0, 0, 4, 4), 0.5)], 8, 8)
        assert not p.instance_map.any()
        p = detections_to_labelpatch([det((0, 0, 4, 4), 0.5)], 8, 8, score_threshold=0.4)
        assert p.instance_map.any()

    def test_empty_masks_do_not_consume_ids(self):
        dets = [det((0, 0, 4, 4), 0.95, mask=0.0), det((5, 5, 8, 8), 0.9), det((0, 0, 3, 3), 0.8)]
        p = detections_to_labelpatch(dets, 8, 8)
        assert sorted(np.unique(p.instance_map)) == [0, 1, 2]
        assert p.instance_map[6, 6] == 1 and p.instance_map[1, 1] == 2

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1))
    def test_output_invariants(self, seed):
        rng = np.random.default_rng(seed)
        dets = [random_detection(rng) for _ in range(rng.integers(0, 12))]
        p = detections_to_labelpatch(dets, 32, 32, score_threshold=0.1)
        recs = extract_instances(p)
        assert [r.id for r in recs] == list(range(1, len(recs) + 1))
