import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adamm.metrics import (
    METRIC_NAMES,
    REGION_NAMES,
    MetricsRecord,
    RegionMetrics,
    boundary_voxels,
    dice,
    evaluate_case,
    hd95,
    iou,
    sensitivity,
    sweep_aggregate,
    table_to_csv,
    table_to_text,
)
from adamm.volumes import LabelVolume, enumerate_combinations

import oracles


def make_mask(shape, coords):
    mask = np.zeros(shape, dtype=bool)
    for c in coords:
        mask[c] = True
    return mask


class TestOverlapMetrics:
    def test_dice_identical(self, rng):
        mask = rng.random((4, 4, 4)) > 0.5
        mask[0, 0, 0] = True
        assert dice(mask, mask) == 1.0

    def test_dice_disjoint(self):
        a = make_mask((3, 3, 3), [(0, 0, 0)])
        b = make_mask((3, 3, 3), [(2, 2, 2)])
        assert dice(a, b) == 0.0

    def test_dice_counts(self):
        # |X|=4, |Y|=6, |X n Y|=3 -> 2*3/10 = 0.6
        a = make_mask((2, 2, 3), [(0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 1, 1)])
        b = make_mask((2, 2, 3), [(0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 0, 0), (1, 0, 1), (1, 0, 2)])
        assert dice(a, b) == pytest.approx(0.6, abs=1e-12)
        assert dice(a, b) == pytest.approx(oracles.dice_by_counting(a, b), abs=1e-12)

    def test_iou_counts(self):
        # 3 intersecting, 7 in the union
        a = make_mask((2, 2, 3), [(0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 1, 1)])
        b = make_mask((2, 2, 3), [(0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 0, 0), (1, 0, 1), (1, 0, 2)])
        assert iou(a, b) == pytest.approx(3 / 7, abs=1e-12)

    def test_sensitivity(self):
        gt = make_mask((2, 2, 2), [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 1, 1)])
        pred = make_mask((2, 2, 2), [(0, 0, 0), (0, 0, 1), (1, 0, 0), (0, 1, 1)])
        assert sensitivity(pred, gt) == pytest.approx(0.75, abs=1e-12)  # TP=3 FN=1
        assert sensitivity(gt | pred, gt) == 1.0
        assert sensitivity(~gt, gt) == 0.0
        assert math.isnan(sensitivity(pred, np.zeros_like(gt)))

    def test_empty_conventions(self):
        empty = np.zeros((2, 2, 2), dtype=bool)
        full = ~empty
        assert dice(empty, empty) == 1.0 and iou(empty, empty) == 1.0
        assert dice(empty, full) == 0.0 and iou(full, empty) == 0.0

    def test_random_vs_counting(self, rng):
        for _ in range(100):
            a = rng.random((2, 2, 2)) > 0.5
            b = rng.random((2, 2, 2)) > 0.5
            assert dice(a, b) == pytest.approx(oracles.dice_by_counting(a, b), abs=1e-12)
            assert iou(a, b) == pytest.approx(oracles.iou_by_counting(a, b), abs=1e-12)
            s, so = sensitivity(a, b), oracles.sensitivity_by_counting(a, b)
            assert (math.isnan(s) and math.isnan(so)) or s == pytest.approx(so, abs=1e-12)

    @given(st.integers(0, 2**27 - 1), st.integers(0, 2**27 - 1))
    @settings(max_examples=60, deadline=None)
    def test_dice_iou_identity(self, bits_a, bits_b):
        a = np.array([(bits_a >> i) & 1 for i in range(27)], dtype=bool).reshape(3, 3, 3)
        b = np.array([(bits_b >> i) & 1 for i in range(27)], dtype=bool).reshape(3, 3, 3)
        d, j = dice(a, b), iou(a, b)
        assert abs(d - 2 * j / (1 + j)) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


class TestBoundary:
    def test_solid_block_surface(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[1:4, 1:4, 1:4] = True
        boundary = boundary_voxels(mask)
        assert boundary.sum() == 26  # 3^3 minus the single interior voxel
        assert not boundary[2, 2, 2]

    def test_faces_count_as_background(self):
        mask = np.ones((3, 3, 3), dtype=bool)
        boundary = boundary_voxels(mask)
        assert boundary.sum() == 26 and not boundary[1, 1, 1]

    def test_matches_scanning_oracle(self, rng):
        for _ in range(10):
            mask = rng.random((4, 4, 4)) > 0.5
            got = {tuple(ix) for ix in np.argwhere(boundary_voxels(mask))}
            assert got == oracles.boundary_by_scanning(mask)


class TestHd95:
    def test_identical(self, rng):
        mask = rng.random((5, 5, 5)) > 0.5
        mask[2, 2, 2] = True
        assert hd95(mask, mask) == 0.0

    def test_two_points(self):
        a = make_mask((7, 3, 3), [(1, 1, 1)])
        b = make_mask((7, 3, 3), [(4, 1, 1)])
        assert hd95(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_spacing(self):
        a = make_mask((7, 3, 3), [(1, 1, 1)])
        b = make_mask((7, 3, 3), [(4, 1, 1)])
        assert hd95(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0, abs=1e-12)

    def test_empty_conventions(self):
        empty = np.zeros((3, 3, 3), dtype=bool)
        some = make_mask((3, 3, 3), [(1, 1, 1)])
        assert hd95(empty, empty) == 0.0
        assert math.isnan(hd95(empty, some))
        assert math.isnan(hd95(some, empty))

    def test_brute_force_oracle(self, rng):
        for _ in range(12):
            a = rng.random((6, 6, 6)) > 0.7
            b = rng.random((6, 6, 6)) > 0.7
            if not a.any() or not b.any():
                continue
            want = oracles.hd95_all_pairs(a, b)
            assert hd95(a, b) == pytest.approx(want, abs=1e-9)

    def test_symmetry_and_hausdorff_bound(self, rng):
        for _ in range(8):
            a = rng.random((5, 5, 5)) > 0.6
            b = rng.random((5, 5, 5)) > 0.6
            if not a.any() or not b.any():
                continue
            assert hd95(a, b) == hd95(b, a)
            assert hd95(a, b) <= oracles.hausdorff_exact(a, b) + 1e-12

    def test_maxdir_variant(self, rng):
        a = rng.random((5, 5, 5)) > 0.6
        b = rng.random((5, 5, 5)) > 0.6
        a[2, 2, 2] = b[1, 1, 1] = True
        assert hd95(a, b, method="maxdir") == hd95(b, a, method="maxdir")
        with pytest.raises(ValueError):
            hd95(a, b, method="bogus")

    def test_axis_flip_invariance(self, rng):
        a = rng.random((5, 5, 5)) > 0.6
        b = rng.random((5, 5, 5)) > 0.6
        a[0, 0, 0] = b[4, 4, 4] = True
        for axis in range(3):
            fa, fb = np.flip(a, axis), np.flip(b, axis)
            assert hd95(fa, fb) == pytest.approx(hd95(a, b), abs=1e-12)
            assert dice(fa, fb) == dice(a, b)
            assert iou(fa, fb) == iou(a, b)


class TestEvaluateCase:
    def test_perfect(self, rng):
        classes = np.zeros((3, 6, 6, 6), dtype=np.float32)
        classes[0, 2:4, 2:4, 2:4] = 1.0
        classes[1, 1, 1, 1] = 1.0
        classes[2, 4, 4, 4] = 1.0
        labels = LabelVolume(classes)
        record = evaluate_case(classes * 0.9 + 0.05, labels)  # probs > .5 exactly on lesions
        for region in REGION_NAMES:
            m = record.region(region)
            assert m.dice == 1.0 and m.iou == 1.0 and m.sensitivity == 1.0 and m.hd95 == 0.0

    def test_empty_prediction(self):
        classes = np.zeros((3, 4, 4, 4), dtype=np.float32)
        classes[2, 1, 1, 1] = 1.0
        record = evaluate_case(np.zeros_like(classes), LabelVolume(classes))
        assert record.et.dice == 0.0
        assert math.isnan(record.et.hd95)

    def test_compositional(self, rng):
        from adamm.volumes import derive_regions

        probs = rng.random((3, 5, 5, 5)).astype(np.float32)
        classes = (rng.random((3, 5, 5, 5)) > 0.7).astype(np.float32)
        labels = LabelVolume(classes)
        record = evaluate_case(probs, labels, threshold=0.5)
        pred_regions = derive_regions(LabelVolume((probs > 0.5).astype(np.float32)))
        gt_regions = derive_regions(labels)
        for region in REGION_NAMES:
            pm = getattr(pred_regions, region.lower())
            gm = getattr(gt_regions, region.lower())
            m = record.region(region)
            assert m.dice == dice(pm, gm)
            assert m.iou == iou(pm, gm)
            got_h = hd95(pm, gm)
            assert (math.isnan(m.hd95) and math.isnan(got_h)) or m.hd95 == got_h


def constant_record(value, hd=1.0):
    region = RegionMetrics(dice=value, iou=value, sensitivity=value, hd95=hd)
    return MetricsRecord(wt=region, tc=region, et=region)


class TestSweepAggregate:
    def test_identical_records_zero_std(self):
        records = {c.code: constant_record(0.5) for c in enumerate_combinations()}
        table = sweep_aggregate(records)
        for region in REGION_NAMES:
            for metric in METRIC_NAMES:
                assert table.std[(region, metric)] == 0.0

    def test_two_value_toy(self):
        codes = [c.code for c in enumerate_combinations()]
        records = {}
        for i, code in enumerate(codes):
            records[code] = constant_record(0.2 if i < 10 else 0.7)
        table = sweep_aggregate(records)
        values = [0.2] * 10 + [0.7] * 5
        want_mean = sum(values) / 15
        want_std = math.sqrt(sum((v - want_mean) ** 2 for v in values) / 15)
        assert table.avg[("WT", "dice")] == pytest.approx(want_mean, abs=1e-12)
        assert table.std[("WT", "dice")] == pytest.approx(want_std, abs=1e-12)

    def test_row_order_is_combination_order(self):
        records = {c.code: constant_record(0.5) for c in enumerate_combinations()}
        table = sweep_aggregate(records)
        assert [code for code, _ in table.rows] == [c.code for c in enumerate_combinations()]

    def test_undefined_hd95_excluded(self):
        records = {}
        for i, combo in enumerate(enumerate_combinations()):
            records[combo.code] = constant_record(0.5, hd=float("nan") if i < 3 else 2.0)
        table = sweep_aggregate(records)
        assert table.hd95_excluded["WT"] == 3
        assert table.avg[("WT", "hd95")] == pytest.approx(2.0)

    def test_missing_combination_rejected(self):
        records = {c.code: constant_record(0.5) for c in enumerate_combinations()[:-1]}
        with pytest.raises(ValueError):
            sweep_aggregate(records)

    def test_avg_std_recomputable(self, rng):
        records = {
            c.code: constant_record(float(rng.random()), hd=float(rng.random() * 5))
            for c in enumerate_combinations()
        }
        table = sweep_aggregate(records)
        for metric in METRIC_NAMES:
            col = np.array([getattr(rec.wt, metric) for _, rec in table.rows])
            assert table.avg[("WT", metric)] == pytest.approx(col.mean(), abs=1e-9)
            assert table.std[("WT", metric)] == pytest.approx(col.std(), abs=1e-9)

    def test_renderers(self):
        records = {c.code: constant_record(0.5) for c in enumerate_combinations()}
        table = sweep_aggregate(records)
        csv_text = table_to_csv(table)
        assert csv_text.count("\n") == 1 + 45 + 6  # header + 15*3 rows + avg/std rows
        txt = table_to_text(table)
        assert "Avg." in txt and "0010" in txt and "WT dice" in txt
