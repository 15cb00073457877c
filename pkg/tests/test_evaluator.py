import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lungdet.evaluator import (
    RECALL_GRID,
    EvalConfig,
    EvalConsistencyError,
    ap_at_threshold,
    area_bin,
    area_cuts_from,
    area_histogram,
    bin_by_area,
    default_thresholds,
    evaluate,
    format_report,
    histogram_csv,
    interpolated_pr,
    iou,
    iou_matrix,
    match_detections,
    precision_envelope,
)


def coco(images, boxes):
    """boxes: list of (image_id, [x, y, w, h])."""
    return {
        "images": [{"id": i, "file_name": f"{i}.pgm", "width": 64, "height": 64} for i in images],
        "annotations": [{"id": k + 1, "image_id": i, "category_id": 1, "bbox": list(b), "area": b[2] * b[3],
                         "iscrowd": 0} for k, (i, b) in enumerate(boxes)],
        "categories": [{"id": 1, "name": "nodule"}],
    }


def dets(entries):
    return [{"image_id": i, "category_id": 1, "bbox": list(b), "score": s} for i, b, s in entries]


def random_instance(rng):
    n_img = int(rng.integers(1, 4))
    gts, ds = [], []
    for img in range(1, n_img + 1):
        for _ in range(int(rng.integers(0, 5))):
            x, y = rng.uniform(0, 40, size=2)
            w, h = rng.uniform(2, 20, size=2)
            gts.append((img, [x, y, w, h]))
            if rng.random() < 0.7:
                jit = rng.normal(scale=1.5, size=4)
                ds.append((img, [x + jit[0], y + jit[1], max(w + jit[2], 0.5), max(h + jit[3], 0.5)],
                           float(rng.integers(0, 10)) / 10))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 40, size=2)
            w, h = rng.uniform(2, 20, size=2)
            ds.append((img, [x, y, w, h], float(rng.integers(0, 10)) / 10))
    return coco(range(1, n_img + 1), gts), dets(ds)


class TestGeometry:
    def test_iou_hand(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_iou_disjoint_and_touching(self):
        assert iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
    def test_iou_properties(self, v):
        a = (v[0], v[1], v[0] + v[2] + 0.1, v[1] + v[3] + 0.1)
        b = (v[4], v[5], v[4] + v[6] + 0.1, v[5] + v[7] + 0.1)
        x = iou(a, b)
        assert 0.0 <= x <= 1.0
        assert x == pytest.approx(iou(b, a))
        assert iou(a, a) == pytest.approx(1.0)
        assert x == pytest.approx(iou_matrix([a], [b])[0, 0], abs=1e-12)


class TestMatching:
    def test_each_gt_once(self):
        tp, ign, matched = match_detections([[0, 0, 10, 10], [0, 0, 10, 10]], [[0, 0, 10, 10]], 0.5)
        assert tp.tolist() == [True, False] and matched.tolist() == [True]

    def test_best_iou_wins(self):
        tp, _, matched = match_detections([[0, 0, 10, 10]], [[1, 0, 11, 10], [0, 0, 10, 10]], 0.5)
        assert matched.tolist() == [False, True]

    def test_tie_goes_to_lower_gt_index(self):
        _, _, matched = match_detections([[5, 0, 15, 10]], [[0, 0, 10, 10], [10, 0, 20, 10]], 0.3)
        assert matched.tolist() == [True, False]

    def test_ignored_gt_flags_detection(self):
        tp, ign, _ = match_detections([[0, 0, 10, 10]], [[0, 0, 10, 10]], 0.5, gt_ignore=[True])
        assert tp.tolist() == [False] and ign.tolist() == [True]

    def test_prefers_non_ignored(self):
        tp, ign, matched = match_detections([[0, 0, 10, 10]], [[0, 0, 10, 10], [1, 1, 10, 10]], 0.5,
                                            gt_ignore=[True, False])
        assert tp.tolist() == [True] and matched.tolist() == [False, True]


class TestAp:
    def test_grid(self):
        assert len(RECALL_GRID) == 101 and RECALL_GRID[37] == 0.37

    def test_tp_first(self):
        assert ap_at_threshold([True, False], 1) == 1.0

    def test_fp_first(self):
        assert ap_at_threshold([False, True], 1) == 0.5

    def test_no_detections(self):
        assert ap_at_threshold([], 3) == 0.0

    def test_no_gt(self):
        assert ap_at_threshold([False], 0) is None

    def test_envelope(self):
        np.testing.assert_array_equal(precision_envelope([1.0, 0.5, 0.67, 0.5]), [1.0, 0.67, 0.67, 0.5])

    def test_interpolated_monotone(self):
        rng = np.random.default_rng(0)
        flags = rng.random(50) < 0.5
        p = interpolated_pr(flags, 40)
        assert np.all(np.diff(p) <= 0)

    def test_vs_exhaustive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(0, 30))
            flags = list(rng.random(n) < rng.random())
            n_gt = max(int(sum(flags)) + int(rng.integers(0, 4)), 1)
            assert abs(ap_at_threshold(flags, n_gt) - oracles.ap_from_flags(flags, n_gt)) <= 1e-12


class TestEvaluate:
    GT = coco([1, 2], [(1, [0, 0, 4, 4]), (1, [20, 20, 8, 8]), (2, [5, 5, 12, 12]), (2, [30, 30, 6, 6])])

    def test_gt_as_detections_is_perfect(self):
        res = evaluate(self.GT, dets((a["image_id"], a["bbox"], 0.9) for a in self.GT["annotations"]))
        for b in ("small", "medium", "large", "all"):
            if res.num_gt[b]:
                assert res.map(b) == 1.0 and res.mar(b) == 1.0

    def test_empty_detections(self):
        res = evaluate(self.GT, [])
        assert res.map("all") == 0.0 and res.mar("all") == 0.0

    def test_two_det_one_gt(self):
        gt = coco([1], [(1, [0, 0, 10, 10])])
        hit, miss = [0, 0, 10, 10], [40, 40, 10, 10]
        cfg = EvalConfig(iou_thresholds=(0.5,))
        assert evaluate(gt, dets([(1, hit, 0.9), (1, miss, 0.8)]), cfg).ap["all"] == [1.0]
        assert evaluate(gt, dets([(1, hit, 0.8), (1, miss, 0.9)]), cfg).ap["all"] == [0.5]

    def test_empty_bin_reports_none(self):
        res = evaluate(self.GT, [], EvalConfig(area_cuts=(1000.0, 2000.0)))
        assert res.num_gt["large"] == 0 and res.map("large") is None
        assert "  -  " in format_report(res)

    def test_unknown_image(self):
        with pytest.raises(EvalConsistencyError):
            evaluate(self.GT, dets([(9, [0, 0, 1, 1], 0.5)]))

    def test_max_detections(self):
        gt = coco([1], [(1, [0, 0, 10, 10])])
        noise = [(1, [50, 50, 5, 5], 0.9)] * 3
        res = evaluate(gt, dets(noise + [(1, [0, 0, 10, 10], 0.1)]), EvalConfig(max_detections=3))
        assert res.mar("all") == 0.0

    def test_json_report(self):
        text = evaluate(self.GT, []).to_json()
        d = json.loads(text)
        assert d["mAP"] == 0.0 and set(d["bins"]) == {"small", "medium", "large", "all"}

    def test_default_thresholds(self):
        assert default_thresholds() == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)

    def test_vs_reference_evaluator(self):
        rng = np.random.default_rng(2)
        thresholds = default_thresholds()
        for _ in range(200):
            gt, res = random_instance(rng)
            areas = [a["bbox"][2] * a["bbox"][3] for a in gt["annotations"]]
            cuts = tuple(np.quantile(areas, [1 / 3, 2 / 3])) if areas else (0.0, 0.0)
            got = evaluate(gt, res)
            ref = oracles.coco_eval(gt, res, thresholds, cuts)
            for b, (aps, recs) in ref.items():
                for x, y in zip(got.ap[b] + got.recall[b], aps + recs):
                    assert (x is None and y is None) or abs(x - y) <= 1e-12

    def test_invariances(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            gt, res = random_instance(rng)
            base = evaluate(gt, res).to_json()
            # result order and monotone score rescaling do not matter
            assert evaluate(gt, res[::-1]).to_json() == base or _has_score_ties(res)
            rescaled = [dict(r, score=r["score"] ** 2 / 2) for r in res]
            assert evaluate(gt, rescaled).to_json() == base


def _has_score_ties(res):
    keys = [(r["image_id"], r["score"]) for r in res]
    return len(keys) != len(set(keys))


class TestBins:
    def test_cut_goes_low(self):
        assert area_bin(10.0, (10.0, 20.0)) == "small"
        assert area_bin(20.0, (10.0, 20.0)) == "medium"
        assert area_bin(20.5, (10.0, 20.0)) == "large"

    def test_tertiles(self):
        cuts = area_cuts_from([1, 2, 3, 4, 5, 6, 7])
        assert cuts == pytest.approx((3.0, 5.0))
        bins = bin_by_area([1, 2, 3, 4, 5, 6, 7], cuts)
        assert [len(bins[b]) for b in ("small", "medium", "large", "all")] == [3, 2, 2, 7]

    def test_histogram(self):
        hist = area_histogram([0, 5, 10, 25], 10)
        assert hist == [(0.0, 2), (10.0, 1), (20.0, 1)]
        assert histogram_csv(hist).splitlines()[:2] == ["bucket_start,count", "0.000000,2"]

    def test_histogram_sums(self):
        a = np.random.default_rng(4).uniform(0, 500, size=300)
        assert sum(c for _, c in area_histogram(a, 25)) == 300

    def test_histogram_bad_width(self):
        with pytest.raises(ValueError):
            area_histogram([1.0], 0)
