"""Tests for evaluation metrics against hand cases and brute-force references"""

import itertools
import json

import numpy as np
import pytest

import mask_ops
from annotation_io import FITBQuestion, ImageInfo, InstanceRecord
from fashion_metrics import (Detection, LandmarkEvalPair, MetricReport, evaluate_detections, fitb_accuracy, iou,
                             landmark_pairs, normalized_error, pdl_curve, per_attribute_topk, retrieval_recall_at_k,
                             roc_auc)


def _gt(ann_id, image_id, box, category_id=1, iscrowd=False):
    x, y, w, h = box
    ring = (x, y, x + w, y, x + w, y + h, x, y + h)
    return InstanceRecord(ann_id, image_id, category_id, tuple(float(v) for v in box),
                          (tuple(float(v) for v in ring),), float(w * h), iscrowd)


def _topk_by_hand(scores, gts, k):
    """Per-image top-k by (score desc, index asc), then tp/g and (tp+tn)/p per attribute"""
    n, c = len(scores), len(scores[0])
    tp, tn, g = [0] * c, [0] * c, [0] * c
    for row_scores, row_gts in zip(scores, gts):
        top = sorted(range(c), key=lambda j: (-row_scores[j], j))[:k]
        for j in range(c):
            g[j] += row_gts[j]
            if j in top and row_gts[j]:
                tp[j] += 1
            if j not in top and not row_gts[j]:
                tn[j] += 1
    recalls = [tp[j] / g[j] for j in range(c) if g[j] > 0]
    return sum(recalls) / len(recalls), sum((tp[j] + tn[j]) / n for j in range(c)) / c


def _box_overlap(a, b):
    iw = min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0])
    ih = min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


class TestAttributeTopk:

    def test_perfect_predictions(self):
        gts = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=bool)
        recall, accuracy, counts = per_attribute_topk(gts.astype(float), gts, k=1)
        assert (recall, accuracy) == (1.0, 1.0)
        assert counts.tp.tolist() == [2, 1, 1]

    def test_hand_evaluation(self):
        scores = [[0.9, 0.1], [0.8, 0.2]]
        gts = [[True, False], [False, True]]
        recall, accuracy, counts = per_attribute_topk(scores, gts, k=1)
        assert recall == pytest.approx(0.5)
        assert accuracy == pytest.approx(0.5)
        assert counts.g.tolist() == [1, 1] and counts.p.tolist() == [2, 2]

    def test_k_equals_c_saturates_recall(self):
        rng = np.random.default_rng(0)
        gts = rng.random((10, 5)) < 0.4
        gts[0] = True
        recall, _, _ = per_attribute_topk(rng.random((10, 5)), gts, k=5)
        assert recall == 1.0

    def test_ties_pick_lower_index(self):
        _, _, counts = per_attribute_topk(np.zeros((2, 3)), [[1, 1, 0], [0, 1, 1]], k=1)
        assert counts.tp.tolist() == [1, 0, 0]

    def test_absent_attributes_excluded_from_recall(self):
        recall, _, counts = per_attribute_topk([[0.9, 0.1, 0.0]], [[True, False, False]], k=1)
        assert counts.excluded == 2
        assert recall == 1.0

    def test_bounds_and_monotone_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            scores = rng.random((8, 6))
            gts = rng.random((8, 6)) < 0.3
            gts[0, 0] = True
            previous = -1.0
            for k in range(1, 7):
                recall, accuracy, counts = per_attribute_topk(scores, gts, k)
                assert 0.0 <= recall <= 1.0 and 0.0 <= accuracy <= 1.0
                assert recall >= previous
                assert (counts.tp <= counts.g).all() and (counts.tp + counts.tn <= counts.p).all()
                previous = recall

    def test_matches_direct_counting(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            n, c = int(rng.integers(1, 11)), int(rng.integers(1, 7))
            k = int(rng.integers(1, c + 1))
            scores = rng.integers(0, 4, size=(n, c)) / 4.0
            gts = rng.random((n, c)) < 0.35
            gts[int(rng.integers(n)), int(rng.integers(c))] = True
            recall, accuracy, counts = per_attribute_topk(scores, gts, k)
            expected_recall, expected_accuracy = _topk_by_hand(scores.tolist(), gts.tolist(), k)
            assert recall == pytest.approx(expected_recall, abs=1e-9)
            assert accuracy == pytest.approx(expected_accuracy, abs=1e-9)
            assert counts.excluded == sum(not any(row[j] for row in gts.tolist()) for j in range(c))

    def test_preconditions(self):
        with pytest.raises(ValueError):
            per_attribute_topk([[0.1, 0.2]], [[True, False]], k=3)
        with pytest.raises(ValueError):
            per_attribute_topk(np.zeros((0, 2)), np.zeros((0, 2), dtype=bool), k=1)


class TestRetrievalRecall:

    def test_identical_query(self):
        result = retrieval_recall_at_k([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], ["a"], ["a", "b"], [1])
        assert result == {1: 1.0}

    def test_hand_placed_embeddings(self):
        queries = [[0.0, 0.0], [5.0, 5.0], [10.0, 0.0]]
        gallery = [[0.1, 0.0], [4.0, 4.0], [5.2, 5.0], [9.0, 0.0]]
        result = retrieval_recall_at_k(queries, gallery, ["a", "b", "c"], ["a", "x", "b", "y"], [1, 2, 4])
        # q0 -> a first; q1 -> b first; q2 -> y then b, never c
        assert result == {1: pytest.approx(2 / 3), 2: pytest.approx(2 / 3), 4: pytest.approx(2 / 3)}

    def test_matches_brute_force_and_rotation(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            queries, gallery = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
            q_items = [f"i{v}" for v in rng.integers(0, 4, size=6)]
            g_items = [f"i{v}" for v in rng.integers(0, 4, size=9)]
            ks = [1, 3, 9]
            result = retrieval_recall_at_k(queries, gallery, q_items, g_items, ks)
            for k in ks:
                hits = 0
                for q, item in zip(queries, q_items):
                    dists = [(float(np.sum((q - g) ** 2)), j) for j, g in enumerate(gallery)]
                    top = [j for _, j in sorted(dists)[:k]]
                    hits += any(g_items[j] == item for j in top)
                assert result[k] == pytest.approx(hits / 6)
            rotation, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            rotated = retrieval_recall_at_k(queries @ rotation, gallery @ rotation, q_items, g_items, ks)
            assert rotated == pytest.approx(result)
            assert result[1] <= result[3] <= result[9]

    def test_full_gallery_recall(self):
        rng = np.random.default_rng(3)
        result = retrieval_recall_at_k(rng.normal(size=(4, 2)), rng.normal(size=(5, 2)), list("abcd"),
                                       list("abcde"), [5])
        assert result[5] == 1.0

    def test_k_above_gallery_size(self):
        with pytest.raises(ValueError, match="gallery size"):
            retrieval_recall_at_k([[0.0]], [[0.0]], ["a"], ["a"], [2])


class TestLandmarkMetrics:

    def test_zero_error(self):
        assert normalized_error([LandmarkEvalPair(0, 0, 10, 10, True)]) == 0.0

    def test_three_four_five(self):
        assert normalized_error([LandmarkEvalPair(30, 40, 100, 100, True)]) == pytest.approx(0.5)

    def test_invisible_pairs_skipped(self):
        pairs = [LandmarkEvalPair(30, 40, 100, 100, True), LandmarkEvalPair(99, 99, 100, 100, False),
                 LandmarkEvalPair(0, 10, 50, 20, True)]
        assert normalized_error(pairs) == pytest.approx((0.5 + 0.5) / 2)

    def test_rescale_invariant(self):
        rng = np.random.default_rng(4)
        pairs = [LandmarkEvalPair(*rng.uniform(0, 20, size=2), *rng.uniform(40, 90, size=2), bool(v))
                 for v in rng.integers(0, 2, size=12)] + [LandmarkEvalPair(1, 1, 50, 50, True)]
        scaled = [LandmarkEvalPair(p.dx * 3, p.dy * 3, p.w * 3, p.h * 3, p.visible) for p in pairs]
        assert normalized_error(scaled) == pytest.approx(normalized_error(pairs))

    def test_no_visible_pairs(self):
        with pytest.raises(ValueError):
            normalized_error([LandmarkEvalPair(0, 0, 10, 10, False)])

    def test_landmark_pairs_from_pixels(self):
        pairs = landmark_pairs([[[3.0, 4.0]]], [[[0.0, 0.0]]], [[True]], [(10, 20)])
        assert pairs == [LandmarkEvalPair(3.0, 4.0, 10.0, 20.0, True)]

    def test_pdl_hand_case(self):
        pred = np.array([[[3.0, 0.0], [0.0, 7.0]]])
        curve = pdl_curve(pred, np.zeros_like(pred), [[True, True]], [5, 10])
        assert curve == [(5.0, 0.5), (10.0, 1.0)]

    def test_pdl_edges(self):
        pred = np.array([[[3.0, 0.0], [50.0, 0.0]]])
        assert pdl_curve(pred, np.zeros_like(pred), [[True, False]], [1, 2]) == [(1.0, 0.0), (2.0, 0.0)]
        assert pdl_curve(np.zeros_like(pred), np.zeros_like(pred), [[True, True]], [0, 1]) == [(0.0, 1.0),
                                                                                                (1.0, 1.0)]
        with pytest.raises(ValueError):
            pdl_curve(pred, pred, [[True, True]], [5, 5])
        with pytest.raises(ValueError):
            pdl_curve(pred, pred, [[False, False]], [5])

    def test_pdl_monotone(self):
        rng = np.random.default_rng(5)
        pred, gt = rng.uniform(0, 64, size=(6, 4, 2)), rng.uniform(0, 64, size=(6, 4, 2))
        visibility = rng.random((6, 4)) < 0.7
        visibility[0, 0] = True
        values = [y for _, y in pdl_curve(pred, gt, visibility, list(range(1, 100)))]
        assert values == sorted(values) and values[-1] == 1.0


class TestIou:

    def test_boxes(self):
        assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
        assert iou([0, 0, 2, 2], [1, 1, 2, 2]) == pytest.approx(1 / 7)
        assert iou([1, 1, 2, 2], [0, 0, 2, 2]) == iou([0, 0, 2, 2], [1, 1, 2, 2])

    def test_mixed_kinds(self):
        with pytest.raises(ValueError):
            iou([0, 0, 2, 2], np.ones((4, 4), dtype=bool))

    def test_rasterized_polygons_match_pixel_count(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            a = mask_ops.polygons_to_mask([rng.uniform(0, 24, size=8).tolist()], 24, 24)
            b = mask_ops.polygons_to_mask([rng.uniform(0, 24, size=8).tolist()], 24, 24)
            union = int(np.sum(a | b))
            expected = int(np.sum(a & b)) / union if union else 0.0
            assert iou(a, b) == pytest.approx(expected)
            assert iou(a, b) == iou(b, a)


def _brute_force_ap(dets, gts, thresholds):
    """Per-image greedy matching in score order, exact max-precision interpolation"""
    recall_points = np.linspace(0.0, 1.0, 101)
    values = []
    for category in sorted({g.category_id for g in gts}):
        cat_gts = [(i, g) for i, g in enumerate(gts) if g.category_id == category]
        if not cat_gts:
            continue
        cat_dets = [(i, d) for i, d in enumerate(dets) if d.category_id == category]
        for threshold in thresholds:
            outcomes = []
            for image_id in sorted({g.image_id for _, g in cat_gts} | {d.image_id for _, d in cat_dets}):
                image_gts = [g for _, g in cat_gts if g.image_id == image_id]
                taken = [False] * len(image_gts)
                image_dets = sorted([(i, d) for i, d in cat_dets if d.image_id == image_id],
                                    key=lambda pair: (-pair[1].score, pair[0]))
                for index, det in image_dets:
                    best, match = threshold, None
                    for j, gt in enumerate(image_gts):
                        overlap = _box_overlap(det.bbox, gt.bbox)
                        if not taken[j] and overlap >= best and (match is None or overlap > best):
                            best, match = overlap, j
                    if match is not None:
                        taken[match] = True
                    outcomes.append((-det.score, index, match is not None))
            outcomes.sort()
            tp = fp = 0
            curve = []
            for _, _, hit in outcomes:
                tp, fp = tp + hit, fp + (not hit)
                curve.append((tp / len(cat_gts), tp / (tp + fp)))
            for r in recall_points:
                reachable = [p for rec, p in curve if rec >= r]
                values.append(max(reachable) if reachable else 0.0)
    return float(np.mean(values))


class TestEvaluateDetections:

    def test_perfect_match_boxes_and_masks(self):
        gt = _gt(1, 1, (2, 2, 10, 10))
        images = {1: ImageInfo(1, "a.png", 32, 32)}
        det = Detection(1, 1, 0.9, (2.0, 2.0, 10.0, 10.0), mask=gt.mask(32, 32))
        report = evaluate_detections([det], [gt], images=images)
        assert report.scalars["bbox/AP"] == 1.0
        assert report.scalars["segm/AP"] == 1.0
        assert report.scalars["bbox/AP_small"] == 1.0
        assert report.scalars["bbox/AP_large"] == -1.0

    def test_threshold_gate(self):
        report = evaluate_detections([Detection(1, 1, 0.9, (0.0, 0.0, 10.0, 6.0))], [_gt(1, 1, (0, 0, 10, 10))])
        assert report.scalars["bbox/AP50"] == 1.0
        assert report.scalars["bbox/AP75"] == 0.0

    def test_false_positive_after_true_positive(self):
        dets = [Detection(1, 1, 0.9, (0.0, 0.0, 10.0, 10.0)), Detection(1, 1, 0.8, (40.0, 40.0, 5.0, 5.0))]
        report = evaluate_detections(dets, [_gt(1, 1, (0, 0, 10, 10))])
        assert report.scalars["bbox/AP50"] == 1.0

    def test_crowd_region_is_ignored(self):
        gts = [_gt(1, 1, (0, 0, 10, 10)), _gt(2, 1, (20, 20, 20, 20), iscrowd=True)]
        dets = [Detection(1, 1, 0.9, (0.0, 0.0, 10.0, 10.0)), Detection(1, 1, 0.8, (22.0, 22.0, 5.0, 5.0)),
                Detection(1, 1, 0.7, (30.0, 30.0, 5.0, 5.0))]
        report = evaluate_detections(dets, gts)
        assert report.scalars["bbox/AP"] == 1.0

    def test_unknown_references(self):
        with pytest.raises(ValueError, match="unknown image"):
            evaluate_detections([Detection(9, 1, 0.5, (0.0, 0.0, 1.0, 1.0))], [_gt(1, 1, (0, 0, 4, 4))])
        with pytest.raises(ValueError, match="unknown category"):
            evaluate_detections([Detection(1, 5, 0.5, (0.0, 0.0, 1.0, 1.0))], [_gt(1, 1, (0, 0, 4, 4))])

    def test_invalid_detection(self):
        with pytest.raises(ValueError):
            Detection(1, 1, float("nan"), (0.0, 0.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            Detection(1, 1, 0.5, (0.0, 0.0, 0.0, 1.0))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        thresholds = [0.5, 0.75]
        for trial in range(200):
            gts, dets, ann_id = [], [], 0
            for image_id in range(1, int(rng.integers(1, 6)) + 1):
                for _ in range(int(rng.integers(1, 5))):
                    ann_id += 1
                    x, y = (int(v) for v in rng.integers(0, 30, size=2))
                    w, h = (int(v) for v in rng.integers(2, 12, size=2))
                    gts.append(_gt(ann_id, image_id, (x, y, w, h), category_id=int(rng.integers(1, 3))))
            for _ in range(int(rng.integers(0, 7))):
                base = gts[int(rng.integers(len(gts)))]
                jitter = rng.integers(-2, 3, size=4)
                x, y, w, h = (float(v) for v in base.bbox)
                box = (x + jitter[0], y + jitter[1], max(w + jitter[2], 1.0), max(h + jitter[3], 1.0))
                category = base.category_id if rng.random() < 0.8 else 3 - base.category_id
                if category not in {g.category_id for g in gts}:
                    category = base.category_id
                dets.append(Detection(base.image_id, category, round(float(rng.random()), 2), box))
            report = evaluate_detections(dets, gts, iou_thresholds=thresholds, area_ranges={"all": (0.0, 1e10)})
            assert report.scalars["bbox/AP"] == pytest.approx(_brute_force_ap(dets, gts, thresholds), abs=1e-9)

    def test_report_shape(self):
        report = evaluate_detections([Detection(1, 1, 0.9, (0.0, 0.0, 10.0, 10.0))], [_gt(1, 1, (0, 0, 10, 10))])
        assert {"bbox/AP", "bbox/AP50", "bbox/AP75", "bbox/AP_small", "bbox/AP_medium", "bbox/AP_large",
                "bbox/AR"} <= set(report.scalars)
        assert len(report.curves["bbox/pr@0.5"]) == 101
        assert report.metadata["max_dets"] == 100


class TestCompatMetrics:

    def test_fitb_accuracy(self):
        questions = [FITBQuestion(("a",), ("b", "c", "d", "e"), i) for i in (0, 1, 2, 3)]
        assert fitb_accuracy([0, 1, 2, 3], questions) == 1.0
        assert fitb_accuracy([1, 2, 3, 0], questions) == 0.0
        assert fitb_accuracy([0, 1, 2, 0], questions) == 0.75
        assert fitb_accuracy([0, 1, 2, 0][::-1], questions[::-1]) == fitb_accuracy([0, 1, 2, 0], questions)
        with pytest.raises(ValueError):
            fitb_accuracy([0], questions)

    def test_auc_hand_cases(self):
        assert roc_auc([0.9, 0.8, 0.3, 0.1], [True, True, False, False]) == 1.0
        assert roc_auc([0.8, 0.4, 0.6, 0.2], [True, True, False, False]) == 0.75
        assert roc_auc([0.5] * 4, [True, False, True, False]) == 0.5

    def test_auc_matches_pair_counting(self):
        rng = np.random.default_rng(8)
        for _ in range(1000):
            n = int(rng.integers(2, 51))
            scores = rng.integers(0, 6, size=n).astype(float)
            labels = rng.random(n) < 0.5
            labels[:2] = [True, False]
            pairs = list(itertools.product(scores[labels], scores[~labels]))
            expected = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in pairs) / len(pairs)
            assert roc_auc(scores, labels) == pytest.approx(expected, abs=1e-12)
            assert roc_auc(np.exp(scores) * 3 - 1, labels) == pytest.approx(expected, abs=1e-12)

    def test_auc_single_class(self):
        with pytest.raises(ValueError):
            roc_auc([0.1, 0.2], [True, True])


class TestMetricReport:

    def test_serialization_is_stable(self):
        report = MetricReport(metadata={"ks": [1, 5]})
        report.add_scalar("b", 1 / 3)
        report.add_scalar("a", 2.0)
        report.add_curve("pdl", [(1, 0.25), (2, 2 / 3)])
        text = report.to_json()
        assert text == report.to_json()
        document = json.loads(text)
        assert list(document["scalars"]) == ["a", "b"]
        assert document["scalars"]["b"] == 0.333333
        assert MetricReport.from_dict(document).to_json() == text

    def test_invariants(self):
        report = MetricReport()
        with pytest.raises(ValueError):
            report.add_scalar("x", float("inf"))
        with pytest.raises(ValueError):
            report.add_curve("c", [(2, 0.1), (1, 0.2)])

    def test_merge_and_headline(self):
        a, b = MetricReport(), MetricReport()
        a.add_scalar("recall@1", 0.5)
        b.add_scalar("AP", 0.25)
        a.merge(b, prefix="segm/")
        assert a.headline() == ["recall@1: 0.5000", "segm/AP: 0.2500"]

    def test_plot_files(self, tmp_path):
        report = MetricReport()
        report.add_curve("pdl", [(1, 0.1), (5, 0.6), (10, 1.0)])
        report.plot(tmp_path / "curves.png")
        report.save_plot_data(tmp_path / "curves.json")
        assert (tmp_path / "curves.png").stat().st_size > 0
        assert json.loads((tmp_path / "curves.json").read_text()) == {"pdl": [[1.0, 0.1], [5.0, 0.6], [10.0, 1.0]]}
