"""Evaluator tests: AP conventions against a brute-force PR oracle,
matching rules, settings, and triplet composition."""

import itertools

import numpy as np
import pytest

from hoidet.data import HoiAnnotation
from hoidet.errors import ConfigError
from hoidet.evaluation import (ap_from_ranked, evaluate_role_map,
                               ground_truth_from_doc, ground_truth_to_doc,
                               pair_is_tp, predictions_from_doc,
                               predictions_to_doc, rare_classes_from_counts)
from hoidet.heads import HoiPrediction
from hoidet.inference import ScoredTriplet, compose_triplets
from hoidet.tensor import Tensor


def annotation(hbox, obox, obj, verbs, num_verbs=3):
    vec = np.zeros(num_verbs)
    vec[list(verbs)] = 1.0
    return HoiAnnotation(human_box=np.asarray(hbox, dtype=np.float64),
                         object_box=np.asarray(obox, dtype=np.float64),
                         object_class=obj, verb_vector=vec)


def triplet(hbox, obox, obj, verb, score, query=0):
    return ScoredTriplet(human_box=np.asarray(hbox, dtype=np.float64),
                         object_box=np.asarray(obox, dtype=np.float64),
                         object_class=obj, verb=verb, score=score, query=query)


# --- independent oracle -----------------------------------------------------


def oracle_ap_allpoint(flags, num_gt):
    """Direct O(n^2) area under the interpolated PR curve: no cumsum, no
    running-max trick."""
    if num_gt == 0 or not flags:
        return 0.0
    points = []
    tp = fp = 0
    for f in flags:
        tp, fp = tp + bool(f), fp + (not f)
        points.append((tp / num_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for i, f in enumerate(flags):
        if not f:
            continue
        recall = points[i][0]
        p_interp = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * p_interp
        prev_recall = recall
    return ap


def oracle_role_map(preds_by_image, gts_by_image, setting="default"):
    """Straightforward per-class evaluation written independently of the
    production evaluator."""
    from hoidet.boxes import cxcywh_to_xyxy, iou_xyxy

    def classes_of(gt):
        return [(gt.object_class, v) for v in np.flatnonzero(gt.verb_vector)]

    gt_count = {}
    images_with_obj = {}
    for img_id, gts in gts_by_image.items():
        for gt in gts:
            images_with_obj.setdefault(gt.object_class, set()).add(img_id)
            for cls in classes_of(gt):
                gt_count[cls] = gt_count.get(cls, 0) + 1

    result = {}
    for cls in gt_count:
        entries = []
        for img_id, preds in preds_by_image.items():
            if setting == "known" and img_id not in images_with_obj[cls[0]]:
                continue
            for t in preds:
                if (t.object_class, t.verb) == cls:
                    entries.append((img_id, t))
        entries.sort(key=lambda it: (-it[1].score, it[0], it[1].query))
        taken = set()
        flags = []
        for img_id, t in entries:
            best = (0.0, -1)
            for j, gt in enumerate(gts_by_image.get(img_id, [])):
                if (img_id, j) in taken or cls not in classes_of(gt):
                    continue
                iou_h = iou_xyxy(cxcywh_to_xyxy(t.human_box), cxcywh_to_xyxy(gt.human_box))
                iou_o = iou_xyxy(cxcywh_to_xyxy(t.object_box), cxcywh_to_xyxy(gt.object_box))
                m = float(min(iou_h, iou_o))
                if m > best[0]:
                    best = (m, j)
            if best[0] > 0.5:
                taken.add((img_id, best[1]))
                flags.append(True)
            else:
                flags.append(False)
        result[cls] = oracle_ap_allpoint(flags, gt_count[cls])
    return result


class TestApFromRanked:
    def test_single_tp(self):
        assert ap_from_ranked([True], 1) == 1.0

    def test_fp_then_tp(self):
        assert ap_from_ranked([False, True], 1) == pytest.approx(0.5, abs=0)

    def test_tp_fp_tp(self):
        assert ap_from_ranked([True, False, True], 2) == pytest.approx(5 / 6, abs=1e-12)

    def test_zero_gt(self):
        assert ap_from_ranked([], 0) == 0.0

    def test_exhaustive_small_cases_match_oracle(self):
        for n_pred in range(0, 9):
            for num_gt in range(0, 5):
                for bits in itertools.product([False, True], repeat=n_pred):
                    if sum(bits) > num_gt:
                        continue
                    got = ap_from_ranked(list(bits), num_gt)
                    want = oracle_ap_allpoint(list(bits), num_gt)
                    assert got == pytest.approx(want, abs=1e-12), (bits, num_gt)

    def test_trailing_fp_never_increases(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 10))
            flags = list(rng.uniform(size=n) > 0.5)
            num_gt = max(1, sum(flags))
            assert ap_from_ranked(flags + [False], num_gt) <= ap_from_ranked(flags, num_gt) + 1e-12

    def test_leading_tp_never_decreases(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 10))
            flags = list(rng.uniform(size=n) > 0.5)
            num_gt = sum(flags) + 1
            assert ap_from_ranked([True] + flags, num_gt) >= ap_from_ranked(flags, num_gt) - 1e-12

    def test_eleven_point_variant(self):
        # single TP at rank 1 of 1 GT: precision 1 at all recalls
        assert ap_from_ranked([True], 1, interpolation="11point") == pytest.approx(1.0)
        # FP then TP with 1 GT: interpolated precision 0.5 everywhere
        assert ap_from_ranked([False, True], 1, interpolation="11point") == pytest.approx(0.5)
        with pytest.raises(ConfigError):
            ap_from_ranked([True], 1, interpolation="5point")


class TestPairIsTp:
    def test_exact_match(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        t = triplet(gt.human_box, gt.object_box, 0, 0, 0.9)
        assert pair_is_tp(t, gt)

    def test_min_rule(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        # human box perfect, object box disjoint: min IoU = 0
        t = triplet(gt.human_box, [0.1, 0.1, 0.05, 0.05], 0, 0, 0.9)
        assert not pair_is_tp(t, gt)

    def test_strictly_above_half(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        # shift so IoU is barely above 0.5 on both boxes
        shift = np.array([0.064, 0.0, 0.0, 0.0])
        t = triplet(gt.human_box + shift, gt.object_box + shift, 0, 0, 0.9)
        from hoidet.boxes import cxcywh_to_xyxy, iou_xyxy
        iou = iou_xyxy(cxcywh_to_xyxy(gt.human_box), cxcywh_to_xyxy(t.human_box))
        assert 0.5 < iou < 0.55
        assert pair_is_tp(t, gt)

    def test_exactly_half_is_false(self):
        # a half-width box nested inside the ground truth: IoU is exactly
        # 0.5 in binary floating point, and the rule is strict
        gt = annotation([0.5, 0.5, 0.5, 0.25], [0.5, 0.5, 0.5, 0.25], 0, [0])
        t = triplet([0.5, 0.5, 0.25, 0.25], [0.5, 0.5, 0.25, 0.25], 0, 0, 0.9)
        from hoidet.boxes import cxcywh_to_xyxy, iou_xyxy
        assert iou_xyxy(cxcywh_to_xyxy(gt.human_box), cxcywh_to_xyxy(t.human_box)) == 0.5
        assert not pair_is_tp(t, gt)


class TestEvaluator:
    def test_single_exact_prediction(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, [2])
        preds = {0: [triplet(gt.human_box, gt.object_box, 1, 2, 0.8)]}
        report = evaluate_role_map(preds, {0: [gt]})
        assert report.per_class[(1, 2)] == 1.0
        assert report.full_map == 1.0

    def test_single_miss_is_zero(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, [2])
        preds = {0: [triplet([0.1, 0.1, 0.05, 0.05], [0.9, 0.9, 0.05, 0.05], 1, 2, 0.8)]}
        report = evaluate_role_map(preds, {0: [gt]})
        assert report.per_class[(1, 2)] == 0.0

    def test_each_gt_matched_once(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        dup = triplet(gt.human_box, gt.object_box, 0, 0, 0.9, query=0)
        dup2 = triplet(gt.human_box, gt.object_box, 0, 0, 0.8, query=1)
        report = evaluate_role_map({0: [dup, dup2]}, {0: [gt]})
        # one TP then one FP with 1 GT: AP = 1
        assert report.per_class[(0, 0)] == 1.0

    def test_known_object_restricts_images(self):
        gt0 = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        gt1 = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, [0])
        # image 1 has no object-0 ground truth; a stray class-(0,0) FP there
        # hurts the default setting but not the known-object setting
        stray = triplet([0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.1, 0.1], 0, 0, 0.99, query=3)
        hit = triplet(gt0.human_box, gt0.object_box, 0, 0, 0.5)
        preds = {0: [hit], 1: [stray]}
        gts = {0: [gt0], 1: [gt1]}
        default = evaluate_role_map(preds, gts, setting="default")
        known = evaluate_role_map(preds, gts, setting="known")
        assert default.per_class[(0, 0)] == pytest.approx(0.5)
        assert known.per_class[(0, 0)] == 1.0

    def test_rare_aggregation(self):
        gt_a = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        gt_b = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, [1])
        preds = {0: [triplet(gt_a.human_box, gt_a.object_box, 0, 0, 0.9),
                     triplet([0.1, 0.1, 0.05, 0.05], [0.2, 0.2, 0.05, 0.05], 1, 1, 0.8)]}
        report = evaluate_role_map(preds, {0: [gt_a, gt_b]},
                                   rare_classes={(1, 1)})
        assert report.rare_map == 0.0
        assert report.non_rare_map == 1.0
        assert report.full_map == 0.5

    def test_200_random_cases_match_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n_images = int(rng.integers(1, 4))
            gts_by_image = {}
            preds_by_image = {}
            for img in range(n_images):
                gts = []
                for _ in range(int(rng.integers(0, 4))):
                    c = rng.uniform(0.25, 0.75, size=2)
                    gts.append(annotation(
                        np.concatenate([c, rng.uniform(0.1, 0.3, 2)]),
                        np.concatenate([rng.uniform(0.25, 0.75, 2), rng.uniform(0.1, 0.3, 2)]),
                        int(rng.integers(2)), [int(rng.integers(2))], num_verbs=2))
                preds = []
                for q in range(int(rng.integers(0, 8))):
                    if gts and rng.uniform() < 0.6:
                        base = gts[int(rng.integers(len(gts)))]
                        jitter = rng.normal(scale=0.03, size=4)
                        hb = base.human_box + jitter
                        ob = base.object_box + jitter
                        obj = base.object_class
                        verb = int(np.flatnonzero(base.verb_vector)[0])
                    else:
                        hb = np.concatenate([rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.3, 2)])
                        ob = np.concatenate([rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.3, 2)])
                        obj = int(rng.integers(2))
                        verb = int(rng.integers(2))
                    preds.append(triplet(hb, ob, obj, verb, float(rng.uniform()), query=q))
                gts_by_image[img] = gts
                preds_by_image[img] = preds
            setting = "known" if rng.uniform() < 0.5 else "default"
            report = evaluate_role_map(preds_by_image, gts_by_image, setting=setting)
            want = oracle_role_map(preds_by_image, gts_by_image, setting=setting)
            assert set(report.per_class) == set(want)
            for cls in want:
                assert report.per_class[cls] == pytest.approx(want[cls], abs=1e-9), cls

    def test_score_order_invariance(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 0, [0])
        t1 = triplet(gt.human_box, gt.object_box, 0, 0, 0.9, query=0)
        t2 = triplet([0.1, 0.1, 0.05, 0.05], [0.2, 0.2, 0.05, 0.05], 0, 0, 0.3, query=1)
        base = evaluate_role_map({0: [t1, t2]}, {0: [gt]}).per_class[(0, 0)]
        t1b = triplet(gt.human_box, gt.object_box, 0, 0, 0.51, query=0)
        t2b = triplet([0.1, 0.1, 0.05, 0.05], [0.2, 0.2, 0.05, 0.05], 0, 0, 0.0001, query=1)
        same = evaluate_role_map({0: [t1b, t2b]}, {0: [gt]}).per_class[(0, 0)]
        assert base == same

    def test_rare_classes_from_counts(self):
        counts = {(0, 0): 15, (0, 1): 9, (1, 0): 10}
        assert rare_classes_from_counts(counts) == {(0, 1)}


class TestTripletComposition:
    def make_pred(self, co, cv, boxes_h=None, boxes_o=None):
        n_q = np.asarray(co).shape[0]
        bh = boxes_h if boxes_h is not None else np.tile([0.4, 0.4, 0.2, 0.2], (n_q, 1))
        bo = boxes_o if boxes_o is not None else np.tile([0.6, 0.6, 0.2, 0.2], (n_q, 1))
        return HoiPrediction(
            human_boxes=Tensor(bh[None]), object_boxes=Tensor(bo[None]),
            object_logits=Tensor(np.asarray(co, dtype=float)[None]),
            verb_logits=Tensor(np.asarray(cv, dtype=float)[None]))

    @staticmethod
    def logit(p):
        return float(np.log(p / (1 - p)))

    def test_score_is_product(self):
        pred = self.make_pred([[self.logit(0.5), 30.0]],
                              [[self.logit(0.8), -30.0]])
        trips = compose_triplets(pred)
        best = trips[0]
        assert best.object_class == 1
        # object prob ~1.0, verb prob 0.8 -> score ~0.8
        assert best.score == pytest.approx(0.8, abs=1e-6)

    def test_product_formula_exact(self):
        pred = self.make_pred([[self.logit(0.5)]], [[self.logit(0.8)]])
        trips = compose_triplets(pred)
        assert trips[0].score == pytest.approx(0.4, abs=1e-9)

    def test_top_k_saturation(self):
        rng = np.random.default_rng(3)
        pred = self.make_pred(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
        trips = compose_triplets(pred, top_k=100)
        assert len(trips) <= 12  # 4 queries x 3 verbs, minus suppressed duplicates

    def test_top_k_limits(self):
        rng = np.random.default_rng(4)
        boxes_h = np.concatenate([rng.uniform(0.2, 0.8, (20, 2)), rng.uniform(0.05, 0.2, (20, 2))], axis=1)
        boxes_o = np.concatenate([rng.uniform(0.2, 0.8, (20, 2)), rng.uniform(0.05, 0.2, (20, 2))], axis=1)
        pred = self.make_pred(rng.normal(size=(20, 3)), rng.normal(size=(20, 3)),
                              boxes_h, boxes_o)
        trips = compose_triplets(pred, top_k=5, iou_filter=1.1)  # filter off
        assert len(trips) == 5

    def test_identical_duplicate_suppressed(self):
        # two queries with identical boxes and classes; lower-scored one removed
        co = [[30.0, -30.0], [30.0, -30.0]]
        cv = [[self.logit(0.9), -30.0], [self.logit(0.6), -30.0]]
        pred = self.make_pred(co, cv)
        trips = compose_triplets(pred, iou_filter=0.5)
        same_class = [t for t in trips if (t.object_class, t.verb) == (0, 0)]
        assert len(same_class) == 1
        assert same_class[0].score == pytest.approx(0.9, abs=1e-5)

    def test_distinct_classes_not_suppressed(self):
        co = [[30.0, -30.0], [30.0, -30.0]]
        cv = [[self.logit(0.9), -30.0], [-30.0, self.logit(0.6)]]
        pred = self.make_pred(co, cv)
        trips = compose_triplets(pred, iou_filter=0.5)
        classes = {(t.object_class, t.verb) for t in trips if t.score > 0.1}
        assert (0, 0) in classes and (0, 1) in classes

    def test_determinism(self):
        rng = np.random.default_rng(5)
        pred = self.make_pred(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
        a = compose_triplets(pred)
        b = compose_triplets(pred)
        assert [(t.query, t.verb, t.score) for t in a] == [(t.query, t.verb, t.score) for t in b]


class TestFileFormats:
    def test_prediction_round_trip(self):
        t = triplet([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, 2, 0.7, query=3)
        doc = predictions_to_doc({5: [t]})
        back = predictions_from_doc(doc)
        assert back[5][0].object_class == 1
        assert back[5][0].verb == 2
        assert back[5][0].score == pytest.approx(0.7)
        np.testing.assert_array_equal(back[5][0].human_box, t.human_box)

    def test_gt_round_trip(self):
        gt = annotation([0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2], 1, [0, 2])
        doc = ground_truth_to_doc({7: [gt]})
        back = ground_truth_from_doc(doc, num_verbs=3)
        np.testing.assert_array_equal(back[7][0].verb_vector, gt.verb_vector)
        assert back[7][0].object_class == 1
