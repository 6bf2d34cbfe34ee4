import numpy as np
import pytest

import oracles
from anomseg import metrics
from anomseg.errors import DataError
from anomseg.metrics import PixelCounts, ScoredPair


class TestAccumulateCounts:
    def test_perfect_prediction(self):
        gt = np.zeros((10, 10), dtype=bool)
        gt[:2, :5] = True
        counts = metrics.accumulate_counts(gt, gt)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == (10, 0, 0, 90)

    def test_empty_prediction(self):
        gt = np.zeros((10, 10), dtype=bool)
        gt[0, :10] = True
        counts = metrics.accumulate_counts(np.zeros_like(gt), gt)
        assert counts.fn == 10 and counts.tp == 0

    def test_matches_pixel_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pred = rng.random((13, 9)) < 0.5
            gt = rng.random((13, 9)) < 0.3
            counts = metrics.accumulate_counts(pred, gt)
            assert (counts.tp, counts.fp, counts.fn, counts.tn) == oracles.confusion_loop(pred, gt)

    def test_geometry_mismatch(self):
        with pytest.raises(DataError):
            metrics.accumulate_counts(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


class TestF1:
    def test_hand_case(self):
        assert metrics.f1(PixelCounts(tp=8, fp=2, fn=2, tn=0)) == pytest.approx(0.8)

    def test_perfect(self):
        assert metrics.f1(PixelCounts(tp=5, fp=0, fn=0, tn=10)) == 1.0

    def test_degenerate_zero(self):
        assert metrics.f1(PixelCounts(tp=0, fp=3, fn=1, tn=10)) == 0.0

    def test_both_empty_is_one(self):
        assert metrics.f1(PixelCounts(tp=0, fp=0, fn=0, tn=100)) == 1.0

    def test_invariant_to_tn(self):
        a = PixelCounts(tp=7, fp=3, fn=2, tn=0)
        b = PixelCounts(tp=7, fp=3, fn=2, tn=10_000)
        assert metrics.f1(a) == metrics.f1(b)


def pair(scores, gt):
    return ScoredPair(np.asarray(scores, dtype=np.float64), np.asarray(gt, dtype=bool))


class TestAurocCapped:
    def test_perfect_separation(self):
        p = pair([[0.9, 0.8], [0.1, 0.2]], [[True, True], [False, False]])
        assert metrics.auroc_capped([p]) == 1.0

    def test_constant_scores_exactly_half(self):
        p = pair(np.full((4, 4), 0.7), np.eye(4, dtype=bool))
        assert metrics.auroc_capped([p]) == 0.5

    def test_hand_case_matches_sweep(self):
        scores = np.array([[0.9, 0.8, 0.7, 0.1]])
        gt = np.array([[True, False, True, False]])
        got = metrics.auroc_capped([pair(scores, gt)])
        ref = oracles.auroc_capped_sweep(scores, gt, 0.05)
        assert got == pytest.approx(ref, abs=1e-12)

    def test_random_fixtures_match_sweep(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(20, 200))
            scores = np.round(rng.random(n), 2)  # duplicates likely
            gt = rng.random(n) < 0.3
            if not gt.any() or gt.all():
                continue
            got = metrics.auroc_capped([pair(scores, gt)], 0.05)
            ref = oracles.auroc_capped_sweep(scores, gt, 0.05)
            assert got == pytest.approx(ref, abs=1e-9)

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(5)
        scores = rng.random((8, 8))
        gt = rng.random((8, 8)) < 0.4
        base = metrics.auroc_capped([pair(scores, gt)])
        warped = metrics.auroc_capped([pair(np.exp(3.0 * scores), gt)])
        assert warped == pytest.approx(base, abs=1e-12)

    def test_needs_both_classes(self):
        with pytest.raises(DataError):
            metrics.auroc_capped([pair([[1.0, 2.0]], [[True, True]])])


class TestEvaluateClass:
    def test_single_image(self):
        rng = np.random.default_rng(1)
        gt = rng.random((10, 10)) < 0.3
        pred = rng.random((10, 10)) < 0.4
        scores = rng.random((10, 10))
        res = metrics.evaluate_class({"a": pred}, {"a": gt}, {"a": scores})
        assert res.f1 == metrics.f1(metrics.accumulate_counts(pred, gt))
        assert res.auroc_capped == metrics.auroc_capped([pair(scores, gt)])

    def test_pooled_f1_between_per_image_values(self):
        gt = np.zeros((4, 4), dtype=bool)
        gt[:2] = True
        perfect = gt.copy()
        empty = np.zeros_like(gt)
        scores = gt.astype(float)
        res = metrics.evaluate_class(
            {"a": perfect, "b": empty},
            {"a": gt, "b": gt},
            {"a": scores, "b": scores * 0 + 0.5},
        )
        f1_a = metrics.f1(metrics.accumulate_counts(perfect, gt))  # 1.0
        f1_b = metrics.f1(metrics.accumulate_counts(empty, gt))  # 0.0
        assert f1_b < res.f1 < f1_a

    def test_pooled_differs_from_per_image_mean(self):
        # pooling weights images by pixel counts, the mean does not
        gt_small = np.zeros((2, 2), dtype=bool); gt_small[0, 0] = True
        gt_large = np.ones((2, 2), dtype=bool)
        pred_small = np.zeros_like(gt_small)        # f1 = 0
        pred_large = gt_large.copy()                # f1 = 1
        pooled = metrics.evaluate_class(
            {"a": pred_small, "b": pred_large},
            {"a": gt_small, "b": gt_large},
            {"a": gt_small.astype(float), "b": gt_large.astype(float)},
        ).f1
        per_image_mean = 0.5
        counts = metrics.accumulate_counts(pred_small, gt_small) + metrics.accumulate_counts(
            pred_large, gt_large
        )
        assert pooled == metrics.f1(counts)
        assert pooled != per_image_mean

    def test_order_invariant(self):
        rng = np.random.default_rng(2)
        data = {f"im{i}": (rng.random((6, 6)) < 0.5, rng.random((6, 6)) < 0.3, rng.random((6, 6)))
                for i in range(4)}
        preds = {k: v[0] for k, v in data.items()}
        gts = {k: v[1] for k, v in data.items()}
        maps = {k: v[2] for k, v in data.items()}
        a = metrics.evaluate_class(preds, gts, maps)
        rev = dict(reversed(list(preds.items())))
        b = metrics.evaluate_class(rev, gts, maps)
        assert a == b

    def test_missing_image_listed(self):
        gt = {"a": np.zeros((2, 2), bool), "b": np.ones((2, 2), bool)}
        with pytest.raises(DataError, match=r"\['b'\]"):
            metrics.evaluate_class({"a": np.zeros((2, 2), bool)}, gt, {"a": np.zeros((2, 2))})


class TestReport:
    def test_report_structure_and_table(self):
        res = metrics.ClassResult(f1=0.5, auroc_capped=0.75, counts=PixelCounts(1, 1, 1, 1))
        report = metrics.make_report({"widget": res, "gadget": res})
        assert report["mean_f1"] == pytest.approx(0.5)
        assert report["mean_auroc"] == pytest.approx(0.75)
        assert set(report["per_class"]) == {"widget", "gadget"}
        table = metrics.format_report_table(report)
        assert "Mean" in table and "widget" in table and "75.00" in table
