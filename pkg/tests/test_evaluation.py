import math

import numpy as np
import pytest

from oracles import reference_psnr, reference_ssim
from splatlift.evaluation import BucketMetrics, EvalReport, evaluate, score_pair
from tests_support import tiny_sample


class TestScorePair:
    def test_uses_crop_and_clip(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(-0.2, 1.2, (40, 40, 3))
        b = rng.uniform(size=(40, 40, 3))
        m = np.ones((40, 40))
        got = score_pair(a, b, m)
        ca, cb = np.clip(a, 0, 1)[2:38, 2:38], b[2:38, 2:38]
        assert got["psnr"] == pytest.approx(reference_psnr(ca, cb), abs=1e-9)
        assert got["ssim"] == pytest.approx(reference_ssim(ca, cb), abs=1e-6)
        assert got["masked_psnr"] == pytest.approx(got["psnr"], abs=1e-9)

    def test_empty_mask(self):
        x = np.zeros((20, 20, 3))
        got = score_pair(x, x + 0.1, np.zeros((20, 20)))
        assert got["masked_psnr"] is None and got["masked_ssim"] is None

    def test_masked_only_counts_mask(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(size=(40, 40, 3)), rng.uniform(size=(40, 40, 3))
        m = np.zeros((40, 40))
        m[10:30, 5:20] = 1
        b2 = b.copy()
        b2[m == 0] = 0.0  # outside the mask, content is irrelevant
        assert score_pair(a, b, m)["masked_psnr"] == pytest.approx(score_pair(a, b2, m)["masked_psnr"], abs=1e-12)


class TestEvaluate:
    def test_buckets_and_means(self):
        samples = [tiny_sample(16, seed) for seed in range(3)]
        preds = {s.sample_id: np.clip(s.x_target.data + 0.05, 0, 1) for s in samples}
        rep = evaluate(lambda s: preds[s.sample_id], {"a": samples, "b": samples[:1], "empty": []})
        assert list(rep.buckets) == ["a", "b"]
        per = [score_pair(preds[s.sample_id], s.x_target.data, s.metric_mask()) for s in samples]
        assert rep.buckets["a"].count == 3
        assert rep.buckets["a"].psnr == pytest.approx(np.mean([p["psnr"] for p in per]), rel=1e-12)
        assert rep.buckets["b"].masked_ssim == pytest.approx(per[0]["masked_ssim"], rel=1e-12)

    def test_perfect_prediction(self):
        s = tiny_sample(16)
        rep = evaluate(lambda s: s.x_target.data, {"x": [s]})
        assert math.isinf(rep.buckets["x"].psnr) and rep.buckets["x"].ssim == pytest.approx(1.0)


class TestReport:
    def test_json_round_trip(self):
        rep = EvalReport({"a": BucketMetrics(float("inf"), 0.9, None, None, 2), "b": BucketMetrics(20.5, 0.8, 21.0, 0.85, 3)})
        text = rep.to_json()
        assert '"inf"' in text and '"n/a"' in text
        assert EvalReport.from_json(text) == rep

    def test_table(self):
        rep = EvalReport({"input": BucketMetrics(23.134, 0.92371, None, 0.9, 10)})
        lines = rep.to_table().splitlines()
        assert lines[0].split() == ["bucket", "PSNR", "SSIM", "mPSNR", "mSSIM", "n"]
        assert lines[2].split() == ["input", "23.13", "0.9237", "n/a", "0.9000", "10"]


class TestDeterminism:
    def test_perfect_predictor_all_buckets(self):
        buckets = {name: [tiny_sample(16, s)] for s, name in enumerate(("input", "+5", "+10", "uniform"))}
        rep = evaluate(lambda s: s.x_target.data, buckets)
        assert all(math.isinf(b.psnr) for b in rep.buckets.values())

    def test_all_ones_masks_equal_unmasked(self):
        s = tiny_sample(16)
        s.eval_mask = np.ones((16, 16))
        rep = evaluate(lambda s: np.clip(s.x_target.data + 0.07, 0, 1), {"x": [s]})
        b = rep.buckets["x"]
        assert b.masked_psnr == b.psnr and b.masked_ssim == b.ssim

    def test_report_bytes_stable(self):
        from splatlift.lifter import LifterConfig, LifterParams

        p = LifterParams.create(LifterConfig(height=16, width=16, channels=(4, 4, 4, 4)), seed=1)
        samples = [tiny_sample(16, s) for s in range(2)]
        assert evaluate(p, {"a": samples}).to_json() == evaluate(p, {"a": samples}).to_json()
