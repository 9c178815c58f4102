"""Depth metrics, median scaling, and the dataset-level evaluation loop."""

import numpy as np
import pytest
import torch

from augdepth.datasets import (
    SyntheticSceneSpec,
    generate_synthetic,
    load_split,
    write_synthetic_sequence,
)
from augdepth.evaluation import (
    MetricsReport,
    average_reports,
    compute_metrics,
    evaluate,
    garg_crop_mask,
    median_scale,
)
from augdepth.networks import DepthHeadConfig, depth_to_disparity

import reference as ref


class TestComputeMetrics:
    def test_perfect_prediction(self, rng):
        gt = rng.uniform(1, 50, (8, 8))
        r = compute_metrics(gt, gt)
        assert r.abs_rel == 0 and r.sq_rel == 0 and r.rmse == 0 and r.rmse_log == 0
        assert r.delta1 == 1 and r.delta2 == 1 and r.delta3 == 1
        assert r.n_valid_pixels == 64

    def test_hand_computed_two_pixel_example(self):
        r = compute_metrics(np.array([2.0, 2.0]), np.array([1.0, 2.0]))
        assert r.abs_rel == pytest.approx(0.5, abs=1e-12)
        assert r.sq_rel == pytest.approx(0.5, abs=1e-12)
        assert r.rmse == pytest.approx(np.sqrt(0.5), abs=1e-6)
        assert r.rmse_log == pytest.approx(np.log(2) / np.sqrt(2), abs=1e-5)
        assert r.delta1 == pytest.approx(0.5)

    def test_matches_scalar_oracle(self, rng):
        pred = rng.uniform(1, 60, (6, 6))
        gt = rng.uniform(1, 60, (6, 6))
        r = compute_metrics(pred, gt, cap=80.0)
        expect = ref.metrics_scalar(pred, gt)
        for name, value in expect.items():
            assert getattr(r, name) == pytest.approx(value, rel=1e-12), name

    def test_zero_gt_pixels_excluded(self):
        pred = np.array([2.0, 7.0])
        gt = np.array([2.0, 0.0])
        r = compute_metrics(pred, gt)
        assert r.abs_rel == 0 and r.n_valid_pixels == 1

    def test_cap_applies_to_predictions(self):
        r = compute_metrics(np.array([200.0]), np.array([80.0]), cap=80.0)
        assert r.abs_rel == 0  # clamped to the cap before the mean

    def test_no_valid_pixels_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(np.ones((2, 2)), np.zeros((2, 2)))

    def test_invariant_to_pixel_ordering(self, rng):
        pred = rng.uniform(1, 60, 30)
        gt = rng.uniform(1, 60, 30)
        perm = rng.permutation(30)
        a = compute_metrics(pred, gt)
        b = compute_metrics(pred[perm], gt[perm])
        for name, value in a.as_dict().items():
            assert b.as_dict()[name] == pytest.approx(value, abs=1e-12), name

    def test_delta_ordering(self, rng):
        for _ in range(10):
            pred = rng.uniform(1, 60, 40)
            gt = rng.uniform(1, 60, 40)
            r = compute_metrics(pred, gt)
            assert r.delta1 <= r.delta2 <= r.delta3


class TestMedianScale:
    def test_uniform_double_recovers_gt(self, rng):
        gt = rng.uniform(1, 50, (5, 5))
        assert np.allclose(median_scale(2 * gt, gt), gt)

    def test_metrics_invariant_to_global_rescale(self, rng):
        gt = rng.uniform(1, 50, (6, 6))
        pred = rng.uniform(1, 50, (6, 6))
        a = compute_metrics(median_scale(pred, gt), gt)
        b = compute_metrics(median_scale(7.3 * pred, gt), gt)
        for name in ("abs_rel", "rmse", "delta1"):
            assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-12)

    def test_asymmetric_median_factor(self):
        pred = np.array([1.0, 4.0])
        gt = np.array([2.0, 2.0])
        scaled = median_scale(pred, gt)
        assert np.allclose(scaled, pred * 0.8)  # 2 / 2.5

    def test_rejects_zero_median(self):
        with pytest.raises(ValueError):
            median_scale(np.zeros(4), np.ones(4))


class TestGargCrop:
    def test_mask_fractions(self):
        mask = garg_crop_mask(375, 1242)
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        assert rows[0] == int(0.40810811 * 375) and rows[-1] == int(0.99189189 * 375) - 1
        assert cols[0] == int(0.03594771 * 1242) and cols[-1] == int(0.96405229 * 1242) - 1


class TestAverageReports:
    def test_per_frame_arithmetic_mean(self):
        a = compute_metrics(np.array([2.0]), np.array([1.0]))
        b = compute_metrics(np.array([1.0]), np.array([1.0]))
        avg = average_reports([a, b])
        assert avg.abs_rel == pytest.approx(0.5)
        assert avg.n_frames == 2 and avg.n_valid_pixels == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            average_reports([])


class TestEvaluateLoop:
    @pytest.fixture
    def gt_dataset(self, tmp_path):
        spec = SyntheticSceneSpec(width=64, height=32, n_frames=4, seed=8)
        scene = generate_synthetic(spec)
        write_synthetic_sequence(scene, tmp_path, "seq_00")
        (tmp_path / "split.txt").write_text("\n".join(f"seq_00 {i} l" for i in range(4)) + "\n")
        return load_split(tmp_path, tmp_path / "split.txt", load_depth=True,
                          neighbor_offsets=())

    def test_gt_injected_predictions_near_zero_error(self, gt_dataset):
        head = DepthHeadConfig(0.1, 100.0)
        frames = [gt_dataset[i].gt_depth for i in range(len(gt_dataset))]
        counter = {"i": 0}

        def predict(x):
            gt = torch.from_numpy(frames[counter["i"]]).float()[None, None]
            counter["i"] += 1
            return depth_to_disparity(gt, head)

        report, skipped = evaluate(predict, gt_dataset, head, cap=80.0, median_scaling=True)
        assert skipped == 0
        assert report.abs_rel < 1e-3
        assert report.delta1 > 0.999

    def test_median_scaling_off_doubles_error_of_half_scaled(self, gt_dataset):
        head = DepthHeadConfig(0.1, 100.0)
        frames = [gt_dataset[i].gt_depth for i in range(len(gt_dataset))]

        def make_predict(scale):
            counter = {"i": 0}

            def predict(x):
                gt = torch.from_numpy(frames[counter["i"]]).float()[None, None] * scale
                counter["i"] += 1
                return depth_to_disparity(gt, head)

            return predict

        on, _ = evaluate(make_predict(0.5), gt_dataset, head, median_scaling=True)
        off, _ = evaluate(make_predict(0.5), gt_dataset, head, median_scaling=False)
        assert on.abs_rel < 1e-3
        assert off.abs_rel == pytest.approx(0.5, abs=0.01)

    def test_cap_respected(self, gt_dataset):
        head = DepthHeadConfig(0.1, 100.0)

        def predict(x):
            return torch.full((1, 1, *x.shape[-2:]), 0.001)  # far beyond any cap

        report, _ = evaluate(predict, gt_dataset, head, cap=80.0, median_scaling=False)
        # clamped predictions can be at most the cap
        assert report.rmse <= 80.0

    def test_frames_without_gt_skipped(self, tmp_path, caplog):
        spec = SyntheticSceneSpec(width=64, height=32, n_frames=2, seed=8)
        scene = generate_synthetic(spec)
        root = write_synthetic_sequence(scene, tmp_path, "seq_00")
        (root.parent / "split.txt").write_text("seq_00 0 l\nseq_00 1 l\n")
        (root / "depth_l" / "000001.png").unlink()
        ds = load_split(tmp_path, tmp_path / "split.txt", load_depth=True, neighbor_offsets=())
        head = DepthHeadConfig(0.1, 100.0)
        report, skipped = evaluate(
            lambda x: torch.full((1, 1, *x.shape[-2:]), 0.5), ds, head)
        assert skipped == 1 and report.n_frames == 1
