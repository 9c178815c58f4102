"""Zoom-crop, split-permute, restore, and distillation alignment."""

import numpy as np
import pytest
import torch

from augdepth.augmentation import (
    CropSpec,
    SplitSpec,
    align_for_distillation,
    apply_crop,
    apply_split,
    centered_crop_spec,
    resize_crop,
    restore,
    sample_crop_spec,
    sample_split_spec,
    split_permute,
)

import reference as ref


class TestResizeCrop:
    def test_degenerate_spec_is_identity(self, rng):
        img = torch.tensor(rng.uniform(0, 1, (1, 3, 8, 12)))
        spec = centered_crop_spec(8, 12, 1.0)
        out = apply_crop([img], spec)[0]
        assert torch.equal(out, img)

    def test_double_zoom_origin_zero_matches_scalar_resize(self, rng):
        img = torch.tensor(rng.uniform(0, 1, (1, 1, 4, 4)))
        spec = CropSpec(scale_factor=2.0, x0=0, y0=0, width=4, height=4,
                        orig_width=4, orig_height=4)
        out = apply_crop([img], spec)[0]
        expect = ref.resize_bilinear_scalar(img[0].numpy(), 8, 8)[:, :4, :4]
        assert np.allclose(out[0].numpy(), expect, atol=1e-6)

    def test_fixed_seed_reproduces_spec(self):
        a = sample_crop_spec(64, 192, np.random.default_rng(7))
        b = sample_crop_spec(64, 192, np.random.default_rng(7))
        assert a == b

    def test_shared_spec_across_images(self, rng):
        # augment an index-encoding image alongside and check the same pixels move
        img = torch.tensor(rng.uniform(0, 1, (1, 3, 32, 96)))
        idx = torch.arange(32 * 96, dtype=torch.float64).reshape(1, 1, 32, 96)
        (out_a, out_b), spec = resize_crop([img, idx], rng)
        again = apply_crop([img, idx], spec)
        assert torch.equal(out_a, again[0]) and torch.equal(out_b, again[1])

    def test_sampled_specs_hit_exact_ratios(self, rng):
        for _ in range(50):
            spec = sample_crop_spec(64, 192, rng)
            assert 1.2 - 1e-9 <= spec.scale_factor <= 2.0 + 1e-9
            assert spec.resized_width * 64 == spec.resized_height * 192
            assert 0 <= spec.x0 <= spec.resized_width - 192
            assert 0 <= spec.y0 <= spec.resized_height - 64

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CropSpec(scale_factor=3.0, x0=0, y0=0, width=4, height=4,
                     orig_width=4, orig_height=4)
        with pytest.raises(ValueError):
            CropSpec(scale_factor=1.5, x0=3, y0=0, width=4, height=4,
                     orig_width=4, orig_height=4)


class TestSplitPermute:
    def test_four_assignment_oracle_on_index_grid(self):
        grid = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
        spec = SplitSpec(r_h=0.25, r_v=0.5, height=4, width=4)
        assert spec.k_h == 1 and spec.k_v == 2
        out = apply_split(grid, spec)
        expect = ref.split_permute_scalar(grid[0].numpy(), 1, 2)
        assert np.array_equal(out[0].numpy(), expect)
        # rows cycle to (1, 2, 3, 0), columns to (2, 3, 0, 1)
        assert out[0, 0, 0, 0] == grid[0, 0, 1, 2]

    def test_zero_shift_is_identity(self, rng):
        img = torch.tensor(rng.uniform(0, 1, (1, 3, 4, 4)))
        spec = SplitSpec(r_h=0.1, r_v=0.1, height=4, width=4)  # int(0.4) == 0
        assert spec.k_h == 0 and spec.k_v == 0
        assert torch.equal(apply_split(img, spec), img)

    def test_multiset_preserved(self, rng):
        img = torch.tensor(rng.uniform(0, 1, (1, 3, 9, 13)))
        out, _ = split_permute(img, rng)
        assert torch.equal(out.flatten().sort().values, img.flatten().sort().values)

    def test_restore_inverts_exactly(self, rng):
        for _ in range(50):
            h = int(rng.integers(2, 24))
            w = int(rng.integers(2, 24))
            img = torch.tensor(rng.uniform(0, 1, (1, 3, h, w)))
            out, spec = split_permute(img, rng)
            assert torch.equal(restore(out, spec), img)

    def test_restore_twice_not_identity_unless_period_divides(self):
        grid = torch.arange(16, dtype=torch.float64).reshape(1, 1, 4, 4)
        spec = SplitSpec(r_h=0.25, r_v=0.25, height=4, width=4)  # k_h = k_v = 1
        once = restore(apply_split(grid, spec), spec)
        assert torch.equal(once, grid)
        twice = restore(restore(apply_split(grid, spec), spec), spec)
        assert not torch.equal(twice, grid)
        # 2k = 2 is not congruent to 0 mod 4; with k = 2 it would be
        spec2 = SplitSpec(r_h=0.5, r_v=0.5, height=4, width=4)
        double = restore(restore(apply_split(grid, spec2), spec2), spec2)
        assert torch.equal(double, apply_split(grid, spec2))

    def test_restore_shape_mismatch_rejected(self):
        spec = SplitSpec(r_h=0.25, r_v=0.25, height=4, width=4)
        with pytest.raises(ValueError):
            restore(torch.zeros(1, 1, 5, 4), spec)

    def test_sampler_ratios_in_range(self, rng):
        for _ in range(20):
            spec = sample_split_spec(17, 31, rng)
            assert 0.1 <= spec.r_h <= 0.9 and 0.1 <= spec.r_v <= 0.9


class TestAlignForDistillation:
    def test_degenerate_returns_inputs(self, rng):
        d = torch.tensor(rng.uniform(1, 5, (1, 1, 8, 8)))
        spec = centered_crop_spec(8, 8, 1.0)
        a, b = align_for_distillation(d, d, spec)
        assert torch.equal(a, d) and torch.equal(b, d)

    def test_double_zoom_origin_zero_selects_top_left_block(self, rng):
        d_full = torch.tensor(rng.uniform(1, 5, (1, 1, 8, 8)))
        d_crop = torch.tensor(rng.uniform(1, 5, (1, 1, 8, 8)))
        spec = CropSpec(scale_factor=2.0, x0=0, y0=0, width=8, height=8,
                        orig_width=8, orig_height=8)
        a, b = align_for_distillation(d_full, d_crop, spec)
        assert torch.equal(a, d_full[..., :4, :4])
        assert a.shape == b.shape

    def test_fractional_bounds_match_index_arithmetic(self, rng):
        d_full = torch.tensor(rng.uniform(1, 5, (1, 1, 12, 12)))
        d_crop = torch.tensor(rng.uniform(1, 5, (1, 1, 12, 12)))
        spec = CropSpec(scale_factor=1.5, x0=1, y0=1, width=12, height=12,
                        orig_width=12, orig_height=12)
        a, b = align_for_distillation(d_full, d_crop, spec)
        import math
        lo = math.floor(1 / 1.5 + 0.5)
        hi = math.floor((1 + 12) / 1.5 + 0.5)
        assert a.shape[-1] == hi - lo
        assert torch.equal(a, d_full[..., lo:hi, lo:hi])

    def test_outputs_same_shape_and_positive(self, rng):
        d_full = torch.tensor(rng.uniform(0.5, 9, (2, 1, 16, 24)))
        d_crop = torch.tensor(rng.uniform(0.5, 9, (2, 1, 16, 24)))
        spec = sample_crop_spec(16, 24, rng)
        a, b = align_for_distillation(d_full, d_crop, spec)
        assert a.shape == b.shape
        assert (a > 0).all() and (b > 0).all()

    def test_degenerate_region_rejected(self):
        d_full = torch.rand(1, 1, 1, 8) + 1
        d_crop = torch.rand(1, 1, 1, 8) + 1
        spec = CropSpec(scale_factor=2.0, x0=0, y0=0, width=8, height=1,
                        orig_width=8, orig_height=1)
        with pytest.raises(ValueError):
            align_for_distillation(d_full, d_crop, spec)
