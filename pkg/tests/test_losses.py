"""Loss functions: closed forms, scalar oracles, invariants, gradients."""

import math

import numpy as np
import pytest
import torch

from augdepth.augmentation import CropSpec, apply_crop, centered_crop_spec
from augdepth.losses import (
    LossBreakdown,
    LossWeights,
    auto_mask,
    masked_mean,
    min_reprojection,
    photometric_error,
    scale_invariant,
    self_distill_rc,
    self_distill_sp,
    smoothness,
    ssim,
    total_loss,
)

import reference as ref

CONST_PE = 0.5707920792079209  # 0.85 * (1 - 0.01/1.01) / 2 + 0.15


def rand_img(rng, shape=(1, 3, 6, 6)):
    return torch.tensor(rng.uniform(0.05, 0.95, shape))


class TestSSIM:
    def test_self_similarity_is_one(self, rng):
        img = rand_img(rng)
        assert torch.allclose(ssim(img, img), torch.ones(1, 1, 6, 6, dtype=torch.float64))

    def test_constant_images_closed_form(self):
        a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        b = torch.ones(1, 3, 8, 8, dtype=torch.float64)
        expect = 0.01 / 1.01
        assert torch.allclose(ssim(a, b), torch.full((1, 1, 8, 8), expect, dtype=torch.float64),
                              atol=1e-12)

    def test_symmetry(self, rng):
        a, b = rand_img(rng), rand_img(rng)
        assert torch.allclose(ssim(a, b), ssim(b, a), atol=1e-12)

    def test_range(self, rng):
        a, b = rand_img(rng, (2, 3, 12, 12)), rand_img(rng, (2, 3, 12, 12))
        s = ssim(a, b)
        assert s.min() >= -1.0 - 1e-9 and s.max() <= 1.0 + 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ssim(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 5, 4))


class TestPhotometricError:
    def test_zero_on_identical(self, rng):
        img = rand_img(rng)
        assert torch.allclose(photometric_error(img, img),
                              torch.zeros(1, 1, 6, 6, dtype=torch.float64), atol=1e-12)

    def test_constant_image_closed_form(self):
        a = torch.zeros(1, 3, 8, 8, dtype=torch.float64)
        b = torch.ones(1, 3, 8, 8, dtype=torch.float64)
        pe = photometric_error(a, b)
        assert torch.allclose(pe, torch.full((1, 1, 8, 8), CONST_PE, dtype=torch.float64),
                              atol=1e-10)

    def test_symmetry(self, rng):
        a, b = rand_img(rng), rand_img(rng)
        assert torch.allclose(photometric_error(a, b), photometric_error(b, a), atol=1e-12)

    def test_nonnegative(self, rng):
        a, b = rand_img(rng, (2, 3, 9, 9)), rand_img(rng, (2, 3, 9, 9))
        assert (photometric_error(a, b) >= 0).all()


class TestMinReprojection:
    def test_single_view_equals_pe(self, rng):
        t, s = rand_img(rng), rand_img(rng)
        loss, valid = min_reprojection(t, [s])
        assert torch.allclose(loss, photometric_error(t, s), atol=1e-12)
        assert valid.all()

    def test_perfect_view_dominates(self, rng):
        t = rand_img(rng)
        other = rand_img(rng)
        loss, _ = min_reprojection(t, [other, t.clone()])
        assert torch.allclose(loss, torch.zeros_like(loss), atol=1e-12)

    def test_matches_scalar_min_of_pe_maps(self, rng):
        t = rand_img(rng, (1, 3, 4, 4))
        views = [rand_img(rng, (1, 3, 4, 4)) for _ in range(3)]
        loss, _ = min_reprojection(t, views)
        pes = np.stack([photometric_error(t, v).numpy() for v in views])
        assert np.allclose(loss.numpy(), pes.min(axis=0), atol=1e-12)

    def test_invariant_to_view_permutation(self, rng):
        t = rand_img(rng)
        views = [rand_img(rng) for _ in range(3)]
        masks = [torch.rand(1, 1, 6, 6) > 0.2 for _ in range(3)]
        a, va = min_reprojection(t, views, masks)
        b, vb = min_reprojection(t, views[::-1], masks[::-1])
        assert torch.allclose(a, b, atol=1e-12) and torch.equal(va, vb)

    def test_invalid_views_excluded(self, rng):
        t = rand_img(rng)
        good, bad = rand_img(rng), t.clone()  # the "perfect" view is masked out
        masks = [torch.ones(1, 1, 6, 6, dtype=torch.bool),
                 torch.zeros(1, 1, 6, 6, dtype=torch.bool)]
        loss, valid = min_reprojection(t, [good, bad], masks)
        assert torch.allclose(loss, photometric_error(t, good), atol=1e-12)
        assert valid.all()

    def test_empty_rejected(self, rng):
        with pytest.raises(ValueError):
            min_reprojection(rand_img(rng), [])


class TestAutoMask:
    def test_static_sources_mask_everything(self, rng):
        t = rand_img(rng)
        synth = [rand_img(rng)]
        mu = auto_mask(t, [t.clone()], synth)
        assert not mu.any()

    def test_perfect_synthesis_keeps_everything(self, rng):
        t = rand_img(rng)
        mu = auto_mask(t, [rand_img(rng)], [t.clone()])
        assert mu.all()

    def test_matches_scalar_comparison(self, rng):
        t = rand_img(rng, (1, 3, 4, 4))
        sources = [rand_img(rng, (1, 3, 4, 4)) for _ in range(2)]
        synth = [rand_img(rng, (1, 3, 4, 4)) for _ in range(2)]
        mu = auto_mask(t, sources, synth)
        synth_min = np.minimum(*[photometric_error(t, s).numpy() for s in synth])
        ident_min = np.minimum(*[photometric_error(t, s).numpy() for s in sources])
        assert np.array_equal(mu.numpy(), synth_min < ident_min)

    def test_noise_breaks_static_ties(self, rng):
        t = rand_img(rng)
        mu = auto_mask(t, [t.clone()], [t.clone()], rng=rng)
        # identical errors everywhere; the noise decides, never all-on
        assert not mu.all()


class TestSmoothness:
    def test_constant_disparity_is_zero(self, rng):
        disp = torch.full((1, 1, 6, 6), 0.3, dtype=torch.float64)
        img = rand_img(rng)
        assert smoothness(disp, img).item() == pytest.approx(0.0, abs=1e-12)

    def test_invariant_to_disparity_scale(self, rng):
        disp = torch.tensor(rng.uniform(0.1, 0.9, (1, 1, 6, 6)))
        img = rand_img(rng)
        a = smoothness(disp, img).item()
        b = smoothness(3.7 * disp, img).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_ramp_hand_value(self):
        # 3x3 ramp disparity on a constant image: all edge weights are 1
        disp = torch.tensor([[1.0, 2.0, 3.0]] * 3, dtype=torch.float64).reshape(1, 1, 3, 3)
        img = torch.full((1, 3, 3, 3), 0.5, dtype=torch.float64)
        # normalized disparity steps are 1/2 horizontally, 0 vertically
        assert smoothness(disp, img).item() == pytest.approx(0.5, abs=1e-12)

    def test_matches_scalar_oracle(self, rng):
        disp = torch.tensor(rng.uniform(0.2, 0.8, (1, 1, 5, 7)))
        img = rand_img(rng, (1, 3, 5, 7))
        expect = ref.smoothness_scalar(disp[0, 0].numpy(), img[0].numpy())
        assert smoothness(disp, img).item() == pytest.approx(expect, rel=1e-12)

    def test_rejects_nonpositive(self, rng):
        with pytest.raises(ValueError):
            smoothness(torch.zeros(1, 1, 4, 4), rand_img(rng, (1, 3, 4, 4)))


class TestScaleInvariant:
    def test_zero_on_equal(self, rng):
        d = torch.tensor(rng.uniform(1, 9, (1, 1, 5, 5)))
        assert scale_invariant(d, d.clone()).item() == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("c", [math.e, 2.0, 10.0])
    def test_uniform_ratio_closed_form(self, rng, c):
        d = torch.tensor(rng.uniform(1, 9, (1, 1, 5, 5)))
        val = scale_invariant(c * d, d.clone()).item()
        assert val == pytest.approx(0.5 * math.log(c) ** 2, abs=1e-8)

    def test_matches_scalar_oracle(self, rng):
        p = torch.tensor(rng.uniform(0.5, 9, (1, 1, 3, 3)))
        l = torch.tensor(rng.uniform(0.5, 9, (1, 1, 3, 3)))
        expect = ref.scale_invariant_scalar(p.numpy(), l.numpy())
        assert scale_invariant(p, l).item() == pytest.approx(expect, rel=1e-12)

    def test_no_gradient_reaches_label(self, rng):
        p = torch.tensor(rng.uniform(0.5, 9, (1, 1, 4, 4)), requires_grad=True)
        l = torch.tensor(rng.uniform(0.5, 9, (1, 1, 4, 4)), requires_grad=True)
        scale_invariant(p, l).backward()
        assert l.grad is None or torch.equal(l.grad, torch.zeros_like(l))
        assert p.grad is not None and p.grad.abs().sum() > 0

    def test_nonnegative(self, rng):
        for _ in range(20):
            p = torch.tensor(rng.uniform(0.5, 9, (1, 1, 4, 4)))
            l = torch.tensor(rng.uniform(0.5, 9, (1, 1, 4, 4)))
            assert scale_invariant(p, l).item() >= 0

    def test_rejects_nonpositive(self, rng):
        d = torch.tensor(rng.uniform(1, 9, (1, 1, 3, 3)))
        with pytest.raises(ValueError):
            scale_invariant(torch.zeros_like(d), d)


class TestSelfDistill:
    def test_rc_fixed_point_integer_aligned(self, rng):
        # exactly representable content: resampling is exact, loss vanishes
        d_const = torch.full((1, 1, 8, 8), 5.0, dtype=torch.float64)
        spec = CropSpec(scale_factor=2.0, x0=0, y0=0, width=8, height=8,
                        orig_width=8, orig_height=8)
        d_crop = apply_crop([d_const], spec)[0] / spec.scale_factor
        assert self_distill_rc(d_const, d_crop, spec).item() < 1e-6
        # smooth content: only the resampling low-pass remains
        u = torch.linspace(0, 2, 8, dtype=torch.float64)
        d_smooth = (5.0 + torch.sin(u)[None, :] + 0.5 * torch.cos(u)[:, None]).reshape(1, 1, 8, 8)
        d_crop = apply_crop([d_smooth], spec)[0] / spec.scale_factor
        assert self_distill_rc(d_smooth, d_crop, spec).item() < 1e-3

    def test_rc_degenerate_zero(self, rng):
        d = torch.tensor(rng.uniform(2, 8, (1, 1, 8, 8)))
        spec = centered_crop_spec(8, 8, 1.0)
        assert self_distill_rc(d, d.clone(), spec).item() == pytest.approx(0.0, abs=1e-12)

    def test_rc_matches_hand_aligned_blocks(self, rng):
        d_full = torch.tensor(rng.uniform(2, 8, (1, 1, 8, 8)))
        d_crop = torch.tensor(rng.uniform(2, 8, (1, 1, 8, 8)))
        spec = CropSpec(scale_factor=2.0, x0=0, y0=0, width=8, height=8,
                        orig_width=8, orig_height=8)
        got = self_distill_rc(d_full, d_crop, spec).item()
        region = d_full[..., :4, :4]
        resized = torch.nn.functional.interpolate(d_crop, size=(4, 4), mode="bilinear",
                                                  align_corners=False)
        expect = ref.scale_invariant_scalar(region.numpy(), 2.0 * resized.numpy())
        assert got == pytest.approx(expect, rel=1e-10)

    def test_sp_trivials_and_oracle(self, rng):
        d = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)))
        assert self_distill_sp(d, d.clone()).item() == pytest.approx(0.0, abs=1e-12)
        c = 3.0
        assert self_distill_sp(c * d, d.clone()).item() == pytest.approx(
            0.5 * math.log(c) ** 2, abs=1e-8)
        other = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)))
        assert self_distill_sp(d, other).item() == pytest.approx(
            ref.scale_invariant_scalar(d.numpy(), other.numpy()), rel=1e-10)

    def test_gradient_direction_flag(self, rng):
        d_full = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)), requires_grad=True)
        d_sp = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)), requires_grad=True)
        self_distill_sp(d_full, d_sp).backward()
        assert d_full.grad.abs().sum() > 0
        assert d_sp.grad is None or torch.equal(d_sp.grad, torch.zeros_like(d_sp))
        d_full2 = d_full.detach().clone().requires_grad_(True)
        d_sp2 = d_sp.detach().clone().requires_grad_(True)
        self_distill_sp(d_full2, d_sp2, distill_to_augmented=True).backward()
        assert d_sp2.grad.abs().sum() > 0
        assert d_full2.grad is None or torch.equal(d_full2.grad, torch.zeros_like(d_full2))


class TestTotalLoss:
    def test_zero_components_give_zero(self):
        z = torch.zeros((), dtype=torch.float64)
        bd = total_loss(z, z, z, z, z, z, z, z)
        assert bd.total.item() == 0.0

    def test_arithmetic_example(self):
        t = lambda v: torch.tensor(v, dtype=torch.float64)
        bd = total_loss(t(0.3), t(0.3), t(0.3), t(0.0), t(0.0), t(0.0), t(0.1), t(0.1))
        assert bd.total.item() == pytest.approx(0.314, abs=1e-12)

    def test_matches_independent_recomputation(self, rng):
        vals = rng.uniform(0.01, 1.0, 8)
        ts = [torch.tensor(v, dtype=torch.float64) for v in vals]
        weights = LossWeights()
        bd = total_loss(*ts, weights=weights)
        expect = ref.combined_loss_scalar(*vals, gamma=weights.smoothness,
                                          lam=weights.distillation)
        assert bd.total.item() == pytest.approx(expect, abs=1e-10)

    def test_nonfinite_component_named(self):
        z = torch.zeros((), dtype=torch.float64)
        bad = torch.tensor(float("nan"), dtype=torch.float64)
        with pytest.raises(ValueError, match="sd_rc"):
            total_loss(z, z, z, z, z, z, bad, z)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=1.5)
        with pytest.raises(ValueError):
            LossWeights(smoothness=-0.1)


class TestMaskedMean:
    def test_mean_over_selected(self):
        x = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        m = torch.tensor([[True, False], [True, False]]).reshape(1, 1, 2, 2)
        assert masked_mean(x, m).item() == pytest.approx(2.0)

    def test_empty_mask_contributes_zero(self):
        x = torch.rand(2, 1, 2, 2)
        m = torch.zeros(2, 1, 2, 2, dtype=torch.bool)
        m[0] = True
        assert masked_mean(x, m).item() == pytest.approx(x[0].mean().item() / 2)


class TestLossGradients:
    """Analytic gradients against central finite differences (float64)."""

    def check(self, f, params, eps=1e-6):
        tensors = [p.detach().clone().requires_grad_(True) for p in params]
        out = f(*tensors)
        grads = torch.autograd.grad(out, tensors)
        for i, (p, g) in enumerate(zip(tensors, grads)):

            def scalar_f(arr):
                probe = [q.detach().clone() for q in tensors]
                probe[i] = torch.tensor(arr)
                return float(f(*probe))

            numeric = ref.central_difference_grad(scalar_f, p.detach().numpy(), eps)
            assert ref.grad_matches(g.numpy(), numeric), f"gradient mismatch on arg {i}"

    def test_photometric_error(self, rng):
        a, b = rand_img(rng), rand_img(rng)
        self.check(lambda x, y: photometric_error(x, y).mean(), [a, b])

    def test_min_reprojection(self, rng):
        t = rand_img(rng)
        views = [rand_img(rng) for _ in range(2)]
        self.check(lambda *vs: min_reprojection(t, list(vs))[0].mean(), views)

    def test_smoothness(self, rng):
        disp = torch.tensor(rng.uniform(0.2, 0.8, (1, 1, 6, 6)))
        img = rand_img(rng)
        self.check(lambda d: smoothness(d, img), [disp])

    def test_scale_invariant(self, rng):
        p = torch.tensor(rng.uniform(0.5, 9, (1, 1, 6, 6)))
        label = torch.tensor(rng.uniform(0.5, 9, (1, 1, 6, 6)))
        self.check(lambda x: scale_invariant(x, label), [p])

    def test_self_distill_rc(self, rng):
        d_full = torch.tensor(rng.uniform(2, 8, (1, 1, 8, 8)))
        d_crop = torch.tensor(rng.uniform(2, 8, (1, 1, 8, 8)))
        spec = CropSpec(scale_factor=1.5, x0=2, y0=1, width=8, height=8,
                        orig_width=8, orig_height=8)
        self.check(lambda x: self_distill_rc(x, d_crop, spec), [d_full])

    def test_self_distill_sp(self, rng):
        d = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)))
        d_sp = torch.tensor(rng.uniform(2, 8, (1, 1, 6, 6)))
        self.check(lambda x: self_distill_sp(x, d_sp), [d])
