"""Training objectives: photometric error with minimum-reprojection and
auto-masking, edge-aware smoothness, scale-invariant self-distillation,
and their weighted combination.

All losses are pure tensor functions over (B, C, H, W) inputs; per-pixel
maps reduce per sample first, then over the batch.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .augmentation import CropSpec, align_for_distillation

# Stabilizing constants of the local-statistics similarity. C1 is pinned
# by the closed-form value of the constant-image error; C2 keeps the
# variance term discriminative for low-contrast content.
SSIM_C1 = 0.01
SSIM_C2 = 0.03**2

# Scale of the noise added to identity-reprojection errors so that the
# auto-mask comparison never ties exactly on static content.
AUTOMASK_NOISE = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective."""

    alpha: float = 0.85          # SSIM share of the photometric error
    smoothness: float = 0.001
    distillation: float = 0.07
    si_beta: float = 0.5         # variance weight of the scale-invariant error

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.si_beta <= 1.0:
            raise ValueError("si_beta must lie in [0, 1]")
        if self.smoothness < 0 or self.distillation < 0:
            raise ValueError("smoothness and distillation weights must be >= 0")


@dataclass
class LossBreakdown:
    """All scalar components of one objective evaluation plus diagnostics."""

    pe: torch.Tensor
    pe_rc: torch.Tensor
    pe_sp: torch.Tensor
    sm: torch.Tensor
    sm_rc: torch.Tensor
    sm_sp: torch.Tensor
    sd_rc: torch.Tensor
    sd_sp: torch.Tensor
    total: torch.Tensor
    mu: torch.Tensor = None  # binary auto-mask of the original branch

    def scalars(self):
        out = {}
        for name in ("pe", "pe_rc", "pe_sp", "sm", "sm_rc", "sm_sp", "sd_rc", "sd_sp", "total"):
            out[name] = float(getattr(self, name).detach())
        return out


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a, b):
    """Local-statistics structural similarity over 3x3 windows.

    Reflection padding, biased local moments, channel-averaged; output is
    a per-pixel map in [-1, 1].
    """
    _check_same_shape(a, b)
    pa = F.pad(a, (1, 1, 1, 1), mode="reflect")
    pb = F.pad(b, (1, 1, 1, 1), mode="reflect")
    # one pooling pass over the five local moments
    pooled = F.avg_pool2d(torch.cat([pa, pb, pa * pa, pb * pb, pa * pb], dim=0), 3, 1)
    mu_a, mu_b, sq_a, sq_b, prod = pooled.chunk(5, dim=0)
    var_a = sq_a - mu_a * mu_a
    var_b = sq_b - mu_b * mu_b
    cov = prod - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(1, keepdim=True)


def photometric_error(a, b, alpha=0.85):
    """Per-pixel dissimilarity: alpha-weighted SSIM distance plus L1."""
    _check_same_shape(a, b)
    dssim = ((1.0 - ssim(a, b)) / 2.0).clamp(0.0, 1.0)
    l1 = (a - b).abs().mean(1, keepdim=True)
    return alpha * dssim + (1.0 - alpha) * l1


def _masked_minimum(errors, masks):
    """Per-pixel minimum over the view dimension, excluding invalid views."""
    if masks is not None:
        valid = torch.stack(list(masks))
        errors = torch.where(valid, errors, torch.full_like(errors, torch.inf))
        any_valid = valid.any(0)
    else:
        any_valid = torch.ones_like(errors[0], dtype=torch.bool)
    loss_map = errors.min(0).values
    loss_map = torch.where(any_valid, loss_map, torch.zeros_like(loss_map))
    return loss_map, any_valid


def photometric_error_stack(target, views, alpha=0.85):
    """Photometric error of several views against one target in a single
    evaluation; returns a (V, B, 1, H, W) stack."""
    v = len(views)
    big = photometric_error(target.repeat(v, 1, 1, 1), torch.cat(list(views), dim=0), alpha)
    return big.reshape(v, -1, *big.shape[1:])


def min_reprojection(target, synthesized, masks=None, alpha=0.85):
    """Pixel-wise minimum photometric error across synthesized source views.

    Views invalid at a pixel are excluded from that pixel's minimum; the
    returned validity mask is False where no view was valid (such pixels
    carry a zero in the loss map and must not enter any mean).
    """
    if not synthesized:
        raise ValueError("min_reprojection needs at least one synthesized view")
    errors = photometric_error_stack(target, synthesized, alpha)
    return _masked_minimum(errors, masks)


def identity_reprojection(target, sources, alpha=0.85, rng=None):
    """Minimum photometric error against the unwarped sources.

    ``rng`` adds tiny noise so that downstream comparisons never tie
    exactly on static content.
    """
    ident = photometric_error_stack(target, sources, alpha).min(0).values
    if rng is not None:
        noise = rng.normal(0.0, 1.0, size=tuple(ident.shape)) * AUTOMASK_NOISE
        ident = ident + torch.from_numpy(noise).to(dtype=ident.dtype, device=ident.device)
    return ident


def auto_mask(target, sources, synthesized, masks=None, alpha=0.85, rng=None):
    """Binary mask that is True where warping beats not warping.

    Compares the minimum reprojection error of the synthesized views with
    the minimum identity error against the unwarped sources; pixels whose
    unwarped source already matches the target (static scenes, objects
    moving with the camera) come out False. ``rng`` adds tiny tie-breaking
    noise to the identity errors.
    """
    synth_map, any_valid = min_reprojection(target, synthesized, masks, alpha)
    ident = identity_reprojection(target, sources, alpha, rng)
    return (synth_map < ident).detach() & any_valid


def masked_mean(values, mask):
    """Mean of ``values`` over True mask entries, per sample then over the batch.

    Samples with an empty mask contribute zero.
    """
    m = mask.to(values.dtype)
    num = (values * m).sum(dim=(1, 2, 3))
    den = m.sum(dim=(1, 2, 3))
    return (num / den.clamp(min=1.0)).mean()


def smoothness(disp, image):
    """Edge-aware first-order penalty on mean-normalized disparity."""
    if disp.shape[-2:] != image.shape[-2:] or disp.shape[0] != image.shape[0]:
        raise ValueError("disparity and image resolutions differ")
    if (disp <= 0).any():
        raise ValueError("disparity must be strictly positive")
    norm = disp / disp.mean(dim=(2, 3), keepdim=True)
    grad_x = (norm[..., :, 1:] - norm[..., :, :-1]).abs()
    grad_y = (norm[..., 1:, :] - norm[..., :-1, :]).abs()
    img_x = (image[..., :, 1:] - image[..., :, :-1]).abs().mean(1, keepdim=True)
    img_y = (image[..., 1:, :] - image[..., :-1, :]).abs().mean(1, keepdim=True)
    per_sample = (grad_x * torch.exp(-img_x)).mean(dim=(1, 2, 3)) + (
        grad_y * torch.exp(-img_y)
    ).mean(dim=(1, 2, 3))
    return per_sample.mean()


def scale_invariant(pred, label, beta=0.5, stop_label_grad=True):
    """Scale-invariant log-depth error.

    mean(e^2) - beta * mean(e)^2 with e the per-pixel log ratio; zero for
    predictions equal to the label up to nothing, and 0.5*ln(c)^2 for a
    uniform ratio c at beta=0.5. The label acts as a frozen pseudo label
    unless ``stop_label_grad`` is disabled.
    """
    _check_same_shape(pred, label)
    for name, t in (("pred", pred), ("label", label)):
        if not torch.isfinite(t).all() or (t <= 0).any():
            raise ValueError(f"{name} must be strictly positive and finite")
    if stop_label_grad:
        label = label.detach()
    e = pred.log() - label.log()
    per_sample = (e * e).mean(dim=(1, 2, 3)) - beta * e.mean(dim=(1, 2, 3)) ** 2
    return per_sample.mean()


def self_distill_rc(depth_full, depth_crop, spec: CropSpec, beta=0.5, distill_to_augmented=False):
    """Distillation between the full view and a zoomed-crop view.

    The crop's depth is scaled back by the zoom factor (a view magnified
    by f_s sees the scene f_s times closer), aligned to the matching
    region of the full view, and compared with the scale-invariant error.
    By default the augmented-view depth is the frozen pseudo label.
    """
    region, crop_resized = align_for_distillation(depth_full, depth_crop, spec)
    scaled = spec.scale_factor * crop_resized
    if distill_to_augmented:
        return scale_invariant(scaled, region, beta)
    return scale_invariant(region, scaled, beta)


def self_distill_sp(depth_full, depth_restored, beta=0.5, distill_to_augmented=False):
    """Distillation between the full view and a restored split-permute view."""
    if distill_to_augmented:
        return scale_invariant(depth_restored, depth_full, beta)
    return scale_invariant(depth_full, depth_restored, beta)


def total_loss(pe, pe_rc, pe_sp, sm, sm_rc, sm_sp, sd_rc, sd_sp,
               weights: LossWeights = LossWeights(), mu=None) -> LossBreakdown:
    """Combine all branch losses into the training objective.

    Each branch contributes its masked photometric mean plus weighted
    smoothness; the three branches average, and the two distillation
    terms add with the distillation weight.
    """
    components = {
        "pe": pe, "pe_rc": pe_rc, "pe_sp": pe_sp,
        "sm": sm, "sm_rc": sm_rc, "sm_sp": sm_sp,
        "sd_rc": sd_rc, "sd_sp": sd_sp,
    }
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise ValueError(f"non-finite loss component: {name}")
    ss = pe + weights.smoothness * sm
    ss_rc = pe_rc + weights.smoothness * sm_rc
    ss_sp = pe_sp + weights.smoothness * sm_sp
    total = (ss + ss_rc + ss_sp) / 3.0 + weights.distillation * (sd_rc + sd_sp)
    if not torch.isfinite(total).all():
        raise ValueError("non-finite loss component: total")
    return LossBreakdown(
        pe=pe, pe_rc=pe_rc, pe_sp=pe_sp,
        sm=sm, sm_rc=sm_rc, sm_sp=sm_sp,
        sd_rc=sd_rc, sd_sp=sd_sp,
        total=total, mu=mu,
    )
