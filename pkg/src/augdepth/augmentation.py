"""Geometric training-time augmentations with exact, invertible records.

Two augmentations operate on training-resolution images:

* zoom-crop: resize every image of a sample by a shared factor and crop
  a shared window back to the training resolution;
* split-permute: cyclically shift the target image up and left by random
  split offsets, a pure permutation of pixels with an exact inverse.

Every application is described by a spec record sufficient to invert the
operation or align predictions made on the augmented view with the
original view.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

SCALE_RANGE = (1.2, 2.0)
RATIO_RANGE = (0.1, 0.9)


@dataclass(frozen=True)
class CropSpec:
    """One zoom-crop application.

    ``scale_factor`` is the exact resize ratio, ``(x0, y0)`` the crop
    origin in the resized image, ``(width, height)`` the crop size
    (equal to the training resolution), and ``(orig_width, orig_height)``
    the pre-resize resolution.
    """

    scale_factor: float
    x0: int
    y0: int
    width: int
    height: int
    orig_width: int
    orig_height: int

    def __post_init__(self):
        f = self.scale_factor
        if not (abs(f - 1.0) < 1e-9 or SCALE_RANGE[0] - 1e-9 <= f <= SCALE_RANGE[1] + 1e-9):
            raise ValueError(
                f"scale factor {f} outside {SCALE_RANGE} (1.0 allowed as the degenerate case)"
            )
        if self.x0 < 0 or self.x0 > self.resized_width - self.width:
            raise ValueError("crop origin x0 outside the resized image")
        if self.y0 < 0 or self.y0 > self.resized_height - self.height:
            raise ValueError("crop origin y0 outside the resized image")

    @property
    def resized_width(self):
        return int(math.floor(self.orig_width * self.scale_factor + 1e-9))

    @property
    def resized_height(self):
        return int(math.floor(self.orig_height * self.scale_factor + 1e-9))


@dataclass(frozen=True)
class SplitSpec:
    """One split-permute application on an image of shape (height, width).

    The derived shifts are k_h = int(height * r_h) rows up and
    k_v = int(width * r_v) columns left.
    """

    r_h: float
    r_v: float
    height: int
    width: int

    def __post_init__(self):
        if not (0.0 <= self.r_h < 1.0 and 0.0 <= self.r_v < 1.0):
            raise ValueError("split ratios must lie in [0, 1)")
        if not (0 <= self.k_h < self.height and 0 <= self.k_v < self.width):
            raise ValueError("derived shifts outside the image")

    @property
    def k_h(self):
        return int(self.height * self.r_h)

    @property
    def k_v(self):
        return int(self.width * self.r_v)


def _achievable_heights(height, width, lo, hi):
    """Resized heights for which the width scales by the exact same ratio."""
    g = math.gcd(height, width)
    step = height // g
    h_lo = int(math.ceil(height * lo - 1e-9))
    h_hi = int(math.floor(height * hi + 1e-9))
    first = ((h_lo + step - 1) // step) * step
    return list(range(first, h_hi + 1, step))


def sample_crop_spec(height, width, rng, scale_range=SCALE_RANGE) -> CropSpec:
    """Draw a shared zoom-crop spec: scale from ``scale_range``, origin uniform
    over all valid integer positions."""
    lo, hi = scale_range
    if lo < 1.0 or hi < lo:
        raise ValueError("scale range must satisfy 1.0 <= lo <= hi")
    candidates = _achievable_heights(height, width, lo, hi)
    if candidates:
        new_h = int(candidates[rng.integers(0, len(candidates))])
        f_s = new_h / height
        new_w = width * new_h // height
    else:
        # No exactly-isotropic size in range; accept sub-pixel anisotropy.
        f_s = float(rng.uniform(lo, hi))
        new_h = int(math.floor(height * f_s + 1e-9))
        new_w = int(round(width * f_s))
        f_s = new_h / height
    x0 = int(rng.integers(0, new_w - width + 1))
    y0 = int(rng.integers(0, new_h - height + 1))
    return CropSpec(
        scale_factor=f_s,
        x0=x0,
        y0=y0,
        width=width,
        height=height,
        orig_width=width,
        orig_height=height,
    )


def centered_crop_spec(height, width, scale_factor=1.0) -> CropSpec:
    """Deterministic spec with a centered crop; ``scale_factor=1`` is the identity."""
    new_h = int(math.floor(height * scale_factor + 1e-9))
    new_w = int(math.floor(width * scale_factor + 1e-9))
    return CropSpec(
        scale_factor=scale_factor,
        x0=(new_w - width) // 2,
        y0=(new_h - height) // 2,
        width=width,
        height=height,
        orig_width=width,
        orig_height=height,
    )


def apply_crop(images, spec: CropSpec):
    """Resize-and-crop a list of aligned (B, C, H, W) tensors with one shared spec."""
    out = []
    for img in images:
        if img.dim() != 4:
            raise ValueError("images must be (B, C, H, W) tensors")
        if img.shape[-2:] != (spec.orig_height, spec.orig_width):
            raise ValueError("image resolution does not match the crop spec")
        if spec.resized_height == spec.orig_height and spec.resized_width == spec.orig_width:
            resized = img
        else:
            resized = F.interpolate(
                img,
                size=(spec.resized_height, spec.resized_width),
                mode="bilinear",
                align_corners=False,
            )
        out.append(
            resized[..., spec.y0 : spec.y0 + spec.height, spec.x0 : spec.x0 + spec.width]
        )
    return out


def resize_crop(images, rng, scale_range=SCALE_RANGE):
    """Zoom-crop augmentation: one spec sampled, applied to every image."""
    if not images:
        raise ValueError("resize_crop needs at least one image")
    h, w = images[0].shape[-2:]
    spec = sample_crop_spec(h, w, rng, scale_range)
    return apply_crop(images, spec), spec


def sample_split_spec(height, width, rng, ratio_range=RATIO_RANGE) -> SplitSpec:
    lo, hi = ratio_range
    return SplitSpec(
        r_h=float(rng.uniform(lo, hi)),
        r_v=float(rng.uniform(lo, hi)),
        height=height,
        width=width,
    )


def apply_split(image, spec: SplitSpec):
    """Cyclic shift up by k_h rows then left by k_v columns.

    This is exactly what permuting the top/bottom then left/right parts
    composes to; a pure permutation of pixels.
    """
    if image.shape[-2:] != (spec.height, spec.width):
        raise ValueError("image resolution does not match the split spec")
    return torch.roll(image, shifts=(-spec.k_h, -spec.k_v), dims=(-2, -1))


def split_permute(image, rng, ratio_range=RATIO_RANGE):
    """Split-permute augmentation of a single image (applied to targets only)."""
    h, w = image.shape[-2:]
    spec = sample_split_spec(h, w, rng, ratio_range)
    return apply_split(image, spec), spec


def restore(mapping, spec: SplitSpec):
    """Exact inverse of ``apply_split``: shift down by k_h and right by k_v."""
    if mapping.shape[-2:] != (spec.height, spec.width):
        raise ValueError("map resolution does not match the split spec")
    return torch.roll(mapping, shifts=(spec.k_h, spec.k_v), dims=(-2, -1))


def _round_half_away(x):
    return int(math.floor(x + 0.5))


def _region_bounds(origin, extent, scale, limit):
    lo = _round_half_away(origin / scale)
    hi = _round_half_away((origin + extent) / scale)
    hi = min(hi, limit)
    lo = min(lo, hi)
    if hi - lo < 2:
        hi = min(lo + 2, limit)
        lo = hi - 2
    if lo < 0:
        raise ValueError("aligned region degenerate: map smaller than 2 pixels")
    return lo, hi


def align_for_distillation(depth_full, depth_crop, spec: CropSpec):
    """Put a full-view map and a zoomed-crop map on common pixels.

    Selects the region of ``depth_full`` whose image under the resize is
    the crop window, and resizes ``depth_crop`` to that region's
    resolution. Both outputs share a shape.
    """
    if depth_full.dim() != 4 or depth_crop.dim() != 4:
        raise ValueError("depth maps must be (B, C, H, W) tensors")
    if depth_full.shape[-2:] != (spec.orig_height, spec.orig_width):
        raise ValueError("full-view map resolution does not match the crop spec")
    if depth_crop.shape[-2:] != (spec.height, spec.width):
        raise ValueError("cropped-view map resolution does not match the crop spec")
    f = spec.scale_factor
    x_lo, x_hi = _region_bounds(spec.x0, spec.width, f, spec.orig_width)
    y_lo, y_hi = _region_bounds(spec.y0, spec.height, f, spec.orig_height)
    region = depth_full[..., y_lo:y_hi, x_lo:x_hi]
    if region.shape[-2:] == depth_crop.shape[-2:]:
        resized = depth_crop
    else:
        resized = F.interpolate(
            depth_crop, size=region.shape[-2:], mode="bilinear", align_corners=False
        )
    return region, resized
