"""Depth metrics with median scaling and depth capping; dataset-generic."""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

CAP_MIN = 1e-3

# Fractional (top, bottom, left, right) bounds of the evaluation crop used
# with KITTI raw ground truth.
GARG_CROP = (0.40810811, 0.99189189, 0.03594771, 0.96405229)

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    n_frames: int = 1
    n_valid_pixels: int = 0

    def as_dict(self):
        out = {name: float(getattr(self, name)) for name in METRIC_NAMES}
        out["n_frames"] = int(self.n_frames)
        out["n_valid_pixels"] = int(self.n_valid_pixels)
        return out

    def to_kv(self):
        """Machine-readable key=value lines."""
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items()) + "\n"

    def to_table(self):
        header = " | ".join(f"{name:>9}" for name in METRIC_NAMES)
        values = " | ".join(f"{float(getattr(self, name)):9.4f}" for name in METRIC_NAMES)
        footer = f"frames: {self.n_frames}   valid pixels: {self.n_valid_pixels}"
        return "\n".join([header, values, footer])


def compute_metrics(pred, gt, valid=None, cap=80.0) -> MetricsReport:
    """Standard error and accuracy metrics over the valid pixels of one frame.

    Predictions are clamped to [CAP_MIN, cap] before any mean; ground
    truth entries that are non-positive are excluded.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    mask = gt > 0
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("frame has no valid ground-truth pixels")
    p = np.clip(pred[mask], CAP_MIN, cap)
    g = gt[mask]
    thresh = np.maximum(g / p, p / g)
    diff = p - g
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(g)))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25**2)),
        delta3=float(np.mean(thresh < 1.25**3)),
        n_frames=1,
        n_valid_pixels=int(mask.sum()),
    )


def median_scale(pred, gt, valid=None):
    """Rescale predictions so their median matches the ground truth median."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = gt > 0
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    med_pred = np.median(pred[mask])
    med_gt = np.median(gt[mask])
    if med_pred <= 0 or med_gt <= 0:
        raise ValueError("median scaling undefined for non-positive medians")
    return pred * (med_gt / med_pred)


def garg_crop_mask(height, width):
    mask = np.zeros((height, width), dtype=bool)
    t, b, l, r = GARG_CROP
    mask[int(t * height) : int(b * height), int(l * width) : int(r * width)] = True
    return mask


def average_reports(reports):
    """Arithmetic per-frame average of single-frame reports."""
    if not reports:
        raise ValueError("no frames were evaluated")
    values = {name: float(np.mean([getattr(r, name) for r in reports])) for name in METRIC_NAMES}
    return MetricsReport(
        **values,
        n_frames=len(reports),
        n_valid_pixels=int(sum(r.n_valid_pixels for r in reports)),
    )


def predict_depth_at(predict_disparity, image, gt_shape, head_cfg, model_resolution=None):
    """Predict depth for one image and resample it to the ground-truth grid.

    The network runs at ``model_resolution``; the scaled disparity
    (inverse depth) is resized bilinearly to the ground-truth resolution
    and inverted back to depth.
    """
    from .networks import disparity_to_depth

    x = image[None] if image.dim() == 3 else image
    if model_resolution is not None and x.shape[-2:] != tuple(model_resolution):
        x = F.interpolate(x, size=tuple(model_resolution), mode="bilinear",
                          align_corners=False, antialias=True)
    with torch.no_grad():
        disp = predict_disparity(x)
    depth = disparity_to_depth(disp, head_cfg)
    scaled_disp = 1.0 / depth
    if scaled_disp.shape[-2:] != tuple(gt_shape):
        scaled_disp = F.interpolate(scaled_disp, size=tuple(gt_shape), mode="bilinear",
                                    align_corners=False)
    return (1.0 / scaled_disp)[0, 0].cpu().numpy()


def evaluate(predict_disparity, dataset, head_cfg, cap=80.0, median_scaling=True,
             crop="none", model_resolution=None):
    """Per-frame metrics averaged over a dataset with ground-truth depth.

    Frames that fail (no valid pixels, degenerate medians) are skipped
    with a logged warning; returns (report, n_skipped).
    """
    if crop not in ("none", "garg"):
        raise ValueError("crop must be 'none' or 'garg'")
    reports = []
    skipped = 0
    for i in range(len(dataset)):
        sample = dataset[i]
        if sample.gt_depth is None:
            skipped += 1
            log.warning("frame %s/%06d has no ground truth; skipped", sample.sequence, sample.frame)
            continue
        gt = sample.gt_depth
        pred = predict_depth_at(predict_disparity, sample.target, gt.shape, head_cfg,
                                model_resolution)
        valid = None
        if crop == "garg":
            valid = garg_crop_mask(*gt.shape)
        try:
            if median_scaling:
                pred = median_scale(pred, gt, valid)
            reports.append(compute_metrics(pred, gt, valid, cap))
        except ValueError as exc:
            skipped += 1
            log.warning("frame %s/%06d rejected: %s", sample.sequence, sample.frame, exc)
    return average_reports(reports), skipped
