"""Self-supervised monocular depth estimation with geometry-aware
augmentation and self-distillation."""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    PixelGrid,
    Transform,
    backproject,
    bilinear_sample,
    project,
    rectify_pose,
    stereo_pose,
    synthesize_view,
)
from .augmentation import (
    CropSpec,
    SplitSpec,
    align_for_distillation,
    resize_crop,
    restore,
    split_permute,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    auto_mask,
    min_reprojection,
    photometric_error,
    scale_invariant,
    self_distill_rc,
    self_distill_sp,
    smoothness,
    ssim,
    total_loss,
)
from .networks import (
    DepthHeadConfig,
    DepthNet,
    PoseNet,
    disparity_to_depth,
    load_checkpoint,
    predict_pose,
    save_checkpoint,
)
from .datasets import (
    Sample,
    SyntheticSceneSpec,
    TripletDataset,
    generate_synthetic,
    intrinsics_rescale,
    load_split,
)
from .evaluation import MetricsReport, compute_metrics, evaluate, median_scale
from .training import TrainConfig, fit, training_step
