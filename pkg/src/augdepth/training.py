"""Three-branch training step and the optimization schedule.

Each step evaluates the objective on three views of the same batch: the
original images, a shared zoomed crop of target and sources with
rectified poses, and a split-permuted target warped against the original
sources. Poses are predicted once from the original images and reused
(rectified where needed) by the augmented branches; depth predicted on
the augmented views additionally supervises the original prediction
through the scale-invariant distillation terms.
"""

import csv
import logging
from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import augmentation as aug
from . import losses as L
from .geometry import CameraIntrinsics, Transform, stereo_pose, rectify_pose, synthesize_view
from .networks import (
    DepthHeadConfig,
    DepthNet,
    PoseNet,
    PRESETS,
    disparity_to_depth,
    load_checkpoint,
    pose_to_transform,
    save_checkpoint,
)

log = logging.getLogger(__name__)

MODES = ("M", "MS", "S")


@dataclass
class TrainConfig:
    """Flat training configuration; every key round-trips through key=value text."""

    mode: str = "M"
    height: int = 192
    width: int = 640
    batch_size: int = 10
    epochs: int = 20
    steps: int = 0               # optional global step cap; 0 = no cap
    lr: float = 1e-4
    lr_drop_epoch: int = 15      # epochs trained at the base rate
    lr_after_drop: float = 1e-5
    weight_decay: float = 1e-2
    seed: int = 1
    preset: str = "full"
    min_depth: float = 0.1
    max_depth: float = 100.0
    scale_min: float = 1.2
    scale_max: float = 2.0
    ratio_min: float = 0.1
    ratio_max: float = 0.9
    alpha: float = 0.85
    smoothness_weight: float = 0.001
    distillation_weight: float = 0.07
    si_beta: float = 0.5
    flip: bool = True
    jitter: bool = True
    use_augmentation: bool = True
    distill_to_augmented: bool = False
    # Ramp the distillation weight from 0 over this many steps. From random
    # initialization the network is scale-blind, so the zoomed-crop pseudo
    # label f_s*D starts as a pure upward pull on depth and diverges unless
    # photometric training gets a head start. 0 keeps the weight constant,
    # appropriate when starting from pretrained weights.
    distill_warmup_steps: int = 0
    automask_noise: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.height % 32 or self.width % 32:
            raise ValueError("resolution must be divisible by 32")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {tuple(PRESETS)}")

    def weights(self) -> L.LossWeights:
        return L.LossWeights(
            alpha=self.alpha,
            smoothness=self.smoothness_weight,
            distillation=self.distillation_weight,
            si_beta=self.si_beta,
        )

    def head(self) -> DepthHeadConfig:
        return DepthHeadConfig(self.min_depth, self.max_depth)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, value in values.items():
            if key not in known:
                raise ValueError(
                    f"unknown config key: {key} (allowed: {', '.join(sorted(known))})"
                )
            parsed[key] = _coerce(value, cls.__dataclass_fields__[key].default)
        return cls(**parsed)


def _coerce(value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    return value


def read_kv_file(path):
    """Parse flat ``key = value`` text; '#' starts a comment."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def write_kv_file(path, values):
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def learning_rate_for_epoch(cfg: TrainConfig, epoch_index):
    """Step schedule: the base rate for the first ``lr_drop_epoch`` epochs
    (0-based indices 0..lr_drop_epoch-1), the dropped rate afterwards."""
    return cfg.lr if epoch_index < cfg.lr_drop_epoch else cfg.lr_after_drop


def build_models(cfg: TrainConfig):
    """DepthNet plus PoseNet (absent in stereo-only mode), seeded."""
    torch.manual_seed(cfg.seed)
    preset = PRESETS[cfg.preset]
    depth_net = DepthNet(width_mult=preset["width_mult"], columns=preset["columns"])
    pose_net = PoseNet(width_mult=preset["width_mult"]) if cfg.mode != "S" else None
    return depth_net, pose_net


def models_from_checkpoint(payload):
    cfg = TrainConfig.from_dict(payload["config"])
    depth_net, pose_net = build_models(cfg)
    depth_net.load_state_dict(payload["depth_state"])
    if pose_net is not None and payload["pose_state"] is not None:
        pose_net.load_state_dict(payload["pose_state"])
    return depth_net, pose_net, cfg


# ---------------------------------------------------------------------------
# batch assembly


def _jitter(image, rng):
    """Brightness/contrast/saturation jitter with shared per-sample factors."""
    brightness = rng.uniform(0.8, 1.2)
    contrast = rng.uniform(0.8, 1.2)
    saturation = rng.uniform(0.8, 1.2)
    out = image * brightness
    out = (out - out.mean()) * contrast + out.mean()
    gray = out.mean(dim=0, keepdim=True)
    out = gray + (out - gray) * saturation
    return out.clamp(0.0, 1.0)


def assemble_batch(dataset, indices, cfg: TrainConfig, epoch):
    """Stack samples into batch tensors, applying per-sample flip/jitter.

    Flips mirror all frames of a sample jointly, mirror the principal
    point, and swap the stereo direction; jitter only affects the copies
    fed to the networks, never the loss images.
    """
    targets, targets_in = [], []
    if len(indices) == 0:
        raise ValueError("empty batch")
    n_sources = len(dataset[indices[0]].sources)
    sources = [[] for _ in range(n_sources)]
    sources_in = [[] for _ in range(n_sources)]
    stereo, stereo_in, stereo_tx = [], [], []
    fx, fy, cx, cy = [], [], [], []
    use_stereo = cfg.mode in ("MS", "S")
    for idx in indices:
        sample = dataset[idx]
        rng = np.random.default_rng([cfg.seed, 11, epoch, int(idx)])
        do_flip = cfg.flip and rng.uniform() < 0.5
        do_jitter = cfg.jitter and rng.uniform() < 0.5
        frames = [sample.target] + list(sample.sources)
        if use_stereo:
            if sample.stereo is None:
                raise ValueError("stereo mode requires stereo sources in every sample")
            frames.append(sample.stereo)
        if do_flip:
            frames = [torch.flip(f, dims=[-1]) for f in frames]
        jit = (lambda t: _jitter(t, rng)) if do_jitter else (lambda t: t)
        frames_in = [jit(f) for f in frames]

        targets.append(frames[0])
        targets_in.append(frames_in[0])
        for s in range(n_sources):
            sources[s].append(frames[1 + s])
            sources_in[s].append(frames_in[1 + s])
        if use_stereo:
            stereo.append(frames[-1])
            stereo_in.append(frames_in[-1])
            sign = -1.0 if sample.stereo_side == "left-to-right" else 1.0
            if do_flip:
                sign = -sign
            stereo_tx.append(sign * sample.baseline)
        intr = sample.intrinsics
        fx.append(float(intr.f_x))
        fy.append(float(intr.f_y))
        c = float(intr.c_x)
        cx.append((intr.width - 1) - c if do_flip else c)
        cy.append(float(intr.c_y))

    first = dataset[indices[0]]
    intr = CameraIntrinsics(
        f_x=torch.tensor(fx), f_y=torch.tensor(fy),
        c_x=torch.tensor(cx), c_y=torch.tensor(cy),
        width=first.intrinsics.width, height=first.intrinsics.height,
    )
    batch = {
        "target": torch.stack(targets),
        "target_in": torch.stack(targets_in),
        "sources": [torch.stack(s) for s in sources],
        "sources_in": [torch.stack(s) for s in sources_in],
        "intrinsics": intr,
    }
    if use_stereo:
        b = len(stereo_tx)
        lin = torch.eye(3).expand(b, 3, 3).clone()
        t = torch.zeros(b, 3)
        t[:, 0] = torch.tensor(stereo_tx)
        batch["stereo"] = torch.stack(stereo)
        batch["stereo_in"] = torch.stack(stereo_in)
        batch["stereo_transform"] = Transform(lin, t)
    return batch


# ---------------------------------------------------------------------------
# objective


def _branch_photometric(target, sources, synth, alpha, rng):
    """Masked photometric mean of one branch from its synthesized views.

    Evaluates the synthesized and identity errors in one stacked pass,
    takes the per-pixel minimum over valid synthesized views, and keeps
    pixels where warping beats not warping (the auto-mask comparison).
    """
    n_synth = len(synth)
    errors = L.photometric_error_stack(
        target, [s for s, _ in synth] + list(sources), alpha
    )
    loss_map, valid = L._masked_minimum(errors[:n_synth], [m for _, m in synth])
    ident = errors[n_synth:].min(0).values
    if rng is not None:
        noise = rng.normal(0.0, 1.0, size=tuple(ident.shape)) * L.AUTOMASK_NOISE
        ident = ident + torch.from_numpy(noise).to(dtype=ident.dtype, device=ident.device)
    mu = (loss_map < ident).detach() & valid
    return L.masked_mean(loss_map, mu & valid), mu


def _predict_poses(pose_net, target_in, sources_in):
    """One batched pose forward covering every (target, source) pair."""
    n = len(sources_in)
    rep_target = torch.cat([target_in] * n, dim=0)
    vec = pose_net(rep_target, torch.cat(sources_in, dim=0))
    chunks = vec.chunk(n, dim=0)
    return [pose_to_transform(c) for c in chunks]


def training_step(batch, depth_net, pose_net, cfg: TrainConfig, rng,
                  crop_spec=None, split_spec=None, distill_scale=1.0) -> L.LossBreakdown:
    """Evaluate the full objective on one batch (no optimizer step).

    ``crop_spec``/``split_spec`` override the sampled augmentation specs
    (used by tests and the degenerate-augmentation identity);
    ``distill_scale`` applies the warm-up ramp to the distillation weight.
    """
    target = batch["target"]
    target_in = batch["target_in"]
    intr = batch["intrinsics"]
    head = cfg.head()
    weights = cfg.weights()
    if distill_scale != 1.0:
        weights = replace(weights, distillation=weights.distillation * distill_scale)
    noise_rng = rng if cfg.automask_noise else None

    sources = list(batch["sources"])
    transforms = []
    if cfg.mode != "S":
        if pose_net is None:
            raise ValueError("monocular modes need a pose network")
        transforms = _predict_poses(pose_net, target_in, batch["sources_in"])
    else:
        sources = []
    if cfg.mode in ("MS", "S"):
        if "stereo" not in batch:
            raise ValueError("stereo modes require stereo sources in the batch")
        sources.append(batch["stereo"])
        transforms.append(batch["stereo_transform"])
    if not sources:
        raise ValueError("no source views available for this configuration")

    if cfg.use_augmentation:
        h, w = target.shape[-2:]
        crop = crop_spec or aug.sample_crop_spec(h, w, rng, (cfg.scale_min, cfg.scale_max))
        split = split_spec or aug.sample_split_spec(h, w, rng, (cfg.ratio_min, cfg.ratio_max))
        cropped = aug.apply_crop([target, target_in] + sources, crop)
        target_rc, target_rc_in = cropped[0], cropped[1]
        sources_rc = cropped[2:]
        target_sp = aug.apply_split(target, split)
        target_sp_in = aug.apply_split(target_in, split)

        # one depth forward covering all three branch inputs
        disp_all = depth_net(torch.cat([target_in, target_rc_in, target_sp_in], dim=0))
        disp, disp_rc, disp_sp = disp_all.chunk(3, dim=0)
    else:
        disp = depth_net(target_in)

    depth = disparity_to_depth(disp, head)
    synth = [synthesize_view(s, depth, t, intr) for s, t in zip(sources, transforms)]
    pe, mu = _branch_photometric(target, sources, synth, cfg.alpha, noise_rng)
    sm = L.smoothness(disp, target)

    if cfg.use_augmentation:
        # zoomed-crop branch: shared crop for target and sources, rectified poses
        depth_rc = disparity_to_depth(disp_rc, head)
        transforms_rc = [rectify_pose(t, crop, intr) for t in transforms]
        synth_rc = [
            synthesize_view(s, depth_rc, t, intr) for s, t in zip(sources_rc, transforms_rc)
        ]
        pe_rc, _ = _branch_photometric(target_rc, sources_rc, synth_rc, cfg.alpha, noise_rng)
        sm_rc = L.smoothness(disp_rc, target_rc)

        # split-permute branch: permuted target only, original sources and poses
        depth_sp = disparity_to_depth(aug.restore(disp_sp, split), head)
        synth_sp = [synthesize_view(s, depth_sp, t, intr) for s, t in zip(sources, transforms)]
        pe_sp, _ = _branch_photometric(target, sources, synth_sp, cfg.alpha, noise_rng)
        sm_sp = L.smoothness(disp_sp, target_sp)

        sd_rc = L.self_distill_rc(depth, depth_rc, crop, cfg.si_beta, cfg.distill_to_augmented)
        sd_sp = L.self_distill_sp(depth, depth_sp, cfg.si_beta, cfg.distill_to_augmented)
    else:
        pe_rc, pe_sp = pe, pe
        sm_rc, sm_sp = sm, sm
        sd_rc = depth.new_zeros(())
        sd_sp = depth.new_zeros(())

    return L.total_loss(pe, pe_rc, pe_sp, sm, sm_rc, sm_sp, sd_rc, sd_sp, weights,
                        mu=mu.to(disp.dtype))


# ---------------------------------------------------------------------------
# optimization loop

LOG_COLUMNS = ("step", "epoch", "lr", "pe", "pe_rc", "pe_sp", "sm", "sm_rc", "sm_sp",
               "sd_rc", "sd_sp", "total")


def fit(dataset, cfg: TrainConfig, out_dir, resume=None):
    """Train on a dataset, writing per-epoch checkpoints and a per-step loss log.

    Deterministic given the seed (up to substrate-level nondeterminism
    such as thread count): shuffling, augmentation draws, and per-sample
    flip/jitter all derive from (seed, epoch, position). A NaN loss
    aborts with the last good checkpoint retained on disk.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    torch.set_flush_denormal(True)  # denormal activations cripple CPU conv throughput
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    depth_net, pose_net = build_models(cfg)
    params = list(depth_net.parameters())
    if pose_net is not None:
        params += list(pose_net.parameters())
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    start_epoch = 0
    global_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        resumed_cfg = TrainConfig.from_dict(payload["config"])
        if resumed_cfg != cfg:
            log.warning("resume config differs from the requested config; using checkpoint")
            cfg = resumed_cfg
        depth_net.load_state_dict(payload["depth_state"])
        if pose_net is not None and payload["pose_state"] is not None:
            pose_net.load_state_dict(payload["pose_state"])
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
        global_step = payload["step"]

    write_kv_file(out / "config.txt", cfg.to_dict())
    log_path = out / "loss_log.csv"
    new_log = not log_path.exists()
    history = []
    depth_net.train()
    if pose_net is not None:
        pose_net.train()

    last_checkpoint = out / "latest.pt"
    stop = False
    with open(log_path, "a", newline="") as log_file:
        writer = csv.writer(log_file)
        if new_log:
            writer.writerow(LOG_COLUMNS)
        for epoch in range(start_epoch, cfg.epochs):
            lr = learning_rate_for_epoch(cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(len(dataset))
            n_batches = len(order) // cfg.batch_size
            for b in range(n_batches):
                if cfg.steps and global_step >= cfg.steps:
                    stop = True
                    break
                indices = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = assemble_batch(dataset, indices, cfg, epoch)
                step_rng = np.random.default_rng([cfg.seed, 7, epoch, b])
                if cfg.distill_warmup_steps > 0:
                    scale = min(1.0, global_step / cfg.distill_warmup_steps)
                else:
                    scale = 1.0
                try:
                    breakdown = training_step(batch, depth_net, pose_net, cfg, step_rng,
                                              distill_scale=scale)
                except ValueError as exc:
                    log.error("aborting at step %d: %s (last checkpoint: %s)",
                              global_step, exc, last_checkpoint)
                    raise RuntimeError(
                        f"training aborted at step {global_step}: {exc}"
                    ) from exc
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                global_step += 1
                row = breakdown.scalars()
                record = {"step": global_step, "epoch": epoch, "lr": lr, **row}
                history.append(record)
                writer.writerow([record[c] for c in LOG_COLUMNS])
            save_checkpoint(out / f"epoch_{epoch:03d}.pt", depth_net, pose_net,
                            cfg.to_dict(), epoch, global_step)
            save_checkpoint(last_checkpoint, depth_net, pose_net, cfg.to_dict(),
                            epoch, global_step, optimizer=optimizer)
            if stop:
                break
    return history
