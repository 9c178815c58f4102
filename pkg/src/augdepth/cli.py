"""Command-line surface: train, eval, infer, make-synthetic, visualize.

Outputs are artifacts for offline inspection: checkpoints, loss logs,
metric tables and key=value files, depth PNG/float pairs, and
color-mapped disparity panels.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets as ds
from . import evaluation as ev
from . import training as tr
from .networks import disparity_to_depth, load_checkpoint

log = logging.getLogger("augdepth")

DATA_ROOT_ENV = "AUGDEPTH_DATA_ROOT"
COLORMAP = "magma"


class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


def _parse_resolution(text):
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"resolution must look like 640x192: {text!r}") from exc


def _data_root(args):
    root = args.data or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise SystemExit(f"no dataset root given (--data or ${DATA_ROOT_ENV})")
    if not Path(root).is_dir():
        raise SystemExit(f"dataset root does not exist: {root}")
    return root


def _build_config(args):
    """Resolve TrainConfig from defaults, an optional file, and CLI overrides."""
    values = {}
    if args.config:
        values.update(tr.read_kv_file(args.config))
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.resolution:
        overrides["width"], overrides["height"] = args.resolution
    if args.preset:
        overrides["preset"] = args.preset
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.augmentation:
        overrides["use_augmentation"] = args.augmentation == "on"
    for key, value in overrides.items():
        if key in values and str(values[key]) != str(value):
            log.info("config key %s: flag value %r overrides file value %r",
                     key, value, values[key])
        values[key] = value
    return tr.TrainConfig.from_dict(values)


def _load_model(path):
    if not Path(path).exists():
        raise SystemExit(f"checkpoint not found: {path}")
    payload = load_checkpoint(path)
    depth_net, pose_net, cfg = tr.models_from_checkpoint(payload)
    depth_net.eval()
    return depth_net, cfg


def _iter_images(target):
    path = Path(target)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise SystemExit(f"no image files in directory: {target}")
        return files
    if not path.exists():
        raise SystemExit(f"input image not found: {target}")
    return [path]


def _predict_native_depth(depth_net, cfg, image):
    """Depth at the image's own resolution via the model-resolution round trip."""
    pred = ev.predict_depth_at(
        depth_net, image, image.shape[-2:], cfg.head(),
        model_resolution=(cfg.height, cfg.width),
    )
    return pred


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = _build_config(args)
    root = _data_root(args)
    dataset = ds.load_split(
        root, args.split, height=cfg.height, width=cfg.width,
        use_stereo=cfg.mode in ("MS", "S"),
    )
    out = Path(args.output)
    log.info("training on %d samples -> %s", len(dataset), out)
    tr.fit(dataset, cfg, out, resume=args.resume)
    return 0


def cmd_eval(args):
    depth_net, cfg = _load_model(args.checkpoint)
    root = _data_root(args)
    dataset = ds.load_split(root, args.split, height=None, load_depth=True)
    report, skipped = ev.evaluate(
        depth_net, dataset, cfg.head(), cap=args.cap,
        median_scaling=args.median_scaling == "on",
        crop=args.crop, model_resolution=(cfg.height, cfg.width),
    )
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    header = (
        f"# depth evaluation: cap={args.cap} median_scaling={args.median_scaling} "
        f"crop={args.crop} skipped={skipped}\n"
    )
    (out / "metrics.txt").write_text(header + report.to_kv())
    (out / "report.txt").write_text(header + report.to_table() + "\n")
    print(report.to_table())
    if skipped:
        log.warning("%d frames were skipped", skipped)
        if args.strict:
            return 1
    return 0


def cmd_infer(args):
    depth_net, cfg = _load_model(args.checkpoint)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in _iter_images(args.input):
        try:
            image = ds.read_image(path)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            failures += 1
            continue
        pred = _predict_native_depth(depth_net, cfg, image)
        ds.write_depth_png(out / f"{path.stem}_depth.png", pred)
        np.save(out / f"{path.stem}_depth.npy", pred.astype(np.float32))
        log.info("wrote depth for %s", path.name)
    return 1 if (failures and args.strict) else 0


def colorize_disparity(disp):
    """Per-image normalized disparity through the documented colormap."""
    import matplotlib

    lo, hi = float(disp.min()), float(disp.max())
    norm = (disp - lo) / (hi - lo) if hi > lo else np.zeros_like(disp)
    cmap = matplotlib.colormaps[COLORMAP]
    return cmap(norm)[..., :3]


def cmd_visualize(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    depth_net, cfg = _load_model(args.checkpoint)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in _iter_images(args.input):
        try:
            image = ds.read_image(path)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            failures += 1
            continue
        pred = _predict_native_depth(depth_net, cfg, image)
        disp_rgb = colorize_disparity(1.0 / pred)
        plt.imsave(out / f"{path.stem}_disp.png", disp_rgb)
        panel = np.concatenate([image.permute(1, 2, 0).numpy(), disp_rgb], axis=1)
        plt.imsave(out / f"{path.stem}_panel.png", np.clip(panel, 0, 1))
        log.info("wrote panels for %s", path.name)
    return 1 if (failures and args.strict) else 0


SYNTH_KEYS = {
    "sequences": 4, "eval_sequences": 1, "frames": 50,
    "width": 192, "height": 64, "focal": 110.0,
    "base_depth": 8.0, "depth_amplitude": 2.0, "n_planes": 2,
    "step_translation": 0.45, "step_rotation_deg": 0.7,
    "texture_waves": 10, "min_wavelength_px": 13.0,
    "seed": 0, "stereo_baseline": 0.0,
}


def cmd_make_synthetic(args):
    values = dict(SYNTH_KEYS)
    if args.spec:
        for key, raw in tr.read_kv_file(args.spec).items():
            if key not in values:
                raise SystemExit(f"unknown synthetic spec key: {key}")
            values[key] = type(values[key])(raw)
    if args.seed is not None:
        values["seed"] = args.seed
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    baseline = values["stereo_baseline"] or None
    scene_keys = {
        k: values[k]
        for k in ("width", "height", "focal", "base_depth", "depth_amplitude", "n_planes",
                  "step_translation", "step_rotation_deg", "texture_waves",
                  "min_wavelength_px")
    }
    train_lines, eval_lines = [], []
    total = values["sequences"] + values["eval_sequences"]
    for s in range(total):
        name = f"seq_{s:02d}"
        spec = ds.SyntheticSceneSpec(
            n_frames=values["frames"], seed=values["seed"] * 1000 + s,
            stereo_baseline=baseline, **scene_keys,
        )
        scene = ds.generate_synthetic(spec)
        ds.write_synthetic_sequence(scene, out, name)
        if s < values["sequences"]:
            for f in range(1, values["frames"] - 1):
                train_lines.append(f"{name} {f} l")
        else:
            # held-out scenes: every other frame keeps the eval set compact
            for f in range(1, values["frames"] - 1, 2):
                eval_lines.append(f"{name} {f} l")
        log.info("wrote sequence %s", name)
    (out / "train_files.txt").write_text("\n".join(train_lines) + "\n")
    (out / "eval_files.txt").write_text("\n".join(eval_lines) + "\n")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="augdepth",
        description="Self-supervised monocular depth: training, evaluation, inference.",
    )
    parser.add_argument("--strict", action="store_true",
                        help="exit nonzero if any warning was emitted")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train depth and pose networks")
    p.add_argument("--data", help=f"dataset root (default ${DATA_ROOT_ENV})")
    p.add_argument("--split", required=True, help="split file of sequence/frame/side lines")
    p.add_argument("--output", required=True)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--mode", choices=tr.MODES)
    p.add_argument("--resolution", type=_parse_resolution, help="WxH, e.g. 640x192")
    p.add_argument("--preset", choices=("full", "tiny"))
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--augmentation", choices=("on", "off"))
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against ground-truth depth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--median-scaling", choices=("on", "off"), default="on")
    p.add_argument("--crop", choices=("garg", "none"), default="none")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write depth maps for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("make-synthetic", help="materialize a synthetic dataset")
    p.add_argument("--spec", help="key=value scene spec file")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("visualize", help="export color-mapped disparity panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    counter = _WarningCounter()
    logging.getLogger().addHandler(counter)
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.manual_seed(getattr(args, "seed", None) or 0)
    try:
        code = args.func(args)
    except (ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2
    if args.strict and counter.count and code == 0:
        log.error("--strict: %d warnings were emitted", counter.count)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
