"""Dataset ingestion and the synthetic-scene ground-truth generator.

On-disk layout (KITTI-adaptable, see README):

    root/<sequence>/image_<side>/<frame:06d>.png      8-bit RGB
    root/<sequence>/depth_<side>/<frame:06d>.png      16-bit, meters = value / 256, 0 = invalid
    root/<sequence>/poses_<side>.txt                  optional, 4x4 camera-to-world per line
    root/<sequence>/intrinsics.txt                    3x3 row-major K, native resolution,
                                                      optional stereo baseline

Split files contain one ``<sequence> <frame> <side>`` triple per line
(side is ``l`` or ``r``); static-frame filtering is the split file's
responsibility.
"""

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import CameraIntrinsics

log = logging.getLogger(__name__)

DEPTH_PNG_SCALE = 256.0
SPLIT_LINE = re.compile(r"^(\S+)\s+(\d+)\s+([lr])$")

SIDE_NAMES = {"l": "left", "r": "right"}
OTHER_SIDE = {"l": "r", "r": "l"}


# ---------------------------------------------------------------------------
# file formats


def read_image(path):
    """Load an 8-bit image file as a float (3, H, W) tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_image(path, tensor):
    """Save a float (3, H, W) tensor in [0, 1] as an 8-bit PNG."""
    arr = tensor.detach().cpu().numpy()
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def read_depth_png(path):
    """Load a 16-bit depth PNG; returns (depth (H, W) float32 meters, valid mask)."""
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.uint16)
    if arr.ndim != 2:
        raise ValueError(f"depth file is not single-channel: {path}")
    depth = arr.astype(np.float32) / DEPTH_PNG_SCALE
    return depth, arr > 0


def write_depth_png(path, depth):
    """Save metric depth (H, W) as a 16-bit PNG (value = meters * 256, 0 = invalid)."""
    arr = np.asarray(depth, dtype=np.float64) * DEPTH_PNG_SCALE
    if np.any(arr < 0) or np.any(arr > np.iinfo(np.uint16).max):
        raise ValueError("depth outside the representable range of the 16-bit convention")
    Image.fromarray(np.round(arr).astype(np.uint16)).save(path)


def read_intrinsics(path):
    """Parse an intrinsics file: 3x3 K, native resolution, optional baseline."""
    lines = [
        line.strip()
        for line in Path(path).read_text().splitlines()
        if line.strip() and not line.startswith("#")
    ]
    if len(lines) < 4:
        raise ValueError(f"malformed intrinsics file (expected >= 4 lines): {path}")
    try:
        rows = [[float(v) for v in lines[i].split()] for i in range(3)]
        size = lines[3].split()
        width, height = int(size[0]), int(size[1])
    except (ValueError, IndexError) as exc:
        raise ValueError(f"malformed intrinsics file: {path}") from exc
    if any(len(r) != 3 for r in rows):
        raise ValueError(f"malformed intrinsics file (K must be 3x3): {path}")
    k = np.array(rows)
    if k[0][1] != 0 or k[1][0] != 0 or list(k[2]) != [0.0, 0.0, 1.0]:
        raise ValueError(f"intrinsics matrix is not an axis-aligned pinhole K: {path}")
    baseline = None
    for line in lines[4:]:
        parts = line.split()
        if parts[0] == "baseline":
            baseline = float(parts[1])
    intr = CameraIntrinsics(
        f_x=k[0][0], f_y=k[1][1], c_x=k[0][2], c_y=k[1][2], width=width, height=height
    )
    return intr, baseline


def write_intrinsics(path, intrinsics: CameraIntrinsics, baseline=None):
    lines = [
        f"{intrinsics.f_x} 0 {intrinsics.c_x}",
        f"0 {intrinsics.f_y} {intrinsics.c_y}",
        "0 0 1",
        f"{intrinsics.width} {intrinsics.height}",
    ]
    if baseline is not None:
        lines.append(f"baseline {baseline}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path):
    """Camera-to-world poses, one row-major 4x4 matrix per line."""
    poses = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 16:
            raise ValueError(f"pose line does not hold a 4x4 matrix: {path}")
        poses.append(np.array(vals).reshape(4, 4))
    return poses


def write_poses(path, poses):
    lines = [" ".join(repr(float(v)) for v in np.asarray(p).reshape(-1)) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def intrinsics_rescale(intrinsics: CameraIntrinsics, from_res, to_res) -> CameraIntrinsics:
    """Rescale pinhole parameters proportionally between resolutions (w, h)."""
    fw, fh = from_res
    tw, th = to_res
    if fw <= 0 or fh <= 0 or tw <= 0 or th <= 0:
        raise ValueError("resolutions must be positive")
    sx, sy = tw / fw, th / fh
    return CameraIntrinsics(
        f_x=intrinsics.f_x * sx,
        f_y=intrinsics.f_y * sy,
        c_x=intrinsics.c_x * sx,
        c_y=intrinsics.c_y * sy,
        width=int(tw),
        height=int(th),
    )


# ---------------------------------------------------------------------------
# triplet dataset


@dataclass
class Sample:
    """One training unit: a target frame, temporal sources, optional stereo."""

    target: torch.Tensor
    sources: list
    intrinsics: CameraIntrinsics
    stereo: torch.Tensor = None
    baseline: float = None
    stereo_side: str = None            # "left-to-right" if the target is the left camera
    gt_depth: np.ndarray = None        # native resolution, 0 = invalid
    sequence: str = ""
    frame: int = 0
    side: str = "l"


def parse_split_line(line):
    m = SPLIT_LINE.match(line.strip())
    if not m:
        raise ValueError(f"malformed split line: {line!r}")
    return m.group(1), int(m.group(2)), m.group(3)


class TripletDataset:
    """Random access to image triplets under the documented layout.

    Frames whose temporal neighbors (or stereo partner, when requested)
    are missing on disk are excluded with a logged warning; malformed
    intrinsics reject the whole dataset.
    """

    def __init__(self, root, split_file, height=None, width=None,
                 use_stereo=False, load_depth=False, neighbor_offsets=(-1, 1)):
        self.root = Path(root)
        self.height = height
        self.width = width
        self.use_stereo = use_stereo
        self.load_depth = load_depth
        self.neighbor_offsets = tuple(neighbor_offsets)
        self._intrinsics = {}
        self._baselines = {}
        self._cache = {}
        self.n_warnings = 0

        entries = []
        for line in Path(split_file).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            entries.append(parse_split_line(line))

        self.index = []
        for seq, frame, side in entries:
            self._load_sequence_intrinsics(seq)
            missing = [
                off for off in self.neighbor_offsets
                if not self._image_path(seq, frame + off, side).exists()
            ]
            if not self._image_path(seq, frame, side).exists():
                missing.append(0)
            if use_stereo and not self._image_path(seq, frame, OTHER_SIDE[side]).exists():
                missing.append("stereo")
            if missing:
                self.n_warnings += 1
                log.warning(
                    "skipping %s frame %d side %s: missing companion frames %s",
                    seq, frame, side, missing,
                )
                continue
            self.index.append((seq, frame, side))

    def _image_path(self, seq, frame, side):
        return self.root / seq / f"image_{side}" / f"{frame:06d}.png"

    def _depth_path(self, seq, frame, side):
        return self.root / seq / f"depth_{side}" / f"{frame:06d}.png"

    def _load_sequence_intrinsics(self, seq):
        if seq in self._intrinsics:
            return
        path = self.root / seq / "intrinsics.txt"
        if not path.exists():
            raise ValueError(f"missing intrinsics file for sequence {seq}")
        intr, baseline = read_intrinsics(path)
        self._intrinsics[seq] = intr
        self._baselines[seq] = baseline

    def _load_image(self, seq, frame, side):
        key = (seq, frame, side)
        if key in self._cache:
            return self._cache[key]
        img = read_image(self._image_path(seq, frame, side))
        native = self._intrinsics[seq]
        if img.shape[-2:] != (native.height, native.width):
            raise ValueError(
                f"image resolution differs from the declared native resolution: {key}"
            )
        if self.height is not None and (img.shape[-2:] != (self.height, self.width)):
            img = F.interpolate(
                img[None], size=(self.height, self.width), mode="bilinear",
                align_corners=False, antialias=True,
            )[0]
        self._cache[key] = img
        return img

    def _training_intrinsics(self, seq):
        native = self._intrinsics[seq]
        if self.height is None or (native.height, native.width) == (self.height, self.width):
            return native
        return intrinsics_rescale(
            native, (native.width, native.height), (self.width, self.height)
        )

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i) -> Sample:
        seq, frame, side = self.index[i]
        target = self._load_image(seq, frame, side)
        sources = [self._load_image(seq, frame + off, side) for off in self.neighbor_offsets]
        stereo = None
        baseline = None
        stereo_side = None
        if self.use_stereo:
            baseline = self._baselines[seq]
            if baseline is None:
                raise ValueError(f"sequence {seq} declares no stereo baseline")
            stereo = self._load_image(seq, frame, OTHER_SIDE[side])
            stereo_side = "left-to-right" if side == "l" else "right-to-left"
        gt = None
        if self.load_depth:
            dpath = self._depth_path(seq, frame, side)
            if dpath.exists():
                depth, valid = read_depth_png(dpath)
                gt = np.where(valid, depth, 0.0).astype(np.float32)
        return Sample(
            target=target,
            sources=sources,
            intrinsics=self._training_intrinsics(seq),
            stereo=stereo,
            baseline=baseline,
            stereo_side=stereo_side,
            gt_depth=gt,
            sequence=seq,
            frame=frame,
            side=side,
        )


def load_split(root, split_file, **kwargs) -> TripletDataset:
    """Open a dataset rooted at ``root`` indexed by ``split_file``."""
    return TripletDataset(root, split_file, **kwargs)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSceneSpec:
    """Procedural scene with exact per-pixel depth and exact poses.

    The world surface is a smooth random height field (depth as a
    function of lateral position) plus fronto-parallel textured plane
    patches floating in front of it. Textures are smooth procedural
    functions evaluated exactly at ray hits, so cross-view photometric
    consistency is limited only by the warper, not by the renderer.
    """

    width: int = 192
    height: int = 64
    focal: float = 110.0
    n_frames: int = 50
    base_depth: float = 8.0
    depth_amplitude: float = 2.0
    n_planes: int = 2
    step_translation: float = 0.45   # meters per frame; keeps parallax well above a pixel
    step_rotation_deg: float = 0.7
    texture_waves: int = 10
    min_wavelength_px: float = 13.0
    seed: int = 0
    stereo_baseline: float = None

    def __post_init__(self):
        if self.base_depth - self.depth_amplitude <= 0.5:
            raise ValueError("height field reaches too close to the camera")
        if self.depth_amplitude < 0 or self.base_depth <= 0:
            raise ValueError("degenerate scene geometry")
        if self.step_rotation_deg >= 10.0:
            raise ValueError("per-frame rotations must stay below 10 degrees")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            f_x=self.focal,
            f_y=self.focal,
            c_x=(self.width - 1) / 2.0,
            c_y=(self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )


class _WaveTexture:
    """Smooth aperiodic RGB texture: per-channel multi-octave wave sums.

    Wavelengths spread log-uniformly over more than a decade with random
    incommensurate directions, so the autocorrelation has one dominant
    peak and photometric matching has no false optima at parallax scale;
    channels carry independent frequencies, adding color cues.
    """

    def __init__(self, rng, n_waves, max_frequency):
        mags = np.exp(
            rng.uniform(np.log(max_frequency / 24.0), np.log(max_frequency), size=(3, n_waves))
        )
        angles = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.kx = mags * np.cos(angles)
        self.ky = mags * np.sin(angles)
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        amp = (max_frequency / mags) ** 0.5 * rng.uniform(0.6, 1.0, size=(3, n_waves))
        self.amp = 0.45 * amp / np.abs(amp).sum(axis=1, keepdims=True)

    def __call__(self, x, y):
        out = []
        for c in range(3):
            arg = (
                np.multiply.outer(x, self.kx[c])
                + np.multiply.outer(y, self.ky[c])
                + self.phase[c]
            )
            out.append(0.5 + (np.sin(arg) * self.amp[c]).sum(axis=-1))
        return np.clip(np.stack(out, axis=-1), 0.02, 0.98)


class _HeightField:
    """World surface depth z = g(x, y): a gentle random sum of plane waves."""

    def __init__(self, rng, base, amplitude):
        n = 4
        self.base = base
        self.freq = rng.uniform(0.08, 0.35, size=(n, 2)) * rng.choice([-1, 1], size=(n, 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=n)
        amp = rng.uniform(0.5, 1.0, size=n)
        self.amp = amplitude * amp / amp.sum()

    def depth(self, x, y):
        arg = np.multiply.outer(x, self.freq[:, 0]) + np.multiply.outer(y, self.freq[:, 1])
        return self.base + (np.sin(arg + self.phase) * self.amp).sum(axis=-1)

    def grad(self, x, y):
        arg = np.multiply.outer(x, self.freq[:, 0]) + np.multiply.outer(y, self.freq[:, 1])
        cos = np.cos(arg + self.phase) * self.amp
        gx = (cos * self.freq[:, 0]).sum(axis=-1)
        gy = (cos * self.freq[:, 1]).sum(axis=-1)
        return gx, gy


@dataclass
class _Plane:
    depth: float
    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    texture: object = field(repr=False, default=None)


class SyntheticScene:
    """Renderer over one spec; deterministic per seed."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        # wavelengths stay comfortably above the pixel footprint at scene depth
        px_m = spec.base_depth / spec.focal
        max_freq = 2 * np.pi / (spec.min_wavelength_px * px_m)
        self.field = _HeightField(rng, spec.base_depth, spec.depth_amplitude)
        self.field_tex = _WaveTexture(rng, spec.texture_waves, max_freq)
        self.planes = []
        for _ in range(spec.n_planes):
            # modest depth offsets keep disocclusion strips subpixel
            z = spec.base_depth * rng.uniform(0.65, 0.85)
            half_w = rng.uniform(0.14, 0.3) * z * spec.width / spec.focal / 2
            half_h = rng.uniform(0.2, 0.42) * z * spec.height / spec.focal / 2
            cx = rng.uniform(-0.25, 0.25) * z * spec.width / spec.focal
            cy = rng.uniform(-0.25, 0.25) * z * spec.height / spec.focal
            self.planes.append(
                _Plane(z, cx - half_w, cx + half_w, cy - half_h, cy + half_h,
                       _WaveTexture(rng, spec.texture_waves, max_freq * spec.base_depth / z))
            )
        self.cam_to_world = self._trajectory(rng)

    def _trajectory(self, rng):
        poses = [np.eye(4)]
        for _ in range(self.spec.n_frames - 1):
            step = self.spec.step_translation
            # lateral wander with a minimum magnitude keeps parallax well
            # above a pixel; forward/vertical drift stays zero-mean
            dt = np.array([
                rng.choice([-1.0, 1.0]) * rng.uniform(0.55, 1.0) * step,
                rng.uniform(-0.3, 0.3) * step,
                rng.uniform(-0.4, 0.4) * step,
            ])
            angle = np.deg2rad(rng.uniform(0.15, 1.0) * self.spec.step_rotation_deg)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            k = np.array([
                [0, -axis[2], axis[1]],
                [axis[2], 0, -axis[0]],
                [-axis[1], axis[0], 0],
            ])
            dr = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
            delta = np.eye(4)
            delta[:3, :3] = dr
            delta[:3, 3] = dt
            poses.append(poses[-1] @ delta)
        return poses

    def _cast(self, origin, dirs_world):
        """Ray parameter of the nearest surface hit; dirs are per-pixel (H, W, 3)."""
        dx, dy, dz = dirs_world[..., 0], dirs_world[..., 1], dirs_world[..., 2]
        # Newton on F(s) = o_z + s*dz - g(o_x + s*dx, o_y + s*dy)
        s = (self.field.base - origin[2]) / dz
        for _ in range(20):
            x = origin[0] + s * dx
            y = origin[1] + s * dy
            f = origin[2] + s * dz - self.field.depth(x, y)
            gx, gy = self.field.grad(x, y)
            fp = dz - gx * dx - gy * dy
            s = s - f / fp
        hits = [(s, None)]
        for plane in self.planes:
            sp = (plane.depth - origin[2]) / dz
            x = origin[0] + sp * dx
            y = origin[1] + sp * dy
            inside = (
                (x >= plane.x_lo) & (x <= plane.x_hi)
                & (y >= plane.y_lo) & (y <= plane.y_hi)
                & (sp > 0)
            )
            sp = np.where(inside, sp, np.inf)
            hits.append((sp, plane))
        stacked = np.stack([h[0] for h in hits])
        owner = stacked.argmin(axis=0)
        return stacked.min(axis=0), owner, hits

    def render(self, cam_to_world):
        """Render one view; returns (image (H, W, 3), depth (H, W))."""
        spec = self.spec
        intr = spec.intrinsics()
        u = np.arange(spec.width, dtype=np.float64)
        v = np.arange(spec.height, dtype=np.float64)
        uu, vv = np.meshgrid(u, v)
        dirs_cam = np.stack(
            [(uu - float(intr.c_x)) / spec.focal, (vv - float(intr.c_y)) / spec.focal,
             np.ones_like(uu)], axis=-1,
        )
        rot = cam_to_world[:3, :3]
        origin = cam_to_world[:3, 3]
        dirs_world = dirs_cam @ rot.T
        s, owner, hits = self._cast(origin, dirs_world)
        x = origin[0] + s * dirs_world[..., 0]
        y = origin[1] + s * dirs_world[..., 1]
        image = self.field_tex(x, y)
        for k, (_, plane) in enumerate(hits[1:], start=1):
            mask = owner == k
            if mask.any():
                image[mask] = plane.texture(x[mask], y[mask])
        # camera-frame z equals the ray parameter because dirs_cam has unit z
        depth = s
        if not np.all(depth > 0):
            raise ValueError("degenerate scene geometry: surface behind the camera")
        return image, depth

    def frame(self, index, side="l"):
        pose = self.cam_to_world[index]
        if side == "r":
            if self.spec.stereo_baseline is None:
                raise ValueError("scene has no stereo rig")
            shift = np.eye(4)
            shift[0, 3] = self.spec.stereo_baseline
            pose = pose @ shift
        image, depth = self.render(pose)
        return image, depth, pose


def generate_synthetic(spec: SyntheticSceneSpec) -> SyntheticScene:
    """Build the deterministic renderer for a scene spec."""
    if spec.n_frames < 1:
        raise ValueError("need at least one frame")
    return SyntheticScene(spec)


def relative_pose(cam_to_world_target, cam_to_world_source):
    """Exact target-to-source transform from two camera-to-world poses."""
    r_t = cam_to_world_target[:3, :3]
    o_t = cam_to_world_target[:3, 3]
    r_s = cam_to_world_source[:3, :3]
    o_s = cam_to_world_source[:3, 3]
    linear = r_s.T @ r_t
    translation = r_s.T @ (o_t - o_s)
    return linear, translation


def write_synthetic_sequence(scene: SyntheticScene, out_dir, name):
    """Materialize one rendered sequence in the documented layout."""
    spec = scene.spec
    seq_dir = Path(out_dir) / name
    sides = ["l"] + (["r"] if spec.stereo_baseline is not None else [])
    for side in sides:
        (seq_dir / f"image_{side}").mkdir(parents=True, exist_ok=True)
        (seq_dir / f"depth_{side}").mkdir(parents=True, exist_ok=True)
    write_intrinsics(seq_dir / "intrinsics.txt", spec.intrinsics(), spec.stereo_baseline)
    for side in sides:
        poses = []
        for i in range(spec.n_frames):
            image, depth, pose = scene.frame(i, side)
            poses.append(pose)
            tensor = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1)
            write_image(seq_dir / f"image_{side}" / f"{i:06d}.png", tensor)
            write_depth_png(seq_dir / f"depth_{side}" / f"{i:06d}.png", depth)
        write_poses(seq_dir / f"poses_{side}.txt", poses)
    return seq_dir
