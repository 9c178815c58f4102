"""Depth and pose networks.

The depth network pairs a ResNet18-class backbone, extended by a
full-scale stem branch into a six-level feature pyramid, with a grid
decoder: one row per pyramid level, a fixed number of lateral blocks per
row, and upsampling connections that merge each row into the one above
at every column. A single full-resolution disparity map comes out of a
sigmoid head.

The pose network is a ResNet18-class encoder over a concatenated image
pair regressing a 6-DoF axis-angle/translation vector.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import Transform

POSE_SCALE = 0.01  # keeps freshly initialized motions near the identity

ENCODER_CHANNELS = (64, 64, 128, 256, 512)
DECODER_CHANNELS = (32, 32, 64, 128, 256, 512)

PRESETS = {
    "full": {"width_mult": 1.0, "columns": 3},
    "tiny": {"width_mult": 0.5, "columns": 2},
}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DepthHeadConfig:
    """Metric range of the disparity-to-depth conversion."""

    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


def disparity_to_depth(disp, cfg: DepthHeadConfig = DepthHeadConfig()):
    """Map sigmoid disparity in (0, 1) to metric depth in (min_depth, max_depth).

    Inverse depth interpolates linearly between the bounds, so depth is
    strictly decreasing in disparity. A saturated sigmoid may emit exact
    0/1 at float32; those map to the corresponding depth bound.
    """
    if (disp < 0).any() or (disp > 1).any():
        raise ValueError("disparity must lie inside (0, 1)")
    inv = 1.0 / cfg.max_depth + disp * (1.0 / cfg.min_depth - 1.0 / cfg.max_depth)
    return 1.0 / inv


def depth_to_disparity(depth, cfg: DepthHeadConfig = DepthHeadConfig()):
    """Exact inverse of ``disparity_to_depth``."""
    inv = 1.0 / depth
    return (inv - 1.0 / cfg.max_depth) / (1.0 / cfg.min_depth - 1.0 / cfg.max_depth)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a residual connection."""

    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class PyramidEncoder(nn.Module):
    """ResNet18-class backbone producing a feature pyramid.

    With the full-scale branch enabled the pyramid has six levels at
    scales 1, 1/2, 1/4, 1/8, 1/16, 1/32; the full-scale level comes from
    a stride-1 copy of the stem convolution whose weights start as a copy
    of the stem's and train independently afterwards.
    """

    def __init__(self, in_channels=3, width_mult=1.0, full_scale=True):
        super().__init__()
        ch = [max(8, int(round(c * width_mult))) for c in ENCODER_CHANNELS]
        self.full_scale = full_scale
        self.stem = nn.Conv2d(in_channels, ch[0], 7, stride=2, padding=3, bias=False)
        self.stem_bn = nn.BatchNorm2d(ch[0])
        self.relu = nn.ReLU(inplace=True)
        if full_scale:
            self.stem_full = nn.Conv2d(in_channels, ch[0], 7, stride=1, padding=3, bias=False)
            self.stem_full_bn = nn.BatchNorm2d(ch[0])
            with torch.no_grad():
                self.stem_full.weight.copy_(self.stem.weight)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = nn.Sequential(BasicBlock(ch[0], ch[1]), BasicBlock(ch[1], ch[1]))
        self.layer2 = nn.Sequential(BasicBlock(ch[1], ch[2], 2), BasicBlock(ch[2], ch[2]))
        self.layer3 = nn.Sequential(BasicBlock(ch[2], ch[3], 2), BasicBlock(ch[3], ch[3]))
        self.layer4 = nn.Sequential(BasicBlock(ch[3], ch[4], 2), BasicBlock(ch[4], ch[4]))
        levels = [ch[0], ch[1], ch[2], ch[3], ch[4]]
        self.num_ch = ([ch[0]] + levels) if full_scale else levels

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError("input resolution must be divisible by 32")
        feats = []
        if self.full_scale:
            feats.append(self.relu(self.stem_full_bn(self.stem_full(x))))
        f = self.relu(self.stem_bn(self.stem(x)))
        feats.append(f)
        f = self.layer1(self.pool(f))
        feats.append(f)
        f = self.layer2(f)
        feats.append(f)
        f = self.layer3(f)
        feats.append(f)
        f = self.layer4(f)
        feats.append(f)
        return feats


class LateralBlock(nn.Module):
    """Channel-preserving refinement within one decoder row."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ELU(inplace=True)

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))))


class UpBlock(nn.Module):
    """Transfer from the row below: x2 nearest upsample plus a 3x3 projection."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class GridDecoder(nn.Module):
    """Grid of row streams at fixed resolutions connected by column-wise upsampling.

    Row r keeps the resolution of pyramid level r. At every column each
    row refines its stream with a lateral block after merging (by
    addition) the upsampled stream of the row below, so coarse rows guide
    fine ones at every column, and the full-scale row feeds the disparity
    head.
    """

    def __init__(self, enc_channels, row_channels=DECODER_CHANNELS, columns=3):
        super().__init__()
        if len(enc_channels) != len(row_channels):
            raise ValueError("need one row per pyramid level")
        self.columns = columns
        rows = len(row_channels)
        self.entries = nn.ModuleList(
            [nn.Conv2d(enc_channels[r], row_channels[r], 1) for r in range(rows)]
        )
        self.laterals = nn.ModuleList(
            nn.ModuleList([LateralBlock(row_channels[r]) for _ in range(columns)])
            for r in range(rows)
        )
        self.ups = nn.ModuleList(
            nn.ModuleList(
                [UpBlock(row_channels[r + 1], row_channels[r]) for _ in range(columns)]
            )
            for r in range(rows - 1)
        )
        self.head = nn.Conv2d(row_channels[0], 1, 3, padding=1)

    def forward(self, feats):
        rows = len(self.entries)
        if len(feats) != rows:
            raise ValueError(f"expected a {rows}-level pyramid")
        for r in range(rows - 1):
            fh, fw = feats[r].shape[-2:]
            nh, nw = feats[r + 1].shape[-2:]
            if (fh, fw) != (2 * nh, 2 * nw):
                raise ValueError("pyramid levels must halve resolution exactly")
        state = [self.entries[r](feats[r]) for r in range(rows)]
        for c in range(self.columns):
            new_state = [None] * rows
            for r in range(rows - 1, -1, -1):
                x = state[r]
                if r < rows - 1:
                    x = x + self.ups[r][c](new_state[r + 1])
                new_state[r] = self.laterals[r][c](x)
            state = new_state
        return torch.sigmoid(self.head(state[0]))


class DepthNet(nn.Module):
    """Single-image disparity network: pyramid encoder plus grid decoder."""

    def __init__(self, width_mult=1.0, columns=3, in_channels=3):
        super().__init__()
        self.encoder = PyramidEncoder(in_channels, width_mult, full_scale=True)
        rows = [max(8, int(round(c * width_mult))) for c in DECODER_CHANNELS]
        self.decoder = GridDecoder(self.encoder.num_ch, rows, columns)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class PoseNet(nn.Module):
    """6-DoF relative pose regression from a concatenated image pair.

    Outputs an axis-angle rotation (radians) and a translation (meters up
    to the monocular scale), both damped by ``POSE_SCALE``.
    """

    def __init__(self, width_mult=1.0):
        super().__init__()
        self.encoder = PyramidEncoder(6, width_mult, full_scale=False)
        c = self.encoder.num_ch[-1]
        mid = max(16, int(round(256 * width_mult)))
        self.squeeze = nn.Conv2d(c, mid, 1)
        self.conv1 = nn.Conv2d(mid, mid, 3, padding=1)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.project = nn.Conv2d(mid, 6, 1)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, target, source):
        if target.shape != source.shape:
            raise ValueError("target and source resolutions differ")
        x = torch.cat([target, source], dim=1)
        f = self.encoder(x)[-1]
        f = self.relu(self.squeeze(f))
        f = self.relu(self.conv1(f))
        f = self.relu(self.conv2(f))
        out = self.project(f).mean(dim=(2, 3))
        return POSE_SCALE * out


def pose_to_transform(vec) -> Transform:
    """Build a rigid target-to-source transform from a (B, 6) pose vector."""
    if vec.shape[-1] != 6:
        raise ValueError("pose vector must have 6 entries")
    return Transform.from_axisangle(vec[..., :3], vec[..., 3:])


def predict_pose(pose_net, target, source):
    """Run the pose network and return both the raw vector and the transform."""
    vec = pose_net(target, source)
    return vec, pose_to_transform(vec)


def save_checkpoint(path, depth_net, pose_net, config, epoch, step, optimizer=None):
    """Write a versioned checkpoint: hierarchical parameter arrays plus a
    config snapshot (see README for the stable layout)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dict(config),
        "epoch": int(epoch),
        "step": int(step),
        "depth_state": depth_net.state_dict(),
        "pose_state": pose_net.state_dict() if pose_net is not None else None,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)


def load_checkpoint(path, map_location="cpu"):
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version}")
    return payload


def load_backbone_weights(encoder: PyramidEncoder, state_dict):
    """Optionally seed the backbone from an external state dict.

    Accepts this package's own encoder names or torchvision-style ResNet
    names (conv1/bn1/layerN.M.*); unmatched or shape-incompatible entries
    are skipped and reported.
    """
    rename = {"conv1.": "stem.", "bn1.": "stem_bn."}
    target = encoder.state_dict()
    loaded, skipped = [], []
    for key, value in state_dict.items():
        name = key
        for old, new in rename.items():
            if name.startswith(old):
                name = new + name[len(old):]
        if name in target and target[name].shape == value.shape:
            target[name] = value
            loaded.append(name)
        else:
            skipped.append(key)
    encoder.load_state_dict(target)
    if encoder.full_scale:
        with torch.no_grad():
            encoder.stem_full.weight.copy_(encoder.stem.weight)
    return loaded, skipped
