"""Differentiable pinhole-camera geometry and view synthesis.

Coordinate conventions, fixed once for the whole package:

* Pixel coordinates (u, v) index (column, row). Pixel centers sit at
  integer coordinates, so an H x W image spans [0, W-1] x [0, H-1].
* Camera frame: x right, y down, z forward. Depth is the camera-frame
  z coordinate in meters.
* ``Transform`` maps target-camera points to source-camera points
  (the target-to-source direction): X_s = linear @ X_t + translation.

All operations are pure tensor functions, preserve the dtype of their
inputs, and are differentiable wherever the underlying math is.
"""

from dataclasses import dataclass

import torch

from .augmentation import CropSpec

# Points with camera-frame z at or below this are flagged invalid instead
# of being divided by near-zero depths.
Z_EPS = 1e-3

# Slack on the in-bounds test so that exact round trips keep border pixels
# valid despite floating-point residue.
BOUNDS_EPS = 1e-6

_DET_TOL = 1e-9

STEREO_SIDES = ("left-to-right", "right-to-left")


def _as_param(value, dtype, device):
    """Intrinsic parameter as a (B, 1, 1, 1)-broadcastable tensor."""
    t = torch.as_tensor(value, dtype=dtype, device=device)
    return t.reshape(-1, 1, 1, 1)


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels. Fields may be floats or (B,) tensors."""

    f_x: object
    f_y: object
    c_x: object
    c_y: object
    width: int
    height: int

    def __post_init__(self):
        f_x = torch.as_tensor(self.f_x, dtype=torch.float64)
        f_y = torch.as_tensor(self.f_y, dtype=torch.float64)
        c_x = torch.as_tensor(self.c_x, dtype=torch.float64)
        c_y = torch.as_tensor(self.c_y, dtype=torch.float64)
        if not (f_x > 0).all() or not (f_y > 0).all():
            raise ValueError("focal lengths must be positive")
        if not ((c_x >= 0).all() and (c_x < self.width).all()):
            raise ValueError("c_x must lie in [0, width)")
        if not ((c_y >= 0).all() and (c_y < self.height).all()):
            raise ValueError("c_y must lie in [0, height)")

    def matrix(self, dtype=torch.float32, device=None):
        """3x3 intrinsic matrix (batched if the fields are batched)."""
        fx = torch.as_tensor(self.f_x, dtype=dtype, device=device).reshape(-1)
        fy = torch.as_tensor(self.f_y, dtype=dtype, device=device).reshape(-1)
        cx = torch.as_tensor(self.c_x, dtype=dtype, device=device).reshape(-1)
        cy = torch.as_tensor(self.c_y, dtype=dtype, device=device).reshape(-1)
        b = max(fx.numel(), cx.numel())
        out = torch.zeros(b, 3, 3, dtype=dtype, device=device)
        out[:, 0, 0] = fx
        out[:, 1, 1] = fy
        out[:, 0, 2] = cx
        out[:, 1, 2] = cy
        out[:, 2, 2] = 1.0
        return out if b > 1 else out[0]


@dataclass
class Transform:
    """A linear map plus translation on camera-space points.

    Rigid poses are the special case where ``linear`` is a rotation;
    rectified poses of zoomed crops are generally not rigid, so no
    orthonormality is assumed anywhere.
    """

    linear: torch.Tensor       # (..., 3, 3)
    translation: torch.Tensor  # (..., 3)

    def __post_init__(self):
        if self.linear.shape[-2:] != (3, 3):
            raise ValueError("linear part must have shape (..., 3, 3)")
        if self.translation.shape[-1] != 3:
            raise ValueError("translation must have shape (..., 3)")
        det = torch.linalg.det(self.linear.detach().double())
        if (det.abs() <= _DET_TOL).any():
            raise ValueError("linear part is numerically singular")

    @classmethod
    def identity(cls, batch=(), dtype=torch.float32, device=None):
        eye = torch.eye(3, dtype=dtype, device=device).expand(*batch, 3, 3)
        t = torch.zeros(*batch, 3, dtype=dtype, device=device)
        return cls(eye.clone(), t)

    @classmethod
    def from_axisangle(cls, axisangle, translation):
        """Rigid transform from an axis-angle rotation (Rodrigues) and translation."""
        theta = axisangle.norm(dim=-1, keepdim=True)
        axis = axisangle / theta.clamp(min=1e-12)
        x, y, z = axis.unbind(-1)
        zero = torch.zeros_like(x)
        skew = torch.stack(
            [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
        ).reshape(*x.shape, 3, 3)
        cos = theta.cos().unsqueeze(-1)
        sin = theta.sin().unsqueeze(-1)
        outer = axis.unsqueeze(-1) * axis.unsqueeze(-2)
        eye = torch.eye(3, dtype=axisangle.dtype, device=axisangle.device)
        rot = cos * eye + (1.0 - cos) * outer + sin * skew
        return cls(rot, translation)

    def apply(self, points):
        """Map per-pixel points (B, 3, H, W) through the transform."""
        b, c, h, w = points.shape
        if c != 3:
            raise ValueError("points must have 3 channels")
        lin = self.linear.reshape(-1, 3, 3)
        t = self.translation.reshape(-1, 3)
        flat = points.reshape(b, 3, h * w)
        out = torch.bmm(lin.expand(b, 3, 3), flat) + t.reshape(-1, 3, 1)
        return out.reshape(b, 3, h, w)

    def compose(self, other):
        """Transform equivalent to applying ``other`` first, then ``self``."""
        lin = self.linear @ other.linear
        t = (self.linear @ other.translation.unsqueeze(-1)).squeeze(-1) + self.translation
        return Transform(lin, t)

    def inverse(self):
        inv = torch.linalg.inv(self.linear)
        t = -(inv @ self.translation.unsqueeze(-1)).squeeze(-1)
        return Transform(inv, t)

    def matrix(self):
        """Homogeneous (..., 4, 4) matrix."""
        batch = self.linear.shape[:-2]
        out = torch.zeros(*batch, 4, 4, dtype=self.linear.dtype, device=self.linear.device)
        out[..., :3, :3] = self.linear
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out


@dataclass
class PixelGrid:
    """Per-pixel sampling coordinates in source-image pixel units.

    ``valid`` is False where the projected point fell at or behind the
    camera plane; those coordinates are finite placeholders and must not
    be sampled as real correspondences.
    """

    coords: torch.Tensor  # (B, H, W, 2)
    valid: torch.Tensor   # (B, 1, H, W) bool


def check_depth(depth):
    """Reject depth maps with non-positive or non-finite entries."""
    if not torch.isfinite(depth).all():
        raise ValueError("depth map contains non-finite entries")
    if (depth <= 0).any():
        raise ValueError("depth map contains non-positive entries")


def backproject(depth, intrinsics):
    """Lift a depth map (B, 1, H, W) to camera-space points (B, 3, H, W).

    The point at pixel (u, v) is depth * ((u-c_x)/f_x, (v-c_y)/f_y, 1).
    """
    check_depth(depth)
    b, c, h, w = depth.shape
    if c != 1:
        raise ValueError("depth map must have a single channel")
    dtype, device = depth.dtype, depth.device
    fx = _as_param(intrinsics.f_x, dtype, device)
    fy = _as_param(intrinsics.f_y, dtype, device)
    cx = _as_param(intrinsics.c_x, dtype, device)
    cy = _as_param(intrinsics.c_y, dtype, device)
    u = torch.arange(w, dtype=dtype, device=device).reshape(1, 1, 1, w)
    v = torch.arange(h, dtype=dtype, device=device).reshape(1, 1, h, 1)
    dir_x = (u - cx) / fx
    dir_y = (v - cy) / fy
    ones = torch.ones(1, 1, h, w, dtype=dtype, device=device)
    dirs = torch.cat(
        [dir_x.expand(b, 1, h, w), dir_y.expand(b, 1, h, w), ones.expand(b, 1, h, w)], dim=1
    )
    return depth * dirs


def project(points, transform, intrinsics):
    """Reproject camera-space points into another view's pixel coordinates.

    Returns a ``PixelGrid``; pixels whose transformed z is at or below
    ``Z_EPS`` are flagged invalid rather than raising.
    """
    if not torch.isfinite(points).all():
        raise ValueError("points contain non-finite entries")
    moved = transform.apply(points)
    z = moved[:, 2:3]
    valid = z > Z_EPS
    z_safe = z.clamp(min=Z_EPS)
    dtype, device = points.dtype, points.device
    fx = _as_param(intrinsics.f_x, dtype, device)
    fy = _as_param(intrinsics.f_y, dtype, device)
    cx = _as_param(intrinsics.c_x, dtype, device)
    cy = _as_param(intrinsics.c_y, dtype, device)
    u = fx * moved[:, 0:1] / z_safe + cx
    v = fy * moved[:, 1:2] / z_safe + cy
    coords = torch.cat([u, v], dim=1).permute(0, 2, 3, 1)
    return PixelGrid(coords=coords, valid=valid)


def identity_pixel_grid(batch, height, width, dtype=torch.float32, device=None):
    """The grid that samples every pixel from itself."""
    u = torch.arange(width, dtype=dtype, device=device)
    v = torch.arange(height, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    coords = torch.stack([uu, vv], dim=-1).expand(batch, height, width, 2)
    valid = torch.ones(batch, 1, height, width, dtype=torch.bool, device=device)
    return PixelGrid(coords=coords.clone(), valid=valid)


def bilinear_sample(image, grid):
    """Sample an image (B, C, H, W) at grid coordinates.

    Coordinates outside [0, W-1] x [0, H-1] are clamped to the border.
    Pixels flagged invalid by the grid produce 0. Returns the sampled
    image and a validity mask that is True only where the grid was valid
    and the coordinates were in bounds. Differentiable w.r.t. both the
    image and the grid coordinates.
    """
    if isinstance(grid, PixelGrid):
        coords, z_valid = grid.coords, grid.valid
    else:
        coords, z_valid = grid, None
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite entries")
    b, c, h, w = image.shape
    if coords.shape[0] != b or coords.shape[-1] != 2:
        raise ValueError("grid shape does not match image batch")
    x = coords[..., 0]
    y = coords[..., 1]
    in_bounds = (
        (x >= -BOUNDS_EPS) & (x <= w - 1 + BOUNDS_EPS)
        & (y >= -BOUNDS_EPS) & (y <= h - 1 + BOUNDS_EPS)
    )
    xc = x.clamp(0, w - 1)
    yc = y.clamp(0, h - 1)
    x0 = xc.floor()
    y0 = yc.floor()
    wx = (xc - x0).unsqueeze(1)
    wy = (yc - y0).unsqueeze(1)
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *yi.shape[1:])

    v00 = gather(y0l, x0l)
    v01 = gather(y0l, x1l)
    v10 = gather(y1l, x0l)
    v11 = gather(y1l, x1l)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)

    mask = in_bounds.unsqueeze(1)
    if z_valid is not None:
        out = out * z_valid.to(out.dtype)
        mask = mask & z_valid
    return out, mask


def synthesize_view(source, depth_t, transform, intrinsics):
    """Reconstruct the target view by warping a source image.

    Composition of backprojection with the target depth, the
    target-to-source transform, projection, and bilinear sampling.
    Returns the synthesized image and its validity mask.
    """
    if source.shape[-2:] != depth_t.shape[-2:]:
        raise ValueError("source image and depth map resolutions differ")
    if source.shape[0] != depth_t.shape[0]:
        raise ValueError("source image and depth map batch sizes differ")
    points = backproject(depth_t, intrinsics)
    grid = project(points, transform, intrinsics)
    return bilinear_sample(source, grid)


def rectification_matrix(crop: CropSpec, intrinsics, dtype=torch.float32, device=None):
    """Camera-space map from the original view to a zoomed-crop view.

    A view magnified by f_s sees the same scene f_s times closer, so the
    bottom-right entry divides depths by the zoom factor. The off-diagonal
    entries re-center on the crop: (p_x, p_y) is the original-frame point
    that the resize maps onto the cropped image's principal point.
    """
    f_s = crop.scale_factor
    if f_s <= 0:
        raise ValueError("scale factor must be positive")
    fx = torch.as_tensor(intrinsics.f_x, dtype=dtype, device=device).reshape(-1)
    fy = torch.as_tensor(intrinsics.f_y, dtype=dtype, device=device).reshape(-1)
    cx = torch.as_tensor(intrinsics.c_x, dtype=dtype, device=device).reshape(-1)
    cy = torch.as_tensor(intrinsics.c_y, dtype=dtype, device=device).reshape(-1)
    # Preimage under the resize convention u_resized = f_s * (u + 0.5) - 0.5.
    p_x = (crop.x0 + cx + 0.5) / f_s - 0.5
    p_y = (crop.y0 + cy + 0.5) / f_s - 0.5
    a = (cx - p_x) / fx
    c = (cy - p_y) / fy
    b = max(fx.numel(), cx.numel())
    out = torch.zeros(b, 3, 3, dtype=dtype, device=device)
    out[:, 0, 0] = 1.0
    out[:, 1, 1] = 1.0
    out[:, 0, 2] = a
    out[:, 1, 2] = c
    out[:, 2, 2] = 1.0 / f_s
    return out


def rectify_pose(transform: Transform, crop: CropSpec, intrinsics) -> Transform:
    """Relative pose between two views that both went through the same zoomed crop.

    Conjugates the linear part with the rectification matrix and maps the
    translation through it. The result is generally not a rigid pose and
    must be used through the general ``Transform`` path.
    """
    dtype = transform.linear.dtype
    device = transform.linear.device
    r_c = rectification_matrix(crop, intrinsics, dtype=dtype, device=device)
    f_s = crop.scale_factor
    # Analytic inverse of [[1, 0, a], [0, 1, c], [0, 0, 1/f_s]].
    r_c_inv = torch.zeros_like(r_c)
    r_c_inv[:, 0, 0] = 1.0
    r_c_inv[:, 1, 1] = 1.0
    r_c_inv[:, 0, 2] = -r_c[:, 0, 2] * f_s
    r_c_inv[:, 1, 2] = -r_c[:, 1, 2] * f_s
    r_c_inv[:, 2, 2] = f_s
    lin = transform.linear.reshape(-1, 3, 3)
    t = transform.translation.reshape(-1, 3)
    b = max(lin.shape[0], r_c.shape[0])
    lin = lin.expand(b, 3, 3)
    t = t.expand(b, 3)
    r_c = r_c.expand(b, 3, 3)
    r_c_inv = r_c_inv.expand(b, 3, 3)
    new_lin = r_c @ lin @ r_c_inv
    new_t = (r_c @ t.unsqueeze(-1)).squeeze(-1)
    if transform.linear.dim() == 2 and b == 1:
        return Transform(new_lin[0], new_t[0])
    return Transform(new_lin, new_t)


def stereo_pose(baseline, side="left-to-right", dtype=torch.float32, device=None) -> Transform:
    """Target-to-source transform of a rectified stereo pair with known baseline.

    ``left-to-right`` means the target is the left camera and the source
    the right one; a point fixed in the world then moves by -baseline
    along x between the two camera frames.
    """
    if side not in STEREO_SIDES:
        raise ValueError(f"side must be one of {STEREO_SIDES}")
    b = torch.as_tensor(baseline, dtype=dtype, device=device).reshape(-1)
    if (b <= 0).any():
        raise ValueError("baseline must be positive")
    sign = -1.0 if side == "left-to-right" else 1.0
    n = b.numel()
    lin = torch.eye(3, dtype=dtype, device=device).expand(n, 3, 3).clone()
    t = torch.zeros(n, 3, dtype=dtype, device=device)
    t[:, 0] = sign * b
    if n == 1 and not torch.is_tensor(baseline):
        return Transform(lin[0], t[0])
    return Transform(lin, t)
