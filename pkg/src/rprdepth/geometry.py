"""Differentiable pinhole camera geometry.

All tensors follow the NCHW convention: depth maps are ``B x 1 x H x W``,
images ``B x C x H x W``, intrinsics ``B x 3 x 3`` (a single ``3 x 3`` matrix
is broadcast over the batch).
"""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ValidationError

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
MIN_PROJ_Z = 1e-3
# round-off slack when deciding whether a sample lies inside the image
INSIDE_TOL = 1e-4


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points from one camera frame into another."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """Apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


def disp_to_depth(disp, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Map a sigmoid disparity in (0, 1) onto depth in (min_depth, max_depth)."""
    if not 0 < min_depth < max_depth:
        raise ConfigError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    if isinstance(disp, torch.Tensor):
        if not torch.isfinite(disp).all():
            raise NumericError("non-finite disparity")
    elif not np.all(np.isfinite(disp)):
        raise NumericError("non-finite disparity")
    min_disp = 1.0 / max_depth
    max_disp = 1.0 / min_depth
    return 1.0 / (min_disp + (max_disp - min_disp) * disp)


def depth_to_disp(depth, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    min_disp = 1.0 / max_depth
    max_disp = 1.0 / min_depth
    return (1.0 / depth - min_disp) / (max_disp - min_disp)


def _batched_k(K, batch, like):
    K = torch.as_tensor(K, dtype=like.dtype, device=like.device)
    if K.dim() == 2:
        K = K.unsqueeze(0).expand(batch, 3, 3)
    return K


def pixel_grid(height, width, dtype=torch.float32, device=None):
    """Homogeneous pixel coordinates, shape 3 x (H*W), row-major."""
    ys, xs = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                            torch.arange(width, dtype=dtype, device=device), indexing="ij")
    ones = torch.ones_like(xs)
    return torch.stack([xs, ys, ones]).reshape(3, -1)


def backproject(depth, K):
    """Lift every pixel to a 3D camera-frame point: ``depth * K^-1 (u, v, 1)``.

    Returns a ``B x 3 x H x W`` point map.
    """
    b, _, h, w = depth.shape
    K = _batched_k(K, b, depth)
    rays = torch.linalg.inv(K) @ pixel_grid(h, w, depth.dtype, depth.device)
    points = rays * depth.reshape(b, 1, -1)
    return points.reshape(b, 3, h, w)


def project(points, K, rotation=None, translation=None):
    """Project a point map through ``K (R p + t)``.

    Returns ``(pix, valid)`` where ``pix`` is ``B x H x W x 2`` in pixel units
    and ``valid`` flags points with ``z > 1e-3`` after the transform.
    """
    b, _, h, w = points.shape
    K = _batched_k(K, b, points)
    p = points.reshape(b, 3, -1)
    if rotation is not None:
        p = torch.as_tensor(rotation, dtype=p.dtype).reshape(-1, 3, 3) @ p
    if translation is not None:
        p = p + torch.as_tensor(translation, dtype=p.dtype).reshape(-1, 3, 1)
    cam = K @ p
    z = cam[:, 2:3]
    valid = z > MIN_PROJ_Z
    # keep the division finite for flagged points; they are masked downstream
    safe_z = torch.where(valid, z, torch.ones_like(z))
    pix = cam[:, :2] / safe_z
    pix = pix.reshape(b, 2, h, w).permute(0, 2, 3, 1)
    return pix, valid.reshape(b, h, w)


def sample_bilinear(src, pix):
    """Bilinearly sample ``src`` at pixel coordinates, clamping at the border."""
    h, w = src.shape[-2:]
    gx = 2.0 * pix[..., 0] / max(w - 1, 1) - 1.0
    gy = 2.0 * pix[..., 1] / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(src, grid, mode="bilinear", padding_mode="border", align_corners=True)


def warp(src, depth, rotation, translation, K):
    """Inverse-warp ``src`` into the target view whose depth is ``depth``.

    ``rotation``/``translation`` map target-frame points into the source frame.
    Returns the synthesized image and a boolean mask that is false where the
    sample leaves the source image or the transformed point is behind the
    camera.
    """
    if src.shape[-2:] != depth.shape[-2:]:
        raise ValidationError(f"source {tuple(src.shape[-2:])} and depth "
                              f"{tuple(depth.shape[-2:])} resolutions differ")
    h, w = depth.shape[-2:]
    points = backproject(depth, K)
    pix, valid = project(points, K, rotation, translation)
    inside = ((pix[..., 0] >= -INSIDE_TOL) & (pix[..., 0] <= w - 1 + INSIDE_TOL)
              & (pix[..., 1] >= -INSIDE_TOL) & (pix[..., 1] <= h - 1 + INSIDE_TOL))
    out = sample_bilinear(src, pix)
    return out, (valid & inside).unsqueeze(1)


def axis_angle_to_matrix(vec):
    """Rodrigues' formula for ``B x 3`` axis-angle vectors, smooth at zero."""
    theta2 = (vec * vec).sum(-1, keepdim=True)
    small = theta2 < 1e-12
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    # Taylor expansions take over near the identity
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    x, y, z = vec.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(-1, 3, 3)
    eye = torch.eye(3, dtype=vec.dtype, device=vec.device).expand_as(skew)
    return eye + a.unsqueeze(-1) * skew + b.unsqueeze(-1) * (skew @ skew)


def psnr(a, b, mask=None, peak=1.0):
    """Peak signal-to-noise ratio in dB, optionally restricted to ``mask``."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    err = (a - b) ** 2
    if mask is not None:
        mask = torch.as_tensor(mask).expand_as(err)
        err = err[mask]
    mse = err.mean().item()
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak ** 2 / mse)
