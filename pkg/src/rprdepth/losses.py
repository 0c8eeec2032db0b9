"""Training objectives: photometric reconstruction, gradient-signature
consistency against pseudo labels, the constructed-depth auxiliary term and
their weighted sum."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ValidationError
from .geometry import MAX_DEPTH, MIN_DEPTH, disp_to_depth, warp

SSIM_WEIGHT = 0.85
SMOOTH_WEIGHT = 1e-3
# reprojection must beat the unwarped source by this margin to be kept
AUTOMASK_MARGIN = 1e-5
INVALID_ERROR = 1e3
# mean depth (meters) that warping depths are rescaled to when the global
# scale is left to the pose network
SCALE_REFERENCE = 10.0


class SSIM(nn.Module):
    """Per-pixel SSIM dissimilarity ``(1 - SSIM) / 2`` over 3x3 windows."""

    def __init__(self):
        super().__init__()
        self.pool = nn.AvgPool2d(3, 1)
        self.pad = nn.ReflectionPad2d(1)
        self.C1 = 0.01 ** 2
        self.C2 = 0.03 ** 2

    def forward(self, x, y):
        x = self.pad(x)
        y = self.pad(y)
        mu_x = self.pool(x)
        mu_y = self.pool(y)
        sigma_x = self.pool(x ** 2) - mu_x ** 2
        sigma_y = self.pool(y ** 2) - mu_y ** 2
        sigma_xy = self.pool(x * y) - mu_x * mu_y
        n = (2 * mu_x * mu_y + self.C1) * (2 * sigma_xy + self.C2)
        d = (mu_x ** 2 + mu_y ** 2 + self.C1) * (sigma_x + sigma_y + self.C2)
        return torch.clamp((1 - n / d) / 2, 0, 1)


_ssim = SSIM()


def photometric_error(pred, target):
    """``0.85 * (1 - SSIM) / 2 + 0.15 * L1``, averaged over channels -> B x 1 x H x W."""
    l1 = (pred - target).abs().mean(1, keepdim=True)
    ssim = _ssim(pred, target).mean(1, keepdim=True)
    return SSIM_WEIGHT * ssim + (1 - SSIM_WEIGHT) * l1


def smoothness_loss(disp, image):
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    disp = disp / (disp.mean(dim=(2, 3), keepdim=True) + 1e-7)
    grad_x = (disp[:, :, :, :-1] - disp[:, :, :, 1:]).abs()
    grad_y = (disp[:, :, :-1, :] - disp[:, :, 1:, :]).abs()
    img_x = (image[:, :, :, :-1] - image[:, :, :, 1:]).abs().mean(1, keepdim=True)
    img_y = (image[:, :, :-1, :] - image[:, :, 1:, :]).abs().mean(1, keepdim=True)
    return (grad_x * torch.exp(-img_x)).mean() + (grad_y * torch.exp(-img_y)).mean()


def resize(x, size):
    """Bicubic resize of a ``B x C x H x W`` map; identity when already sized."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bicubic", align_corners=False)


def upsample_disp(disp, size):
    # bicubic overshoot must not leave the sigmoid range
    return resize(disp, size).clamp(1e-6, 1.0)


def reconstruction_loss(disp, target, sources, poses, K, min_depth=MIN_DEPTH,
                        max_depth=MAX_DEPTH, smooth_weight=SMOOTH_WEIGHT, normalize_scale=False,
                        return_details=False):
    """Minimum-reprojection photometric loss with auto-masking.

    ``disp`` may be at lower resolution than ``target``; it is upsampled
    bicubically first. ``sources`` is a list of source images and ``poses`` a
    matching list of ``(R, t)`` taking target-frame points into each source.

    With ``normalize_scale`` the batch's depths are rescaled jointly to a mean
    of ``SCALE_REFERENCE`` before warping. Monocular training cannot observe
    the global scale; pinning it keeps depth and learned translation from
    drifting together into the saturated ends of the sigmoid, while relative
    scale between samples stays meaningful for the pose network.
    """
    if not sources or len(sources) != len(poses):
        raise ValidationError("reconstruction needs at least one source frame with a pose")
    disp_up = upsample_disp(disp, target.shape[-2:])
    depth = disp_to_depth(disp_up, min_depth, max_depth)
    warp_depth = depth
    if normalize_scale:
        warp_depth = depth * (SCALE_REFERENCE / depth.mean())

    reproj, identity = [], []
    for src, (R, t) in zip(sources, poses):
        warped, valid = warp(src, warp_depth, R, t, K)
        err = photometric_error(warped, target)
        reproj.append(torch.where(valid, err, torch.full_like(err, INVALID_ERROR)))
        identity.append(photometric_error(src, target))
    reproj = torch.cat(reproj, 1).min(1, keepdim=True)[0]
    identity = torch.cat(identity, 1).min(1, keepdim=True)[0]
    # auto-masking: static-looking pixels contribute their (depth independent)
    # identity error, so shrinking the mask is never rewarded
    mask = reproj + AUTOMASK_MARGIN < identity
    photo = torch.where(mask, reproj, identity).mean()
    smooth = smoothness_loss(disp_up, target)
    loss = photo + smooth_weight * smooth
    if return_details:
        return loss, {"photometric": photo, "smoothness": smooth, "mask": mask,
                      "depth": depth, "disp": disp_up}
    return loss


def _forward_diff(D):
    gx = F.pad(D[..., :, 1:] - D[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(D[..., 1:, :] - D[..., :-1, :], (0, 0, 0, 1))
    return gx, gy


def _normalize(G):
    # exact scale invariance: divide by the mean magnitude, constant maps stay 0
    m = G.abs().mean(dim=tuple(range(1, G.dim())), keepdim=True)
    zero = m == 0
    return torch.where(zero, torch.zeros_like(G), G / torch.where(zero, torch.ones_like(m), m))


def gradient_signature(D):
    """Sum of mean-normalised forward-difference gradients along x and y."""
    if D.dim() == 2:
        return gradient_signature(D[None, None])[0, 0]
    gx, gy = _forward_diff(D)
    return _normalize(gx) + _normalize(gy)


def consistency_loss(depth, pseudo):
    """Mean absolute difference of gradient signatures (scale/shift invariant)."""
    depth = resize(depth, pseudo.shape[-2:])
    if depth.shape != pseudo.shape:
        raise ValidationError(f"cannot compare {tuple(depth.shape)} with {tuple(pseudo.shape)}")
    return (gradient_signature(depth) - gradient_signature(pseudo)).abs().mean()


def auxiliary_loss(D_c, pseudo):
    """L1 between the pseudo label and the bicubically upsampled constructed depth."""
    if D_c.dim() == 2:
        D_c = D_c[None, None]
    if pseudo.dim() == 2:
        pseudo = pseudo[None, None]
    return (pseudo - resize(D_c, pseudo.shape[-2:])).abs().mean()


@dataclass
class LossBreakdown:
    l_vp: torch.Tensor
    l_c: torch.Tensor
    l_aux: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float

    def as_floats(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_vp", "l_c", "l_aux", "total")}


def total_loss(l_vp, l_c, l_aux, alpha=1.0, beta=0.1):
    if alpha < 0 or beta < 0:
        raise ConfigError(f"loss weights must be non-negative, got alpha={alpha}, beta={beta}")
    parts = {"l_vp": l_vp, "l_c": l_c, "l_aux": l_aux}
    for name, value in parts.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"non-finite loss component {name}")
    total = alpha * l_vp + beta * l_c + l_aux
    return LossBreakdown(l_vp, l_c, l_aux, total, alpha, beta)
