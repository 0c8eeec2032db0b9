"""Prior depth fusion: retrieval of reference-bank pixels and their fusion
into the student feature map.

Shapes: student features are flattened to ``B x M x C_s``; the bank holds
``R`` rows of raw teacher features (``C_t``), matched features (``C_s``)
and depths.
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


def flatten_features(fmap):
    """``B x C x H x W`` -> ``B x (H*W) x C``."""
    b, c, h, w = fmap.shape
    return fmap.reshape(b, c, h * w).transpose(1, 2)


def unflatten_features(rows, height, width):
    b, m, c = rows.shape
    if m != height * width:
        raise ValidationError(f"{m} rows cannot form a {height}x{width} map")
    return rows.transpose(1, 2).reshape(b, c, height, width)


def compute_affinity(F_s, F_r):
    """Row-stochastic affinity between student pixels and bank rows.

    ``F_s`` is ``(B x) M x C``, ``F_r`` is ``R x C``; logits are scaled by
    ``1/sqrt(C)`` before the softmax over the bank dimension.
    """
    if F_s.shape[-1] != F_r.shape[-1]:
        raise ValidationError(f"channel mismatch: student {F_s.shape[-1]} vs bank {F_r.shape[-1]}")
    logits = F_s @ F_r.transpose(-1, -2) / math.sqrt(F_s.shape[-1])
    return torch.softmax(logits, dim=-1)


def construct_reference(A, features_raw, depths):
    """Affinity-weighted mixtures of bank features and depths.

    Returns ``(F_c, D_c)`` with shapes ``(B x) M x C_t`` and ``(B x) M``.
    """
    R = A.shape[-1]
    if features_raw.shape[0] != R or depths.shape[0] != R:
        raise ValidationError(f"affinity has {R} columns but the bank has "
                              f"{features_raw.shape[0]} features / {depths.shape[0]} depths")
    return A @ features_raw, A @ depths


class DepthHintAttention(nn.Module):
    """Multi-head attention with student pixels as queries and raw bank
    features as keys and values.

    Keys and values are projected once per call and shared across the batch,
    which keeps the cost at ``O(B*M*R*C)`` rather than re-projecting the bank
    for every batch element.
    """

    def __init__(self, c_s, c_t, heads=4):
        super().__init__()
        if c_s % heads:
            raise ConfigError(f"{heads} heads do not divide {c_s} channels")
        self.heads = heads
        self.head_dim = c_s // heads
        self.q_proj = nn.Linear(c_s, c_s)
        self.k_proj = nn.Linear(c_t, c_s)
        self.v_proj = nn.Linear(c_t, c_s)
        self.out_proj = nn.Linear(c_s, c_s)

    def forward(self, F_s, f_r):
        """Returns ``F_d`` (``B x M x C_s``) and per-head weights ``B x h x M x R``."""
        squeeze = F_s.dim() == 2
        if squeeze:
            F_s = F_s.unsqueeze(0)
        b, m, _ = F_s.shape
        r = f_r.shape[0]
        h, d = self.heads, self.head_dim
        q = self.q_proj(F_s).reshape(b, m, h, d).transpose(1, 2)  # B x h x M x d
        k = self.k_proj(f_r).reshape(r, h, d).transpose(0, 1)  # h x R x d
        v = self.v_proj(f_r).reshape(r, h, d).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, m, h * d)
        out = self.out_proj(out)
        if squeeze:
            return out[0], weights[0]
        return out, weights


def log_depth_channel(D_c):
    """Log of the constructed depth, centred per sample (``B x M``)."""
    logd = torch.log(D_c)
    return logd - logd.mean(dim=-1, keepdim=True)


class FusionHead(nn.Module):
    """3x3 convolution compressing ``[F_s + F_d ; F_c ; log D_c]`` back to C_s."""

    def __init__(self, c_s, c_t):
        super().__init__()
        self.conv = nn.Conv2d(c_s + c_t + 1, c_s, 3, padding=1, padding_mode="reflect")

    def forward(self, F_s, F_d, F_c, D_c):
        b, c, h, w = F_s.shape
        m = h * w
        for name, t in (("F_d", F_d), ("F_c", F_c)):
            if t.shape[:2] != (b, m):
                raise ValidationError(f"{name} layout {tuple(t.shape)} does not match {b}x{m}")
        if D_c.shape != (b, m):
            raise ValidationError(f"D_c layout {tuple(D_c.shape)} does not match {b}x{m}")
        residual = F_s + unflatten_features(F_d, h, w)
        stacked = torch.cat([residual, unflatten_features(F_c, h, w),
                             log_depth_channel(D_c).reshape(b, 1, h, w)], dim=1)
        return self.conv(stacked)


def fuse(head, F_s, F_d, F_c, D_c):
    return head(F_s, F_d, F_c, D_c)


class PriorDepthFusion(nn.Module):
    """Depth-hint attention plus pixel-wise reference construction."""

    def __init__(self, c_s, c_t, heads=4):
        super().__init__()
        self.attention = DepthHintAttention(c_s, c_t, heads)
        self.head = FusionHead(c_s, c_t)

    def forward(self, F_s_map, F_r, features_raw, depths):
        """Fuse a ``B x C_s x H x W`` map with bank rows.

        ``F_r`` are the dimension-matched bank features used for the affinity.
        Returns a dict with ``F_o``, ``A``, ``attention``, ``F_c`` and ``D_c``
        (the latter reshaped to ``B x 1 x H x W``).
        """
        b, _, h, w = F_s_map.shape
        F_s = flatten_features(F_s_map)
        A = compute_affinity(F_s, F_r)
        F_d, attn = self.attention(F_s, features_raw)
        F_c, D_c = construct_reference(A, features_raw, depths)
        F_o = self.head(F_s_map, F_d, F_c, D_c)
        return {"F_o": F_o, "A": A, "attention": attn, "F_d": F_d, "F_c": F_c,
                "D_c": D_c.reshape(b, 1, h, w)}
