"""Lesion-presence head, existence gating, and presence-weighted losses."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DICE_EPS = 1e-5
PROB_EPS = 1e-7


class PresenceHead(nn.Module):
    """Per-lesion existence probabilities from the decoder's u2 feature.

    3x3x3 convolution + batch norm + rectifier, a 1x1x1 convolution to three
    channels, global average pooling, sigmoid.
    """

    def __init__(self, in_channels: int, num_classes: int = 3):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, in_channels, kernel_size=3, padding=1)
        self.norm = nn.BatchNorm3d(in_channels, momentum=0.1)
        self.project = nn.Conv3d(in_channels, num_classes, kernel_size=1)

    def forward(self, u2: torch.Tensor) -> torch.Tensor:
        z = F.relu(self.norm(self.conv(u2)))
        q = self.project(z)
        pooled = q.mean(dim=(-3, -2, -1))
        return torch.sigmoid(pooled)


def gate_segmentation(seg, presence):
    """Zero every probability channel whose presence score is <= 0.5.

    Channels with presence strictly above 0.5 are returned bit-identically.
    Works on numpy arrays or torch tensors; ``seg`` is (..., 3, D, H, W) and
    ``presence`` the matching (..., 3) scores.
    """
    if isinstance(seg, np.ndarray):
        presence = np.asarray(presence)
        keep = (presence > 0.5).reshape(presence.shape + (1, 1, 1))
        return np.where(keep, seg, np.zeros_like(seg))
    presence = torch.as_tensor(presence)
    keep = (presence > 0.5).reshape(presence.shape + (1, 1, 1))
    return torch.where(keep, seg, torch.zeros_like(seg))


def presence_weights(presence, y_cls):
    """Reliability weights |p - y| + 1, elementwise in (1, 2)."""
    return abs(presence - y_cls) + 1.0


def dice_loss_per_class(seg: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss per lesion class, averaged over the batch.

    Accepts (3, D, H, W) or (B, 3, D, H, W); returns a (3,) vector of
    1 - (2*overlap + eps) / (sum + eps) values.
    """
    if seg.ndim == 4:
        seg = seg.unsqueeze(0)
        target = target.unsqueeze(0)
    if seg.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(seg.shape)} vs {tuple(target.shape)}")
    s = seg.flatten(2)
    t = target.flatten(2)
    overlap = (s * t).sum(-1)
    denom = s.sum(-1) + t.sum(-1)
    loss = 1.0 - (2.0 * overlap + eps) / (denom + eps)  # (B, 3)
    return loss.mean(dim=0)


def weighted_dice_loss(seg: torch.Tensor, target: torch.Tensor, weights=None,
                       eps: float = DICE_EPS) -> torch.Tensor:
    """Presence-weighted Dice loss summed over the three lesion classes."""
    per_class = dice_loss_per_class(seg, target, eps)
    if weights is None:
        return per_class.sum()
    weights = torch.as_tensor(weights, dtype=per_class.dtype).reshape(-1)
    if weights.numel() != per_class.numel():
        raise ValueError("need one weight per lesion class")
    return (weights * per_class).sum()


def presence_bce(presence: torch.Tensor, y_cls, eps: float = PROB_EPS) -> torch.Tensor:
    """Mean binary cross-entropy of the three existence probabilities."""
    presence = torch.as_tensor(presence)
    target = torch.as_tensor(y_cls, dtype=presence.dtype)
    p = presence.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def lgrm_loss(seg_full, presence_full, seg_miss, presence_miss, target, y_cls,
              include_full: bool = True, include_miss: bool = True):
    """Sum of weighted Dice and presence BCE over both branches.

    Returns (total, parts) where parts holds the four addends. The include
    flags drop a branch's two terms, for ablation bookkeeping.
    """
    y = torch.as_tensor(y_cls, dtype=seg_miss.dtype if include_miss else seg_full.dtype)
    parts = {}
    total = None
    if include_full:
        w_full = presence_weights(presence_full.reshape(-1), y.reshape(-1))
        parts["dice_full"] = weighted_dice_loss(seg_full, target, w_full)
        parts["cls_full"] = presence_bce(presence_full, y)
        total = parts["dice_full"] + parts["cls_full"]
    if include_miss:
        w_miss = presence_weights(presence_miss.reshape(-1), y.reshape(-1))
        parts["dice_miss"] = weighted_dice_loss(seg_miss, target, w_miss)
        parts["cls_miss"] = presence_bce(presence_miss, y)
        miss_total = parts["dice_miss"] + parts["cls_miss"]
        total = miss_total if total is None else total + miss_total
    if total is None:
        raise ValueError("at least one branch must be included")
    return total, parts
