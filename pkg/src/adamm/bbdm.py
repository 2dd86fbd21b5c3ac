"""Bottleneck distillation: tri-Gram style matching and the feature discriminator.

Gram matrices follow the channel-correlation convention: a (C, ...) feature
field is flattened to (C, N) and paired fields X, Y give M = X Y^T / N. This
keeps teacher/student matrices conformant regardless of grid size and makes
the style loss invariant to any spatial permutation shared by a pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PROB_EPS = 1e-7


def fuse_encoder_bottleneck(penult: torch.Tensor, bottleneck: torch.Tensor) -> torch.Tensor:
    """Max-pool the penultimate encoder feature by 2 and concat with the bottleneck.

    ``penult`` must live on a grid exactly twice the bottleneck's per axis.
    """
    if tuple(penult.shape[-3:]) != tuple(2 * s for s in bottleneck.shape[-3:]):
        raise ValueError(
            f"resolution mismatch: penult grid {tuple(penult.shape[-3:])} is not "
            f"2x bottleneck grid {tuple(bottleneck.shape[-3:])}"
        )
    pooled = F.max_pool3d(penult, kernel_size=2)
    return torch.cat([pooled, bottleneck], dim=-4)


def _flatten_channels(feat: torch.Tensor) -> torch.Tensor:
    if feat.ndim < 2:
        raise ValueError("feature must have a channel dimension")
    return feat.reshape(feat.shape[0], -1)


@dataclass
class GramTriple:
    """Pairwise style matrices of (enc-fused, bottleneck, dec-first) features."""

    m1: torch.Tensor  # enc x dec
    m2: torch.Tensor  # enc x bottleneck
    m3: torch.Tensor  # dec x bottleneck

    def matrices(self):
        return (self.m1, self.m2, self.m3)


def gram_triple(f_enc: torch.Tensor, f_t: torch.Tensor, f_dec: torch.Tensor) -> GramTriple:
    """Channel Gram matrices of the three bottleneck-adjacent features.

    Inputs are single-case (C, ...) fields; channel counts may differ but the
    flattened spatial count N must be shared.
    """
    enc, t, dec = (_flatten_channels(f) for f in (f_enc, f_t, f_dec))
    n = enc.shape[1]
    if t.shape[1] != n or dec.shape[1] != n:
        raise ValueError(
            f"spatial count mismatch: enc={n}, t={t.shape[1]}, dec={dec.shape[1]}"
        )
    return GramTriple(
        m1=enc @ dec.T / n,
        m2=enc @ t.T / n,
        m3=dec @ t.T / n,
    )


def gsme_loss(teacher: GramTriple, student: GramTriple, theta: float = 1.0) -> torch.Tensor:
    """Style-matching loss: scaled squared Gram differences, teacher detached.

    Each matrix difference is normalized by 4 * rows * cols (the square-matrix
    4n^2 form, generalized to rectangular pairs).
    """
    total = None
    for mt, ms in zip(teacher.matrices(), student.matrices()):
        if mt.shape != ms.shape:
            raise ValueError(f"gram shape mismatch: {tuple(mt.shape)} vs {tuple(ms.shape)}")
        rows, cols = mt.shape
        term = ((mt.detach() - ms) ** 2).sum() / (4.0 * rows * cols)
        total = term if total is None else total + term
    return theta * total


class Discriminator(nn.Module):
    """Teacher/student feature classifier on the bottleneck grid.

    Two stride-2 convolutions, global average pooling, an affine map, and a
    sigmoid; output is one probability per batch item.
    """

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, in_channels, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv3d(in_channels, in_channels, kernel_size=3, stride=2, padding=1)
        self.classify = nn.Linear(in_channels, 1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = self.conv2(self.conv1(feat))
        x = F.adaptive_avg_pool3d(x, 1).flatten(1)
        return torch.sigmoid(self.classify(x)).squeeze(-1)


def adversarial_loss(d_teacher, d_student, eps: float = PROB_EPS) -> torch.Tensor:
    """log(1 - D(teacher)) + log(D(student)), probabilities clamped to [eps, 1-eps]."""
    d_teacher = torch.as_tensor(d_teacher)
    d_student = torch.as_tensor(d_student, dtype=d_teacher.dtype)
    dt = d_teacher.clamp(eps, 1.0 - eps)
    ds = d_student.clamp(eps, 1.0 - eps)
    return (torch.log(1.0 - dt) + torch.log(ds)).mean()


def discriminator_bce(d_teacher, d_student, eps: float = PROB_EPS) -> torch.Tensor:
    """Discriminator's own objective: teacher labeled 1, student labeled 0."""
    d_teacher = torch.as_tensor(d_teacher)
    d_student = torch.as_tensor(d_student, dtype=d_teacher.dtype)
    dt = d_teacher.clamp(eps, 1.0 - eps)
    ds = d_student.clamp(eps, 1.0 - eps)
    return -(torch.log(dt) + torch.log(1.0 - ds)).mean() / 2.0


def bbdm_loss(l_adv, l_gsme, lam: float = 1.0, theta: float = 1.0):
    """Combined distillation loss ``lam * adv + theta * gsme``."""
    return lam * l_adv + theta * l_gsme
