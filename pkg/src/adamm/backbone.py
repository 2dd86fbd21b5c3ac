"""Compact 3D encoder-decoder shared by teacher and student.

The encoder stacks a stem convolution, three stride-2 downsampling stages,
and a bottleneck stage (1/8 resolution, 8x base channels). The decoder first
convolves the fused penultimate+bottleneck tensor at 1/8 resolution, then
upsamples three times with skip concatenations down to a 3-channel head.

The student carries an adapter bank: one small residual block per
(insertion slot, modality combination) for the 14 non-full combinations at
each of the 7 slots (three down stages, bottleneck, three up stages). A fresh
adapter is an exact identity because its restoring convolution starts at zero.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bbdm import fuse_encoder_bottleneck
from .volumes import ModalityCombination, enumerate_combinations

ADAPTER_SLOTS = ("down1", "down2", "down3", "bottleneck", "up1", "up2", "up3")


@dataclass
class BackboneConfig:
    base_channels: int = 8
    depth: int = 3
    in_channels: int = 4
    out_classes: int = 3
    adapter_reduction: int = 2

    def __post_init__(self):
        if self.depth != 3:
            raise ValueError("depth is fixed at 3 (adapters sit at 3 down + 3 up + bottleneck)")
        if self.base_channels < 1 or self.adapter_reduction < 1:
            raise ValueError("base_channels and adapter_reduction must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return 8 * self.base_channels

    def slot_channels(self) -> dict:
        b = self.base_channels
        return {
            "down1": 2 * b,
            "down2": 4 * b,
            "down3": 8 * b,
            "bottleneck": 8 * b,
            "up1": 4 * b,
            "up2": 2 * b,
            "up3": b,
        }


@dataclass
class FeatureBundle:
    """Intermediate features one forward pass exposes to the loss modules."""

    skips: list  # full-res, 1/2, 1/4 encoder features
    penult: torch.Tensor  # second downsampling stage output (1/4 grid)
    bottleneck: torch.Tensor  # 1/8 grid, 8x base channels
    enc_fused: torch.Tensor = None  # pooled penult ++ bottleneck, as fed to the decoder
    dec_first: torch.Tensor = None  # first decoder convolution output (1/8 grid)
    u2: torch.Tensor = None  # second-upsampling decoder feature (1/2 grid)
    logits: torch.Tensor = None  # (B, 3, D, H, W)
    adapter_deltas: dict = field(default_factory=dict)  # slot -> residual output


class AdapterBlock(nn.Module):
    """Channel-reduce 1x1x1 -> 3x3x3 -> channel-restore 1x1x1 residual delta.

    ``forward`` returns only the delta so callers can record it; the host adds
    it back. The restore conv is zero-initialized.
    """

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Conv3d(channels, hidden, kernel_size=1)
        self.mix = nn.Conv3d(hidden, hidden, kernel_size=3, padding=1)
        self.restore = nn.Conv3d(hidden, channels, kernel_size=1)
        nn.init.zeros_(self.restore.weight)
        nn.init.zeros_(self.restore.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.restore(self.mix(self.reduce(x)))


class AdapterBank(nn.Module):
    """98 adapters: 7 slots x 14 non-full modality combinations."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.codes = tuple(c.code for c in enumerate_combinations() if not c.is_full)
        blocks = {}
        for slot, channels in cfg.slot_channels().items():
            for code in self.codes:
                blocks[f"{slot}:{code}"] = AdapterBlock(channels, cfg.adapter_reduction)
        self.blocks = nn.ModuleDict(blocks)
        self.access_count = 0

    def adapter(self, slot: str, code: str) -> AdapterBlock:
        if code == "1111":
            raise KeyError("no adapter exists for the full combination")
        self.access_count += 1
        return self.blocks[f"{slot}:{code}"]

    def parameter_vector(self, slot: str, code: str) -> np.ndarray:
        block = self.blocks[f"{slot}:{code}"]
        with torch.no_grad():
            return torch.cat([p.flatten() for p in block.parameters()]).double().cpu().numpy()


def adapter_similarity(bank: AdapterBank, slot: str) -> np.ndarray:
    """14x14 cosine-similarity matrix of flattened adapter parameters.

    Rows/columns follow the combination enumeration order (full excluded).
    Raises on a zero-norm parameter vector.
    """
    if slot not in ADAPTER_SLOTS:
        raise ValueError(f"unknown slot {slot!r}")
    vectors = np.stack([bank.parameter_vector(slot, code) for code in bank.codes])
    norms = np.linalg.norm(vectors, axis=1)
    if (norms == 0).any():
        bad = [bank.codes[i] for i in np.flatnonzero(norms == 0)]
        raise ValueError(f"zero-norm adapter parameters for combinations {bad}")
    unit = vectors / norms[:, None]
    return unit @ unit.T


class _ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)
        # Running-stat decay 0.9.
        self.norm = nn.BatchNorm3d(out_ch, momentum=0.1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Backbone(nn.Module):
    """UNet-style 3D network; the student variant owns an adapter bank."""

    def __init__(self, cfg: BackboneConfig = None, with_adapters: bool = False):
        super().__init__()
        cfg = cfg or BackboneConfig()
        self.cfg = cfg
        b = cfg.base_channels
        self.stem = _ConvBlock(cfg.in_channels, b)
        self.down1 = _ConvBlock(b, 2 * b, stride=2)
        self.down2 = _ConvBlock(2 * b, 4 * b, stride=2)
        self.down3 = _ConvBlock(4 * b, 8 * b, stride=2)
        self.bott = _ConvBlock(8 * b, 8 * b)
        self.dec0 = _ConvBlock(12 * b, 8 * b)
        self.up1 = nn.ConvTranspose3d(8 * b, 4 * b, kernel_size=2, stride=2)
        self.dec1 = _ConvBlock(8 * b, 4 * b)
        self.up2 = nn.ConvTranspose3d(4 * b, 2 * b, kernel_size=2, stride=2)
        self.dec2 = _ConvBlock(4 * b, 2 * b)
        self.up3 = nn.ConvTranspose3d(2 * b, b, kernel_size=2, stride=2)
        self.dec3 = _ConvBlock(2 * b, b)
        self.head = nn.Conv3d(b, cfg.out_classes, kernel_size=1)
        if with_adapters:
            self.adapters = AdapterBank(cfg)
            # Bias-free so all-zero adapter deltas fuse to an all-zero CF.
            self.cf_proj = nn.ModuleDict(
                {
                    slot: nn.Conv3d(ch, cfg.bottleneck_channels, kernel_size=1, bias=False)
                    for slot, ch in cfg.slot_channels().items()
                }
            )
        else:
            self.adapters = None
            self.cf_proj = None

    def _apply_adapter(self, slot, x, combo, use_adapters, deltas):
        if self.adapters is None or not use_adapters or combo.is_full:
            return x
        delta = self.adapters.adapter(slot, combo.code)(x)
        deltas[slot] = delta
        return x + delta

    def encode(self, x: torch.Tensor, combo: ModalityCombination, use_adapters: bool = False) -> FeatureBundle:
        """Run the encoder; input spatial dims must be divisible by 8."""
        if any(s % 8 for s in x.shape[-3:]):
            raise ValueError(f"input dims {tuple(x.shape[-3:])} not divisible by 8")
        deltas = {}
        s0 = self.stem(x)
        d1 = self._apply_adapter("down1", self.down1(s0), combo, use_adapters, deltas)
        d2 = self._apply_adapter("down2", self.down2(d1), combo, use_adapters, deltas)
        d3 = self._apply_adapter("down3", self.down3(d2), combo, use_adapters, deltas)
        bt = self._apply_adapter("bottleneck", self.bott(d3), combo, use_adapters, deltas)
        return FeatureBundle(skips=[s0, d1, d2], penult=d2, bottleneck=bt, adapter_deltas=deltas)

    def decode(self, bundle: FeatureBundle, combo: ModalityCombination, use_adapters: bool = False) -> FeatureBundle:
        """Complete a bundle from :meth:`encode` (whose bottleneck may have been refined)."""
        deltas = dict(bundle.adapter_deltas)
        enc_fused = fuse_encoder_bottleneck(bundle.penult, bundle.bottleneck)
        dec_first = self.dec0(enc_fused)
        x = self.dec1(torch.cat([self.up1(dec_first), bundle.skips[2]], dim=1))
        x = self._apply_adapter("up1", x, combo, use_adapters, deltas)
        x = self.dec2(torch.cat([self.up2(x), bundle.skips[1]], dim=1))
        u2 = self._apply_adapter("up2", x, combo, use_adapters, deltas)
        x = self.dec3(torch.cat([self.up3(u2), bundle.skips[0]], dim=1))
        x = self._apply_adapter("up3", x, combo, use_adapters, deltas)
        logits = self.head(x)
        return dataclasses.replace(
            bundle, enc_fused=enc_fused, dec_first=dec_first, u2=u2, logits=logits,
            adapter_deltas=deltas,
        )

    def combination_features(self, bundle: FeatureBundle, combo: ModalityCombination) -> torch.Tensor:
        """Fuse the recorded adapter deltas into one bottleneck-grid field.

        Deltas are resampled to the bottleneck grid (average-pool when finer,
        trilinear when coarser), projected to the bottleneck channel count,
        and summed. The full combination fires no adapters and yields zeros.
        """
        if self.cf_proj is None:
            raise RuntimeError("combination features require the adapter-bank variant")
        target = bundle.bottleneck.shape[-3:]
        out = torch.zeros_like(bundle.bottleneck)
        for slot, delta in bundle.adapter_deltas.items():
            grid = delta.shape[-3:]
            if grid != target:
                if all(g >= t for g, t in zip(grid, target)):
                    delta = F.adaptive_avg_pool3d(delta, target)
                else:
                    delta = F.interpolate(delta, size=target, mode="trilinear", align_corners=False)
            out = out + self.cf_proj[slot](delta)
        return out
