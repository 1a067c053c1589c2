"""Multi-scale conditional discriminators with a real/fake head and a grade head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from drgan import N_GRADES
from drgan.config import DiscConfig
from drgan.data import N_CONDITION_CHANNELS
from drgan.errors import ValidationError


@dataclass
class DiscOutput:
    rf_logit: torch.Tensor  # (B,)
    features: list  # one tensor per conv layer
    grade_logits: torch.Tensor  # (B, 5)


def build_pyramid(x: torch.Tensor, c: torch.Tensor, n_scales: int = 3) -> list[torch.Tensor]:
    """Concatenate condition and image, then 2x2 average-pool down ``n_scales - 1`` times."""
    if x.dim() != 4 or c.dim() != 4:
        raise ValidationError("build_pyramid expects (B, C, H, W) tensors")
    if x.shape[0] != c.shape[0] or x.shape[-2:] != c.shape[-2:]:
        raise ValidationError(f"image {tuple(x.shape)} and condition {tuple(c.shape)} do not line up")
    level = torch.cat([c, x], dim=1)
    levels = [level]
    for _ in range(n_scales - 1):
        level = F.avg_pool2d(level, 2)
        levels.append(level)
    return levels


class ScaleDiscriminator(nn.Module):
    def __init__(self, cfg: DiscConfig, in_channels: int = N_CONDITION_CHANNELS + 3):
        super().__init__()
        self.cfg = cfg
        convs, cin = [], in_channels
        for i in range(cfg.conv_layers):
            cout = cfg.base_channels * 2**i
            convs.append(nn.Conv2d(cin, cout, cfg.kernel, stride=cfg.stride, padding=(cfg.kernel - 1) // 2))
            cin = cout
        self.convs = nn.ModuleList(convs)
        self.rf_head = nn.Linear(cin, 1)
        self.grade_head = nn.Linear(cin, N_GRADES)

    def forward(self, x) -> DiscOutput:
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.cfg.leaky_slope)
            feats.append(x)
        pooled = x.mean(dim=(2, 3))
        return DiscOutput(self.rf_head(pooled).squeeze(1), feats, self.grade_head(pooled))


class MultiScaleDiscriminator(nn.Module):
    """``n_scales`` discriminators with identical architecture and separate parameters."""

    def __init__(self, cfg: DiscConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(ScaleDiscriminator(cfg) for _ in range(cfg.n_scales))

    def discriminate(self, pyramid) -> list[DiscOutput]:
        if len(pyramid) != len(self.scales):
            raise ValidationError(f"pyramid has {len(pyramid)} levels, expected {len(self.scales)}")
        return [d(level) for d, level in zip(self.scales, pyramid)]

    def forward(self, x, c) -> list[DiscOutput]:
        return self.discriminate(build_pyramid(x, c, self.cfg.n_scales))


def receptive_field(cfg: DiscConfig) -> int:
    """Receptive field, in input pixels of its own scale, of one last-layer unit."""
    rf, jump = 1, 1
    for _ in range(cfg.conv_layers):
        rf += (cfg.kernel - 1) * jump
        jump *= cfg.stride
    return rf


def receptive_area_fraction(cfg: DiscConfig, resolution: int, scale: int) -> float:
    """Receptive-field area of one last-layer unit at pyramid ``scale`` over the image area.

    Not clipped at 1: values above 1 mean the unit sees the whole (padded) image.
    """
    side = resolution / 2**scale
    return (receptive_field(cfg) / side) ** 2
