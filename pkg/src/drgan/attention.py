"""Spatial + channel self-attention (SCA) used inside the synthesis blocks."""

import torch
import torch.nn as nn

from drgan.errors import ConfigurationError


def clip_reduction(channels: int, d: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``d``."""
    d = max(1, min(d, channels))
    while channels % d:
        d -= 1
    return d


def spatial_attention_map(query: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
    """(B, k, H, W) x2 -> (B, HW, HW); row i is a distribution over positions j."""
    b, k, h, w = key.shape
    q = query.reshape(b, k, h * w).transpose(1, 2)  # (B, HW, k)
    kk = key.reshape(b, k, h * w)  # (B, k, HW)
    return torch.softmax(torch.bmm(q, kk), dim=-1)


def channel_attention_map(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w = x.shape
    flat = x.reshape(b, c, h * w)
    return torch.softmax(torch.bmm(flat, flat.transpose(1, 2)), dim=-1)


class SpatialAttention(nn.Module):
    """Position-to-position attention with two reduced branches and a full-width value branch."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ConfigurationError(f"channels ({channels}) not divisible by reduction ({reduction})")
        inner = channels // reduction
        self.branch1 = nn.Conv2d(channels, inner, 1)
        self.branch2 = nn.Conv2d(channels, inner, 1)
        self.branch3 = nn.Conv2d(channels, channels, 1)

    def forward(self, x, return_map=False):
        b, c, h, w = x.shape
        attn = spatial_attention_map(self.branch2(x), self.branch1(x))
        value = self.branch3(x).reshape(b, c, h * w)
        out = x + torch.bmm(value, attn.transpose(1, 2)).reshape(b, c, h, w)
        return (out, attn) if return_map else out


class ChannelAttention(nn.Module):
    def forward(self, x, return_map=False):
        b, c, h, w = x.shape
        attn = channel_attention_map(x)
        out = x + torch.bmm(attn, x.reshape(b, c, h * w)).reshape(b, c, h, w)
        return (out, attn) if return_map else out


class SCA(nn.Module):
    """Weighted sum of the spatial and channel attended features, one conv each.

    The fusion weights start at zero, so a freshly built block emits zeros;
    the synthesis block adds it residually.
    """

    def __init__(self, channels: int, reduction: int, kernel_size: int = 3):
        super().__init__()
        self.spatial = SpatialAttention(channels, reduction)
        self.channel = ChannelAttention()
        pad = kernel_size // 2
        self.conv_s = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.conv_c = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.w_s = nn.Parameter(torch.zeros(()))
        self.w_c = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return self.w_s * self.conv_s(self.spatial(x)) + self.w_c * self.conv_c(self.channel(x))

    def debug_spatial_map(self, x):
        with torch.no_grad():
            return self.spatial(x, return_map=True)[1]


def spatial_attention(x, module: SpatialAttention):
    return module(x)


def channel_attention(x):
    return ChannelAttention()(x)


def sca_forward(x, module: SCA):
    return module(x)


def dirac_(conv: nn.Conv2d) -> nn.Conv2d:
    """Set ``conv`` to the identity map (used by tests and identity setups)."""
    with torch.no_grad():
        nn.init.dirac_(conv.weight)
        if conv.bias is not None:
            conv.bias.zero_()
    return conv


__all__ = [
    "SCA",
    "SpatialAttention",
    "ChannelAttention",
    "spatial_attention",
    "channel_attention",
    "sca_forward",
    "spatial_attention_map",
    "channel_attention_map",
    "clip_reduction",
    "dirac_",
]
