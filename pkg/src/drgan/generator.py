"""Two-stage conditional generator.

The global stage encodes the 8-channel condition map down to R/16, runs a
residual stack, then three synthesis blocks (grade-style injection, skip
fusion, SCA) bring it back up to R/2. The local enhancer encodes the
full-resolution condition, adds the global trunk features, and decodes to R.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from drgan import N_GRADES
from drgan.attention import SCA, clip_reduction
from drgan.config import GeneratorConfig
from drgan.data import N_CONDITION_CHANNELS
from drgan.errors import ConfigurationError, StateError, ValidationError

ADAIN_EPS = 1e-5


def adain(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """Instance-normalize ``x`` per sample and channel, then scale by gamma and shift by beta.

    The standard deviation is floored at ``eps`` so a constant channel maps to
    ``beta`` instead of dividing by zero.
    """
    mu = x.mean(dim=(2, 3), keepdim=True)
    sigma = x.std(dim=(2, 3), keepdim=True, unbiased=False).clamp_min(eps)
    if gamma.dim() == 1:
        gamma, beta = gamma.unsqueeze(0), beta.unsqueeze(0)
    return gamma[:, :, None, None] * (x - mu) / sigma + beta[:, :, None, None]


class AGM(nn.Module):
    """Noise concat, 1x1 fuse, then AdaIN with grade-derived (gamma, beta)."""

    def __init__(self, channels: int, noise_fraction: float = 0.25, noise_scale: float = 1.0):
        super().__init__()
        self.channels = channels
        self.noise_channels = max(1, int(round(channels * noise_fraction)))
        self.noise_scale = noise_scale
        self.fuse = nn.Conv2d(channels + self.noise_channels, channels, 1)

    def forward(self, feat, gamma, beta, rng=None):
        if gamma.shape[-1] != self.channels or beta.shape[-1] != self.channels:
            raise ValidationError(
                f"style length {gamma.shape[-1]}/{beta.shape[-1]} does not match {self.channels} channels"
            )
        b, _, h, w = feat.shape
        noise = torch.randn(
            (b, self.noise_channels, h, w), generator=rng, dtype=feat.dtype, device=feat.device
        )
        fused = self.fuse(torch.cat([feat, self.noise_scale * noise], dim=1))
        return adain(fused, gamma, beta)


class PlainNorm(nn.Module):
    """Stand-in for AGM when it is ablated: instance norm with its own affine."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, feat, gamma=None, beta=None, rng=None):
        return self.norm(feat)


def agm_inject(feat, style, rng, module: AGM):
    gamma, beta = style
    return module(feat, gamma, beta, rng)


@dataclass
class EncoderFeatures:
    levels: list  # strides 2, 4, 8, 16
    bottleneck: torch.Tensor


@dataclass
class GeneratedPair:
    mid_image: torch.Tensor
    full_image: torch.Tensor
    predicted_grade_logits: torch.Tensor


def _conv_bn_relu(cin, cout, k, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=False),
    )


class Encoder(nn.Module):
    def __init__(self, in_channels: int, base: int):
        super().__init__()
        widths = [base, 2 * base, 4 * base, 8 * base]
        layers, cin = [], in_channels
        for i, cout in enumerate(widths):
            layers.append(_conv_bn_relu(cin, cout, 7 if i == 0 else 3, 2))
            cin = cout
        self.layers = nn.ModuleList(layers)

    def forward(self, c):
        levels, x = [], c
        for layer in self.layers:
            x = layer(x)
            levels.append(x)
        return EncoderFeatures(levels, x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        return x + self.conv2(F.relu(self.bn(self.conv1(x))))


class SynthesisBlock(nn.Module):
    """AGM -> concat(skip, resized condition) -> conv -> +SCA -> transposed-conv upsample."""

    def __init__(self, channels, skip_channels, reduction, out_channels, cfg: GeneratorConfig):
        super().__init__()
        self.agm = AGM(channels, cfg.noise_fraction, cfg.noise_scale) if cfg.use_agm else PlainNorm(channels)
        self.merge = nn.Conv2d(channels + skip_channels + N_CONDITION_CHANNELS, channels, 3, padding=1)
        self.sca = SCA(channels, clip_reduction(channels, reduction)) if cfg.use_sca else None
        self.up = nn.ConvTranspose2d(channels, out_channels, 4, stride=2, padding=1)

    def forward(self, x, skip, cond, style, rng=None):
        x = self.agm(x, style[0], style[1], rng)
        x = F.relu(self.merge(torch.cat([x, skip, cond], dim=1)))
        if self.sca is not None:
            x = x + self.sca(x)
        return F.relu(self.up(x))


class OutputHead(nn.Module):
    def __init__(self, channels, skip_channels, cfg: GeneratorConfig):
        super().__init__()
        self.agm = AGM(channels, cfg.noise_fraction, cfg.noise_scale) if cfg.use_agm else PlainNorm(channels)
        self.merge = nn.Conv2d(channels + skip_channels + N_CONDITION_CHANNELS, channels, 3, padding=1)
        self.to_rgb = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, x, skip, cond, style, rng=None):
        """Returns pre-activation RGB; callers apply tanh."""
        x = self.agm(x, style[0], style[1], rng)
        x = F.relu(self.merge(torch.cat([x, skip, cond], dim=1)))
        return self.to_rgb(x)


class LocalEnhancer(nn.Module):
    """Full-resolution refinement: two convs in, additive fusion with the trunk, two transposed convs out.

    The output is a residual added (pre-tanh) to the upsampled global-stage
    image. ``to_rgb`` starts at zero, so the enhancer initially reproduces the
    stage-1 preview.
    """

    def __init__(self, base: int):
        super().__init__()
        half = max(1, base // 2)
        self.conv_in = nn.Conv2d(N_CONDITION_CHANNELS, half, 7, padding=3)
        self.conv_down = nn.Conv2d(half, base, 3, stride=2, padding=1)
        self.up = nn.ConvTranspose2d(base, half, 4, stride=2, padding=1)
        self.to_rgb = nn.ConvTranspose2d(half, 3, 3, stride=1, padding=1)
        nn.init.zeros_(self.to_rgb.weight)
        nn.init.zeros_(self.to_rgb.bias)

    def front(self, c):
        return self.conv_down(F.relu(self.conv_in(c)))

    def back(self, fused):
        return self.to_rgb(F.relu(self.up(F.relu(fused))))

    def forward(self, c, trunk, mid_logits):
        base = F.interpolate(mid_logits, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.tanh(base + self.back(self.front(c) + trunk))


def _resize(c, size):
    if c.shape[-1] == size:
        return c
    return F.interpolate(c, size=(size, size), mode="area")


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        w0, w1, w2, w3 = cfg.block_widths
        self.encoder = Encoder(N_CONDITION_CHANNELS, b)
        self.residuals = nn.ModuleList(ResidualBlock(w0) for _ in range(cfg.n_residual_blocks))
        d0, d1, d2 = cfg.sca_reductions
        self.blocks = nn.ModuleList(
            [
                SynthesisBlock(w0, w0, d0, w1, cfg),  # R/16 -> R/8
                SynthesisBlock(w1, w1, d1, w2, cfg),  # R/8 -> R/4
                SynthesisBlock(w2, w2, d2, w3, cfg),  # R/4 -> R/2
            ]
        )
        self.head = OutputHead(w3, b, cfg)
        self.grade_head = nn.Conv2d(w0, N_GRADES, 3, padding=1)
        self.enhancer = LocalEnhancer(b)
        self._captured = None

    @property
    def block_widths(self):
        return self.cfg.block_widths

    def global_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("enhancer.")]

    def local_parameters(self):
        return list(self.enhancer.parameters())

    def set_enhancer_trainable(self, flag: bool):
        for p in self.enhancer.parameters():
            p.requires_grad_(flag)

    def encode(self, c) -> EncoderFeatures:
        if c.dim() != 4 or c.shape[1] != N_CONDITION_CHANNELS:
            raise ValidationError(f"condition must be (B, {N_CONDITION_CHANNELS}, R, R), got {tuple(c.shape)}")
        if c.shape[-1] != self.cfg.full_resolution or c.shape[-2] != self.cfg.full_resolution:
            raise ValidationError(
                f"condition spatial size {tuple(c.shape[-2:])} != full_resolution {self.cfg.full_resolution}"
            )
        return self.encoder(c)

    def residual_stack(self, x):
        for block in self.residuals:
            x = block(x)
        return x

    def synthesize_mid(self, c, feats: EncoderFeatures, styles, rng=None):
        """Returns ``(mid_image, trunk)``; ``trunk`` is the last transposed-conv output at R/2."""
        if len(styles) != len(self.blocks) + 1:
            raise ConfigurationError(f"expected {len(self.blocks) + 1} styles, got {len(styles)}")
        x = self.residual_stack(feats.bottleneck)
        skips = feats.levels[::-1]  # R/16, R/8, R/4, R/2
        for block, skip, style in zip(self.blocks, skips, styles):
            x = block(x, skip, _resize(c, skip.shape[-1]), style, rng)
        trunk = x
        mid_logits = self.head(trunk, skips[3], _resize(c, trunk.shape[-1]), styles[-1], rng)
        self._captured = (trunk, mid_logits)
        return torch.tanh(mid_logits), trunk

    def enhance(self, c, trunk=None, mid_logits=None):
        """Full-resolution output from the trunk captured by the last :meth:`synthesize_mid` call."""
        if trunk is None or mid_logits is None:
            captured = getattr(self, "_captured", None)
            if captured is None:
                raise StateError("enhance() needs global-stage features; run synthesize_mid first")
            trunk, mid_logits = captured
        return self.enhancer(c, trunk, mid_logits)

    def predict_grade(self, c, feats: EncoderFeatures | None = None):
        if feats is None:
            feats = self.encode(c)
        return self.grade_head(feats.bottleneck).mean(dim=(2, 3))

    def forward(self, c, styles, rng=None, use_enhancer=True) -> GeneratedPair:
        feats = self.encode(c)
        mid, trunk = self.synthesize_mid(c, feats, styles, rng)
        mid_logits = self._captured[1]
        self._captured = None
        if use_enhancer:
            full = self.enhance(c, trunk, mid_logits)
        else:
            # stage-1 preview: the enhancer is frozen, upsample the mid output
            full = torch.tanh(F.interpolate(mid_logits, scale_factor=2, mode="bilinear", align_corners=False))
        return GeneratedPair(mid, full, self.predict_grade(c, feats))
