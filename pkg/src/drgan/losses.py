"""Adversarial, feature-matching, perceptual and focal grade losses and their weighted totals.

Reductions are fixed so the default weights (10, 10, 1) keep their meaning:
mean over the batch, sum over discriminator scales, mean over layers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from drgan import N_GRADES
from drgan.config import Ablation, LossConfig
from drgan.errors import NumericError, ValidationError


@dataclass
class LossReport:
    adv_d: float = 0.0
    adv_g: float = 0.0
    feat_match: float = 0.0
    perceptual: float = 0.0
    cls_real: float = 0.0
    cls_fake: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0
    grade_pred: float = 0.0

    def as_dict(self):
        return asdict(self)

    @classmethod
    def fields(cls):
        return list(asdict(cls()).keys())


def _check_finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values entering {name}")


def adversarial_terms(d_real, d_fake):
    """Returns ``(adv_d, adv_g)``; ``adv_g`` is the non-saturating generator form."""
    adv_d = 0.0
    adv_g = 0.0
    for real, fake in zip(d_real, d_fake, strict=True):
        _check_finite("adversarial_terms", real.rf_logit, fake.rf_logit)
        # -log sigmoid(t) = softplus(-t); -log(1 - sigmoid(t)) = softplus(t)
        adv_d = adv_d + F.softplus(-real.rf_logit).mean() + F.softplus(fake.rf_logit).mean()
        adv_g = adv_g + F.softplus(-fake.rf_logit).mean()
    return adv_d, adv_g


def generator_adversarial(d_fake):
    total = 0.0
    for fake in d_fake:
        _check_finite("generator_adversarial", fake.rf_logit)
        total = total + F.softplus(-fake.rf_logit).mean()
    return total


def discriminator_adversarial(d_real, d_fake):
    return adversarial_terms(d_real, d_fake)[0]


def feature_matching(d_real, d_fake):
    """Per-sample L2 distance between real and fake features.

    Reduced as mean over batch, mean over layers, sum over scales. Real features
    are detached so only the fake path carries gradient.
    """
    total = 0.0
    for real, fake in zip(d_real, d_fake, strict=True):
        if len(real.features) != len(fake.features):
            raise ValidationError("real and fake feature lists differ in length")
        per_layer = []
        for fr, ff in zip(real.features, fake.features):
            if fr.shape != ff.shape:
                raise ValidationError(f"feature shapes differ: {tuple(fr.shape)} vs {tuple(ff.shape)}")
            diff = (ff - fr.detach()).flatten(1)
            per_layer.append(torch.linalg.vector_norm(diff, dim=1).mean())
        total = total + torch.stack(per_layer).mean()
    return total


class PerceptualNet(nn.Module):
    """Fixed randomly initialized conv stack; every ReLU output is a tap.

    Stand-in for a pretrained extractor. Any module whose ``forward`` returns a
    list of feature tensors can be passed to :func:`perceptual` instead.
    """

    def __init__(self, seed: int = 1234, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for i, cout in enumerate(widths):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                bound = (6.0 / (cin * 9)) ** 0.5
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=gen) * 2 - 1) * bound)
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        taps = []
        for conv in self.layers:
            x = F.relu(conv(x))
            taps.append(x)
        return taps

    def train(self, mode: bool = True):
        return super().train(False)


def perceptual(x_real, x_fake, net):
    """Mean absolute feature difference, averaged over the extractor's layers."""
    with torch.no_grad():
        real_feats = net(x_real)
    fake_feats = net(x_fake)
    terms = [(ff - fr).abs().mean() for fr, ff in zip(real_feats, fake_feats, strict=True)]
    return torch.stack(terms).mean()


def focal(logits, y, gamma_f: float = 2.0, alpha=1.0):
    """Mean over the batch of ``-alpha_y (1 - p_y)^gamma log p_y``.

    ``alpha`` is a scalar or a per-class weight vector.
    """
    y = torch.as_tensor(y, dtype=torch.long, device=logits.device)
    if y.numel() and (y.min() < 0 or y.max() >= logits.shape[-1]):
        raise ValidationError(f"labels must lie in 0..{logits.shape[-1] - 1}")
    _check_finite("focal", logits)
    logp = F.log_softmax(logits, dim=-1).gather(1, y[:, None]).squeeze(1)
    p = logp.exp()
    if torch.is_tensor(alpha) and alpha.dim() > 0:
        a = alpha.to(logits.dtype)[y]
    else:
        a = alpha
    return (-a * (1.0 - p) ** gamma_f * logp).mean()


def class_balanced_alpha(counts, n_classes: int = N_GRADES) -> torch.Tensor:
    """Inverse-frequency weights normalized to mean 1 over the classes present."""
    counts = torch.as_tensor(counts, dtype=torch.float64)
    w = torch.where(counts > 0, counts.sum() / (n_classes * counts.clamp_min(1)), torch.zeros(()))
    present = counts > 0
    return (w / w[present].mean()).float()


def grade_classification(d_outputs, y, gamma_f, alpha):
    return sum(focal(o.grade_logits, y, gamma_f, alpha) for o in d_outputs)


def total(losses, w: LossConfig, ablation: Ablation | None = None):
    """Weighted combination; ``losses`` maps component names to values.

    The classification terms only enter the discriminator total; the generator
    receives no grade-classification gradient.
    """
    ablation = ablation or Ablation()
    perceptual_term = 0.0 if ablation.no_perceptual else losses["perceptual"]
    cls_real = 0.0 if ablation.no_cls else losses["cls_real"]
    cls_fake = 0.0 if ablation.no_cls else losses["cls_fake"]
    total_g = losses["adv_g"] + w.lambda1 * losses["feat_match"] + w.lambda2 * perceptual_term
    total_d = losses["adv_d"] + w.lambda3 * (cls_real + cls_fake)
    return total_g, total_d
