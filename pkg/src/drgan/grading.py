"""Grading backbone, per-grade latent Gaussians and the style mapping network."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from drgan import N_GRADES
from drgan.checkpoint import read_blob, write_blob
from drgan.data import Dataset, to_tensors
from drgan.errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)


class GradingAccuracyWarning(UserWarning):
    """Held-out grading accuracy fell below the configured gate."""


class GradingBackbone(nn.Module):
    """Small conv classifier over RGB images; ``features`` is the penultimate embedding."""

    def __init__(self, base_channels: int = 16, feature_dim: int = 128, n_classes: int = N_GRADES):
        super().__init__()
        b = base_channels
        widths = [b, 2 * b, 4 * b, 8 * b]
        layers, cin = [], 3
        for i, cout in enumerate(widths):
            layers += [
                nn.Conv2d(cin, cout, 3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            ]
            cin = cout
        layers += [nn.Conv2d(cin, feature_dim, 3, stride=2, padding=1), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.classifier = nn.Linear(feature_dim, n_classes)
        self.base_channels = base_channels
        self.feature_dim = feature_dim
        self.achieved_accuracy = float("nan")

    def features(self, x):
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.classifier(self.features(x))


def _batches(n, batch_size, generator=None, shuffle=True):
    order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def random_flips(x, generator=None):
    """Independent random horizontal and vertical flips per sample."""
    flip = torch.rand((x.shape[0], 2), generator=generator) < 0.5
    x = torch.where(flip[:, 0, None, None, None], x.flip(-1), x)
    return torch.where(flip[:, 1, None, None, None], x.flip(-2), x)


def train_classifier(
    dataset: Dataset,
    epochs: int = 5,
    lr: float = 1e-3,
    beta1: float = 0.5,
    batch_size: int = 64,
    base_channels: int = 16,
    feature_dim: int = 128,
    seed: int = 0,
    augment: bool = True,
) -> GradingBackbone:
    torch.manual_seed(seed)
    model = GradingBackbone(base_channels, feature_dim)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(beta1, 0.999))
    _, x, y = to_tensors(dataset)
    gen = torch.Generator().manual_seed(seed)
    steps = epochs * -(-len(y) // batch_size)
    # short desk schedules oscillate badly at a constant lr
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    model.train()
    for _ in range(epochs):
        for idx in _batches(len(y), batch_size, gen):
            if len(idx) < 2:
                continue  # BN needs >1 sample
            xb = x[idx]
            if augment:
                xb = random_flips(xb, gen)
            loss = F.cross_entropy(model(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
    model.eval()
    return model


@torch.no_grad()
def predict(model: nn.Module, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    model.eval()
    _, x, _ = to_tensors(dataset)
    out = [model(x[i : i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def stratified_split(grades, holdout: float, seed: int):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for g in range(N_GRADES):
        idx = np.flatnonzero(grades == g)
        rng.shuffle(idx)
        k = int(round(holdout * len(idx)))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        test += idx[:k].tolist()
        train += idx[k:].tolist()
    return sorted(train), sorted(test)


def _require_all_grades(dataset: Dataset, minimum: int = 1):
    counts = dataset.counts()
    missing = [g for g in range(N_GRADES) if counts[g] < minimum]
    if missing:
        raise ValidationError(
            f"grade(s) {missing} have fewer than {minimum} sample(s); counts per grade: {counts.tolist()}"
        )


def pretrain_grader(dataset: Dataset, config) -> GradingBackbone:
    """Train the grading backbone and record its held-out accuracy.

    ``config`` is a :class:`~drgan.config.TrainConfig`. Fires
    :class:`GradingAccuracyWarning` when accuracy is below ``config.accuracy_gate``.
    """
    _require_all_grades(dataset)
    train_idx, test_idx = stratified_split(dataset.grades, config.grader_holdout, config.seed)
    model = train_classifier(
        dataset.subset(train_idx),
        epochs=config.epochs_pretrain,
        lr=config.lr_pretrain,
        beta1=config.beta1,
        batch_size=config.batch_pretrain,
        base_channels=config.grader_base_channels,
        feature_dim=config.generator.style_dim,
        seed=config.seed,
    )
    held_out = dataset.subset(test_idx)
    acc = float(np.mean(predict(model, held_out) == held_out.grades)) if len(held_out) else float("nan")
    model.achieved_accuracy = acc
    log.info("grader held-out accuracy %.4f on %d samples", acc, len(held_out))
    if not acc >= config.accuracy_gate:
        warnings.warn(
            f"grader accuracy {acc:.4f} is below the {config.accuracy_gate:.2f} gate; "
            "grade spaces fitted from it may not steer synthesis",
            GradingAccuracyWarning,
            stacklevel=2,
        )
    return model


def save_grader(model: GradingBackbone, path) -> Path:
    """``grader.bin`` (weights) plus ``grader.json`` (architecture and held-out accuracy) under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_blob(model.state_dict(), path / "grader.bin")
    acc = model.achieved_accuracy
    meta = {
        "base_channels": model.base_channels,
        "feature_dim": model.feature_dim,
        "achieved_accuracy": None if np.isnan(acc) else acc,
    }
    (path / "grader.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_grader(path) -> GradingBackbone:
    path = Path(path)
    meta = json.loads((path / "grader.json").read_text())
    model = GradingBackbone(meta["base_channels"], meta["feature_dim"])
    model.load_state_dict(read_blob(path / "grader.bin"))
    acc = meta.get("achieved_accuracy")
    model.achieved_accuracy = float("nan") if acc is None else float(acc)
    return model.eval()


@dataclass
class GradeSpace:
    grade: int
    mu: np.ndarray
    sigma2: np.ndarray
    n_samples: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64)
        if self.mu.shape != self.sigma2.shape:
            raise ValidationError("mu and sigma2 must have the same length")
        if np.any(self.sigma2 < 0):
            raise ValidationError("sigma2 must be non-negative")
        if self.n_samples < 2:
            raise ValidationError(f"grade {self.grade} space needs >= 2 samples, got {self.n_samples}")


def fit_spaces_from_features(features, labels) -> list[GradeSpace]:
    """Plug-in (maximum likelihood) mean and diagonal variance per grade."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    spaces = []
    for g in range(N_GRADES):
        rows = features[labels == g]
        if len(rows) < 2:
            raise ValidationError(f"grade {g} has {len(rows)} sample(s); at least 2 are needed")
        spaces.append(GradeSpace(g, rows.mean(axis=0), rows.var(axis=0), len(rows)))
    return spaces


@torch.no_grad()
def extract_features(backbone: GradingBackbone, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    backbone.eval()
    _, x, _ = to_tensors(dataset)
    chunks = [backbone.features(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(chunks).double().numpy()


def fit_grading_spaces(backbone: GradingBackbone, dataset: Dataset) -> list[GradeSpace]:
    _require_all_grades(dataset, minimum=2)
    return fit_spaces_from_features(extract_features(backbone, dataset), dataset.grades)


def sample_grade_vector(space: GradeSpace, rng: np.random.Generator) -> np.ndarray:
    return space.mu + np.sqrt(space.sigma2) * rng.standard_normal(space.mu.shape)


def sample_grade_batch(spaces, grades, generator: torch.Generator | None = None, dtype=torch.float32):
    """Torch version of :func:`sample_grade_vector` for a batch of grade labels."""
    mu = torch.as_tensor(np.stack([s.mu for s in spaces]), dtype=dtype)
    sd = torch.as_tensor(np.sqrt(np.stack([s.sigma2 for s in spaces])), dtype=dtype)
    grades = torch.as_tensor(grades, dtype=torch.long)
    noise = torch.randn((len(grades), mu.shape[1]), generator=generator, dtype=dtype)
    return mu[grades] + sd[grades] * noise


def save_grade_spaces(spaces, path):
    payload = {
        str(s.grade): {"mu": s.mu.tolist(), "sigma2": s.sigma2.tolist(), "n": int(s.n_samples)}
        for s in spaces
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_grade_spaces(path) -> list[GradeSpace]:
    payload = json.loads(Path(path).read_text())
    return [
        GradeSpace(g, payload[str(g)]["mu"], payload[str(g)]["sigma2"], payload[str(g)]["n"])
        for g in range(N_GRADES)
    ]


class MappingNetwork(nn.Module):
    """Four affine layers with leaky ReLU between them; input is RMS-normalized."""

    n_layers = 4

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128):
        super().__init__()
        dims = [in_dim, hidden, hidden, hidden, out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = F.leaky_relu(z, 0.2)
        return z


def style_dim(block_widths) -> int:
    return 2 * sum(block_widths)


def split_styles(raw: torch.Tensor, block_widths):
    """Cut the mapping output into per-block ``(gamma, beta)``; gamma is offset by +1."""
    if raw.shape[-1] != style_dim(block_widths):
        raise ConfigurationError(
            f"mapping output has {raw.shape[-1]} entries, blocks need {style_dim(block_widths)}"
        )
    styles, offset = [], 0
    for width in block_widths:
        gamma = raw[..., offset : offset + width] + 1.0
        beta = raw[..., offset + width : offset + 2 * width]
        styles.append((gamma, beta))
        offset += 2 * width
    return styles


def map_to_styles(z, net: MappingNetwork, block_widths):
    if net.out_dim != style_dim(block_widths):
        raise ConfigurationError(
            f"mapping network emits {net.out_dim} values but blocks {tuple(block_widths)} need "
            f"{style_dim(block_widths)}"
        )
    return split_styles(net(z), block_widths)
