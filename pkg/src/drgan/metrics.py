"""Evaluation: FID over a seeded random-conv embedding, Laplacian-pyramid SWD,
quadratic weighted kappa, per-class TPR and the augmentation A/B harness.

FID square roots go through symmetric eigendecompositions in float64.
Eigenvalues of the symmetrized product above ``-EIG_CLIP_TOL * max(1, |lambda_max|)``
are clipped to zero; anything more negative raises :class:`NumericError`.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats

from drgan import N_GRADES
from drgan.data import Dataset, to_tensors
from drgan.errors import NumericError, ValidationError

log = logging.getLogger(__name__)

EIG_CLIP_TOL = 1e-8

SWD_LEVELS = 3
SWD_PATCH = 7
SWD_PATCHES_PER_IMAGE = 128
SWD_PROJECTIONS = 64
SWD_MIN_IMAGES = 16


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingSet:
    features: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if self.features.ndim != 2:
            raise ValidationError(f"features must be N x F, got shape {self.features.shape}")
        if self.features.shape[0] < 2:
            raise ValidationError("an embedding set needs at least 2 rows")
        if not np.isfinite(self.features).all():
            raise ValidationError(f"non-finite features in embedding set {self.source!r}")

    def __len__(self):
        return self.features.shape[0]


class RandomConvEmbedding(nn.Module):
    """Fixed seeded conv stack; the embedding concatenates each layer's global-average-pooled ReLU map.

    With the default widths the embedding is 64-dimensional. Any module
    mapping (N,3,R,R) images in [-1,1] to (N,F) can replace it.
    """

    def __init__(self, seed: int = 2024, widths=(16, 16, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, cin = [], 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (cin * 9)))
                conv.bias.copy_(torch.randn(cout, generator=gen) * 0.1)
            layers.append(conv)
            cin = cout
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, x):
        pooled = []
        for conv in self.layers:
            x = F.relu(conv(x))
            pooled.append(x.mean(dim=(2, 3)))
        return torch.cat(pooled, dim=1)


def _images_tensor(images) -> torch.Tensor:
    """Dataset, (N,H,W,3) array in [0,1], or (N,3,H,W) tensor in [-1,1] -> float32 tensor in [-1,1]."""
    if isinstance(images, Dataset):
        return to_tensors(images)[1]
    if torch.is_tensor(images):
        return images.float()
    arr = np.asarray(images, dtype=np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2) * 2.0 - 1.0


def embed(images, net: nn.Module | None = None, source: str = "", batch_size: int = 128) -> EmbeddingSet:
    net = net if net is not None else RandomConvEmbedding()
    x = _images_tensor(images)
    with torch.no_grad():
        feats = [net(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return EmbeddingSet(torch.cat(feats).double().numpy(), source)


# ----------------------------------------------------------------------- FID


def _sym_eig_clipped(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    floor = -EIG_CLIP_TOL * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < floor:
        raise NumericError(f"{what}: eigenvalue {vals.min():.3e} is too negative to clip")
    return np.clip(vals, 0.0, None), vecs


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = _sym_eig_clipped(m, "covariance")
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Frechet distance between N(mu1, cov1) and N(mu2, cov2).

    ``Tr((C1 C2)^{1/2})`` equals ``Tr((C1^{1/2} C2 C1^{1/2})^{1/2})``; the
    latter is symmetric PSD so its square root is an eigendecomposition.
    """
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    s1 = _sqrtm_psd(cov1)
    vals, _ = _sym_eig_clipped(s1 @ cov2 @ s1, "covariance product")
    tr_cross = np.sqrt(vals).sum()
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross)
    return max(d, 0.0)


def gaussian_stats(a: EmbeddingSet):
    return a.features.mean(axis=0), np.atleast_2d(np.cov(a.features, rowvar=False))


def fid(a: EmbeddingSet, b: EmbeddingSet) -> float:
    if a.features.shape[1] != b.features.shape[1]:
        raise ValidationError(f"feature widths differ: {a.features.shape[1]} vs {b.features.shape[1]}")
    f = a.features.shape[1]
    if min(len(a), len(b)) < f:
        warnings.warn(
            f"FID with fewer samples ({min(len(a), len(b))}) than feature dims ({f}); covariances are singular",
            RuntimeWarning,
            stacklevel=2,
        )
    return frechet_distance(*gaussian_stats(a), *gaussian_stats(b))


def per_grade_fid(real: Dataset, fake: Dataset, net: nn.Module | None = None) -> tuple[float, list[float]]:
    """FID computed per grade, then the unweighted mean over grades present in both sets."""
    net = net if net is not None else RandomConvEmbedding()
    per = []
    for g in range(N_GRADES):
        r = real.subset(np.flatnonzero(real.grades == g))
        s = fake.subset(np.flatnonzero(fake.grades == g))
        if len(r) < 2 or len(s) < 2:
            per.append(float("nan"))
            continue
        per.append(fid(embed(r, net, f"real/g{g}"), embed(s, net, f"fake/g{g}")))
    return float(np.nanmean(per)), per


# ----------------------------------------------------------------------- SWD

_BINOMIAL = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=torch.float64) / 16.0


def _blur(x: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    k = (_BINOMIAL[:, None] * _BINOMIAL[None, :]).to(x.dtype).expand(c, 1, 5, 5)
    return F.conv2d(F.pad(x, (2, 2, 2, 2), mode="reflect"), k, groups=c)


def laplacian_pyramid(x: torch.Tensor, levels: int = SWD_LEVELS) -> list[torch.Tensor]:
    """Band-pass levels from fine to coarse; the last entry is the low-pass residual.

    A spatially constant offset leaves every band untouched and moves only the residual.
    """
    out, cur = [], x
    for _ in range(levels - 1):
        down = _blur(cur)[:, :, ::2, ::2]
        up = F.interpolate(down, size=cur.shape[-2:], mode="bilinear", align_corners=False)
        out.append(cur - up)
        cur = down
    out.append(cur)
    return out


@dataclass
class PatchBank:
    levels: list  # per level: (n_patches, C * k * k) float64


def _extract_patches(level: torch.Tensor, per_image: int, k: int, rng: np.random.Generator) -> np.ndarray:
    n, c, h, w = level.shape
    if h < k or w < k:
        raise ValidationError(f"pyramid level {h}x{w} is smaller than the {k}x{k} patch")
    ys = rng.integers(0, h - k + 1, size=(n, per_image))
    xs = rng.integers(0, w - k + 1, size=(n, per_image))
    arr = level.numpy()
    off = np.arange(k)
    rows = ys[:, :, None, None] + off[None, None, :, None]
    cols = xs[:, :, None, None] + off[None, None, None, :]
    img = np.arange(n)[:, None, None, None]
    # (n, per_image, k, k, c) -> (n * per_image, c, k, k)
    patches = arr.transpose(0, 2, 3, 1)[img, rows, cols]
    return patches.transpose(0, 1, 4, 2, 3).reshape(n * per_image, c, k * k)


def build_patch_bank(images, seed: int, levels=SWD_LEVELS, k=SWD_PATCH, per_image=SWD_PATCHES_PER_IMAGE) -> PatchBank:
    """Raw (unstandardized) patches per pyramid level; positions depend only on ``seed`` and shapes."""
    x = _images_tensor(images).double()
    rng = np.random.default_rng(seed)
    return PatchBank([_extract_patches(lv, per_image, k, rng) for lv in laplacian_pyramid(x, levels)])


def _standardize(p: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((p - mean[None, :, None]) / std[None, :, None]).reshape(len(p), -1)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, directions: np.ndarray) -> float:
    """Mean over directions of the 1-D W1 distance between equal-size projected samples."""
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    return float(np.abs(pa - pb).mean())


@dataclass
class SWDResult:
    per_level: list[float]
    avg: float

    def formatted(self, x1000: bool = True) -> dict:
        s = 1e3 if x1000 else 1.0
        return {"swd_per_level": [v * s for v in self.per_level], "swd_avg": self.avg * s}


def swd(real_images, fake_images, n_projections: int = SWD_PROJECTIONS, rng=0, levels: int = SWD_LEVELS) -> SWDResult:
    """Multi-scale sliced Wasserstein distance between two image sets.

    Patch channels are standardized with the mean and std of the *real* bank
    at each level so both sets share one coordinate system. ``rng`` is a seed
    or a numpy Generator; the same seed gives the same patch positions for
    same-shaped sets.
    """
    xa, xb = _images_tensor(real_images), _images_tensor(fake_images)
    if xa.shape[1:] != xb.shape[1:]:
        raise ValidationError(f"image shapes differ: {tuple(xa.shape[1:])} vs {tuple(xb.shape[1:])}")
    if min(len(xa), len(xb)) < SWD_MIN_IMAGES:
        raise ValidationError(f"SWD needs at least {SWD_MIN_IMAGES} images per side")
    if isinstance(rng, np.random.Generator):
        seed = int(rng.integers(2**63 - 1))
    else:
        seed = int(rng)
    children = np.random.SeedSequence(seed).spawn(3)
    bank_seed = int(children[0].generate_state(1)[0])
    bank_a = build_patch_bank(xa, bank_seed, levels)
    bank_b = build_patch_bank(xb, bank_seed, levels)
    sub_rng = np.random.default_rng(children[1])
    dir_rng = np.random.default_rng(children[2])

    per_level = []
    for pa, pb in zip(bank_a.levels, bank_b.levels):
        mean = pa.mean(axis=(0, 2))
        std = np.maximum(pa.std(axis=(0, 2)), 1e-8)
        a, b = _standardize(pa, mean, std), _standardize(pb, mean, std)
        n = min(len(a), len(b))
        if len(a) > n:
            a = a[np.sort(sub_rng.choice(len(a), n, replace=False))]
        if len(b) > n:
            b = b[np.sort(sub_rng.choice(len(b), n, replace=False))]
        dirs = dir_rng.standard_normal((n_projections, a.shape[1]))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        per_level.append(sliced_wasserstein(a, b, dirs))
    return SWDResult(per_level, float(np.mean(per_level)))


# ------------------------------------------------------------ classification


def _check_labels(pred, truth, n_classes):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValidationError(f"pred and truth lengths differ: {len(pred)} vs {len(truth)}")
    if len(pred) < 1:
        raise ValidationError("need at least one label")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValidationError(f"{name} labels must lie in 0..{n_classes - 1}")
    return pred, truth


def confusion_matrix(pred, truth, n_classes: int = N_GRADES) -> np.ndarray:
    """``O[i, j]`` counts samples with truth ``i`` predicted as ``j``."""
    pred, truth = _check_labels(pred, truth, n_classes)
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def quadratic_weighted_kappa(pred, truth, n_classes: int = N_GRADES) -> float:
    """When both marginals sit on a single shared class there is no chance disagreement; that case returns 1."""
    o = confusion_matrix(pred, truth, n_classes).astype(np.float64)
    idx = np.arange(n_classes)
    w = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / o.sum()
    denom = (w * e).sum()
    if denom == 0.0:
        return 1.0
    return float(1.0 - (w * o).sum() / denom)


def tpr_per_class(pred, truth, n_classes: int = N_GRADES) -> np.ndarray:
    """Recall per class; classes absent from ``truth`` are NaN."""
    o = confusion_matrix(pred, truth, n_classes)
    pos = o.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(pos > 0, np.diag(o) / pos, np.nan)


# ------------------------------------------------------------------- reports


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else v


@dataclass
class MetricReport:
    fid: float | None = None
    swd_per_level: list | None = None
    swd_avg: float | None = None
    kappa: float | None = None
    tpr: list | None = None
    accuracy: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fid is not None and not self.fid >= 0:
            raise ValidationError(f"fid must be >= 0, got {self.fid}")
        if self.swd_avg is not None and not self.swd_avg >= 0:
            raise ValidationError(f"swd must be >= 0, got {self.swd_avg}")
        if self.kappa is not None and not -1.0 - 1e-12 <= self.kappa <= 1.0 + 1e-12:
            raise ValidationError(f"kappa must lie in [-1, 1], got {self.kappa}")
        if self.tpr is not None:
            t = np.asarray(self.tpr, dtype=np.float64)
            if t.shape != (N_GRADES,) or np.any((t < 0) | (t > 1)):
                raise ValidationError(f"tpr must be {N_GRADES} values in [0, 1] (NaN allowed)")
            self.tpr = t.tolist()

    def to_flat(self, swd_x1000: bool = True) -> dict:
        out = {"fid": self.fid, "kappa": self.kappa, "accuracy": self.accuracy}
        if self.swd_per_level is not None:
            s = 1e3 if swd_x1000 else 1.0
            for i, v in enumerate(self.swd_per_level):
                out[f"swd_level{i}"] = v * s
            out["swd_avg"] = self.swd_avg * s
            out["swd_scale"] = s
        if self.tpr is not None:
            for g, v in enumerate(self.tpr):
                out[f"tpr_{g}"] = _nan_to_none(v)
        for k, v in self.metadata.items():
            out[f"meta.{k}"] = v
        return {k: _nan_to_none(v) for k, v in out.items()}

    def write_json(self, path, swd_x1000: bool = True) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_flat(swd_x1000), indent=2, sort_keys=True) + "\n")
        return path


def classification_report(pred, truth, metadata=None) -> MetricReport:
    pred, truth = _check_labels(pred, truth, N_GRADES)
    return MetricReport(
        kappa=quadratic_weighted_kappa(pred, truth),
        tpr=tpr_per_class(pred, truth).tolist(),
        accuracy=float(np.mean(pred == truth)),
        metadata=dict(metadata or {}),
    )


def write_table(rows: dict[str, MetricReport], path) -> Path:
    """CSV with one row per arm: accuracy, kappa and per-grade TPR."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "accuracy", "kappa"] + [f"tpr_{g}" for g in range(N_GRADES)])
        for name, r in rows.items():
            tpr = ["" if v is None or math.isnan(v) else f"{v:.4f}" for v in (r.tpr or [math.nan] * N_GRADES)]
            writer.writerow([name, f"{r.accuracy:.4f}", f"{r.kappa:.4f}"] + tpr)
    return path


# ------------------------------------------------------- conditioning fidelity

LESION_CHANNEL_SLICE = slice(2, None)


@dataclass
class ConditioningResult:
    inside: np.ndarray  # per-image mean |response| on lesion pixels
    outside: np.ndarray  # per-image mean |response| on lesion-free pixels
    statistic: float
    p_value: float


@torch.no_grad()
def conditioning_fidelity(generate_fn, c: torch.Tensor, grades, seed: int = 0) -> ConditioningResult:
    """How strongly generated pixels respond to the lesion channels.

    ``generate_fn(c, grades, torch_generator)`` returns (B,3,R,R) images. Each
    condition is rendered twice with identical noise and latents, once as given
    and once with its lesion channels zeroed. The absolute difference is
    averaged over lesion pixels and over lesion-free pixels per image, and the
    two groups are compared with Welch's t-test. Images without lesion pixels
    are skipped.
    """
    lesion = c[:, LESION_CHANNEL_SLICE].amax(dim=1) > 0.5
    keep = lesion.flatten(1).any(dim=1)
    if int(keep.sum()) < 2:
        raise ValidationError("need at least two conditions with lesion pixels")
    c, lesion = c[keep], lesion[keep]
    grades = torch.as_tensor(grades)[keep]
    stripped = c.clone()
    stripped[:, LESION_CHANNEL_SLICE] = 0
    with_l = generate_fn(c, grades, torch.Generator().manual_seed(seed))
    without = generate_fn(stripped, grades, torch.Generator().manual_seed(seed))
    resp = (with_l - without).abs().mean(dim=1)
    inside = np.array([resp[i][lesion[i]].mean().item() for i in range(len(resp))])
    outside = np.array([resp[i][~lesion[i]].mean().item() for i in range(len(resp))])
    t, p = stats.ttest_ind(inside, outside, equal_var=False)
    return ConditioningResult(inside, outside, float(t), float(p))


# ------------------------------------------------------------------ A/B harness

ClassifierFactory = Callable[[Dataset, int, dict], Callable[[Dataset], np.ndarray]]


def default_classifier(train_set: Dataset, seed: int, config: dict):
    from drgan.grading import predict, train_classifier

    model = train_classifier(train_set, seed=seed, **config)
    return lambda ds: predict(model, ds)


@dataclass
class ABResult:
    seeds: list
    baseline: list  # MetricReport per seed
    augmented: list
    deltas: list  # per seed: {"accuracy", "kappa", "tpr"}

    def median_delta_tpr(self, grades) -> float:
        per_seed = [np.nanmean([d["tpr"][g] for g in grades]) for d in self.deltas]
        return float(np.median(per_seed))


def augmentation_ab(
    real_train: Dataset,
    fake_train: Dataset,
    test_set: Dataset,
    classifier_config: dict | None = None,
    seeds=(0, 1, 2),
    classifier_factory: ClassifierFactory | None = None,
) -> ABResult:
    """Train one classifier on ``real_train`` and one on ``real_train + fake_train`` per seed; evaluate both on ``test_set``."""
    overlap = set(test_set.ids) & (set(real_train.ids) | set(fake_train.ids))
    if overlap:
        raise ValidationError(f"train/test id overlap: {sorted(overlap)[:5]}")
    factory = classifier_factory or default_classifier
    config = dict(classifier_config or {})
    augmented_train = real_train + fake_train
    truth = test_set.grades
    base_reports, aug_reports, deltas = [], [], []
    for seed in seeds:
        arms = []
        for name, train_set in (("real", real_train), ("real+fake", augmented_train)):
            predict_fn = factory(train_set, seed, config)
            meta = {"arm": name, "seed": seed, "n_train": len(train_set), "n_test": len(test_set)}
            arms.append(classification_report(predict_fn(test_set), truth, meta))
        base, aug = arms
        base_reports.append(base)
        aug_reports.append(aug)
        deltas.append(
            {
                "accuracy": aug.accuracy - base.accuracy,
                "kappa": aug.kappa - base.kappa,
                "tpr": (np.asarray(aug.tpr) - np.asarray(base.tpr)).tolist(),
            }
        )
        log.info("seed %d: accuracy %+.4f kappa %+.4f", seed, deltas[-1]["accuracy"], deltas[-1]["kappa"])
    return ABResult(list(seeds), base_reports, aug_reports, deltas)
