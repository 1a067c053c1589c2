"""Procedural toy fundus corpus and on-disk dataset ingestion.

Every sample is a pure function of ``(seed, grade, resolution)``. Grades are
tied to lesion content through :data:`LESION_POLICY` so a small classifier
can separate them.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from drgan import N_GRADES
from drgan.config import VALID_RESOLUTIONS
from drgan.errors import ConfigurationError, IngestionError, ValidationError

log = logging.getLogger(__name__)

LESION_CHANNELS = ("ma", "he", "ex", "se", "laser", "membrane")
STRUCTURE_CHANNELS = ("vessel", "optic_disk")
CONDITION_CHANNELS = STRUCTURE_CHANNELS + LESION_CHANNELS
N_CONDITION_CHANNELS = len(CONDITION_CHANNELS)

FOV_RADIUS_FRACTION = 0.48

# Inclusive (low, high) count ranges per lesion type. Grade 3 draws SE, laser
# marks or both; grade 4 adds exactly one proliferate membrane region on top.
LESION_POLICY = {
    0: {},
    1: {"ma": (1, 5)},
    2: {"ma": (1, 5), "he": (1, 4), "ex": (0, 3)},
    3: {"ma": (1, 5), "he": (1, 4), "ex": (0, 3), "se": (2, 4), "laser": (8, 14)},
    4: {"ma": (1, 5), "he": (1, 4), "ex": (0, 3), "se": (2, 4), "laser": (8, 14), "membrane": (1, 1)},
}
GRADE3_MODES = ("se", "laser", "both")

# Share of each grade in EyePACS. Grades 0, 3 and 4 are fixed;
# the 21.82% left over is split between grades 1 and 2 in the 2443:5292 ratio of
# the public Kaggle training labels.
EYEPACS_PROFILE = (0.7367, 0.0689, 0.1493, 0.0235, 0.0216)


@dataclass
class StructuralMask:
    vessel: np.ndarray
    optic_disk: np.ndarray


@dataclass
class LesionMask:
    channels: np.ndarray  # H x W x 6, order LESION_CHANNELS


@dataclass
class Sample:
    condition: np.ndarray  # H x W x 8 float32
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    grade: int
    id: str

    def __post_init__(self):
        if self.condition.shape[:2] != self.image.shape[:2]:
            raise ValidationError(
                f"{self.id}: image {self.image.shape[:2]} and condition "
                f"{self.condition.shape[:2]} differ in spatial size"
            )
        self.grade = check_grade(self.grade)

    @property
    def structural(self) -> StructuralMask:
        return StructuralMask(self.condition[..., 0].copy(), self.condition[..., 1].copy())

    @property
    def lesions(self) -> LesionMask:
        return LesionMask(self.condition[..., 2:].copy())


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Dataset(self.samples[idx])
        return self.samples[idx]

    def __iter__(self):
        return iter(self.samples)

    @property
    def grades(self) -> np.ndarray:
        return np.array([s.grade for s in self.samples], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def counts(self) -> np.ndarray:
        return np.bincount(self.grades, minlength=N_GRADES)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices])

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples)


def check_grade(grade) -> int:
    g = int(grade)
    if g != grade or not 0 <= g < N_GRADES:
        raise ValidationError(f"grade must be an integer in 0..4, got {grade!r}")
    return g


def fov_mask(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r = FOV_RADIUS_FRACTION * min(h, w)
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


def encode_condition(s: StructuralMask, l: LesionMask) -> np.ndarray:
    vessel = np.asarray(s.vessel)
    disk = np.asarray(s.optic_disk)
    lesions = np.asarray(l.channels)
    if vessel.shape != disk.shape:
        raise ValidationError(f"vessel {vessel.shape} and optic disk {disk.shape} differ")
    if lesions.ndim != 3 or lesions.shape[2] != len(LESION_CHANNELS):
        raise ValidationError(f"lesion mask must be HxWx{len(LESION_CHANNELS)}, got {lesions.shape}")
    if lesions.shape[:2] != vessel.shape:
        raise ValidationError(f"lesion mask {lesions.shape[:2]} and structural {vessel.shape} differ")
    return np.concatenate(
        [vessel[..., None], disk[..., None], lesions], axis=2
    ).astype(np.float32)


# ---------------------------------------------------------------- drawing


def _draw(h, w, paint) -> np.ndarray:
    img = Image.new("L", (w, h), 0)
    paint(ImageDraw.Draw(img))
    return np.asarray(img, dtype=np.float32) / 255.0


def _disc(draw, cx, cy, r):
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)


def _bezier(p0, p1, p2, n=48):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _structures(rng, res):
    c = (res - 1) / 2.0
    r_fov = FOV_RADIUS_FRACTION * res
    side = rng.choice([-1.0, 1.0])
    od = np.array([c + side * 0.28 * res, c + rng.uniform(-0.05, 0.05) * res])
    od_r = max(2.0, 0.07 * res)
    width = max(1, int(round(res / 128)))

    curves = []
    n_vessels = int(rng.integers(6, 11))
    for k in range(n_vessels):
        # Arcades fan out away from the disc side, a few short nasal ones back.
        if k < 4:
            angle = (math.pi if side > 0 else 0.0) + rng.uniform(-1.2, 1.2)
            length = rng.uniform(0.45, 0.8) * res
        else:
            angle = rng.uniform(0, 2 * math.pi)
            length = rng.uniform(0.15, 0.35) * res
        end = od + length * np.array([math.cos(angle), math.sin(angle)])
        mid = (od + end) / 2 + rng.normal(0, 0.08 * res, size=2)
        curves.append(_bezier(od, mid, end))

    def paint_vessels(draw):
        for pts in curves:
            draw.line([tuple(p) for p in pts], fill=255, width=width)

    fov = fov_mask(res, res)
    vessel = (_draw(res, res, paint_vessels) > 0.5) & fov
    disk = _draw(res, res, lambda d: _disc(d, od[0], od[1], od_r)) > 0.5
    return vessel.astype(np.float32), disk.astype(np.float32), od, od_r, r_fov


def _lesion_center(rng, res, od, od_r, r_fov):
    c = (res - 1) / 2.0
    for _ in range(100):
        rad = 0.85 * r_fov * math.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * math.pi)
        p = np.array([c + rad * math.cos(ang), c + rad * math.sin(ang)])
        if np.linalg.norm(p - od) > od_r + 2:
            return p
    return p


def _gauss_spot(res, centers, sigma):
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    out = np.zeros((res, res))
    for cx, cy in centers:
        out = np.maximum(out, np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2)))
    out[out < 0.05] = 0.0
    return out.astype(np.float32)


def _lesions(rng, res, grade, od, od_r, r_fov):
    policy = dict(LESION_POLICY[grade])
    if grade == 3:
        mode = GRADE3_MODES[int(rng.integers(len(GRADE3_MODES)))]
        if mode == "se":
            policy.pop("laser")
        elif mode == "laser":
            policy.pop("se")
    counts = {k: int(rng.integers(lo, hi + 1)) for k, (lo, hi) in policy.items()}
    channels = np.zeros((res, res, len(LESION_CHANNELS)), dtype=np.float32)
    unit = res / 64.0

    def binary(n, paint_one):
        def paint(draw):
            for _ in range(n):
                paint_one(draw, _lesion_center(rng, res, od, od_r, r_fov))

        return (_draw(res, res, paint) > 0.5).astype(np.float32)

    if counts.get("ma"):
        channels[..., 0] = binary(counts["ma"], lambda d, p: _disc(d, p[0], p[1], max(1.5, 1.5 * unit)))
    if counts.get("he"):

        def blot(d, p):
            for _ in range(int(rng.integers(1, 4))):
                q = p + rng.normal(0, 1.2 * unit, size=2)
                _disc(d, q[0], q[1], rng.uniform(1.8, 3.2) * unit)

        channels[..., 1] = binary(counts["he"], blot)
    if counts.get("ex"):

        def cluster(d, p):
            for _ in range(int(rng.integers(2, 6))):
                q = p + rng.normal(0, 2.0 * unit, size=2)
                _disc(d, q[0], q[1], rng.uniform(0.8, 1.4) * unit)

        channels[..., 2] = binary(counts["ex"], cluster)
    if counts.get("se"):
        channels[..., 3] = binary(
            counts["se"], lambda d, p: _disc(d, p[0], p[1], rng.uniform(2.5, 4.0) * unit)
        )
    if counts.get("laser"):
        c = (res - 1) / 2.0
        n = counts["laser"]
        phase = rng.uniform(0, 2 * math.pi)
        centers = []
        for i in range(n):
            ang = phase + 2 * math.pi * i / n + rng.normal(0, 0.1)
            rad = rng.uniform(0.55, 0.8) * r_fov
            centers.append((c + rad * math.cos(ang), c + rad * math.sin(ang)))
        channels[..., 4] = _gauss_spot(res, centers, 1.3 * unit)
    if counts.get("membrane"):
        yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
        ang = rng.uniform(0, 2 * math.pi)
        center = od + (od_r + 3 * unit) * np.array([math.cos(ang), math.sin(ang)])
        sx, sy = rng.uniform(4.0, 7.0) * unit, rng.uniform(2.5, 4.5) * unit
        ca, sa = math.cos(ang), math.sin(ang)
        u = (xx - center[0]) * ca + (yy - center[1]) * sa
        v = -(xx - center[0]) * sa + (yy - center[1]) * ca
        blob = np.exp(-(u**2 / (2 * sx**2) + v**2 / (2 * sy**2)))
        blob[blob < 0.05] = 0.0
        channels[..., 5] = blob.astype(np.float32)

    fov = fov_mask(res, res)
    channels *= fov[..., None]
    return np.clip(channels, 0.0, 1.0), counts


def _blend(img, alpha, color):
    alpha = np.clip(alpha, 0.0, 1.0)[..., None]
    return img * (1 - alpha) + alpha * np.asarray(color)[None, None, :]


def _render(rng, res, vessel, disk, lesions, od):
    c = (res - 1) / 2.0
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    r_fov = FOV_RADIUS_FRACTION * res
    d = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / r_fov
    tint = np.array([0.80, 0.38, 0.18]) * rng.uniform(0.9, 1.1, size=3)
    shade = 1.0 - 0.45 * d**2
    illum = ndimage.gaussian_filter(rng.normal(0, 1, (res, res)), sigma=res / 8)
    illum = 1.0 + 0.08 * illum / (np.abs(illum).max() + 1e-12)
    img = np.clip(tint[None, None, :] * (shade * illum)[..., None], 0, 1)

    macula = np.array([c - 0.45 * (od[0] - c), od[1]])
    mac = np.exp(-((xx - macula[0]) ** 2 + (yy - macula[1]) ** 2) / (2 * (0.06 * res) ** 2))
    img = img * (1 - 0.35 * mac[..., None])

    soft = lambda m, s: ndimage.gaussian_filter(m.astype(np.float64), sigma=s)  # noqa: E731
    img = _blend(img, 0.85 * vessel, (0.42, 0.07, 0.05))
    img = _blend(img, np.clip(1.4 * soft(disk, res / 128), 0, 1), (1.0, 0.90, 0.62))
    img = _blend(img, 0.95 * lesions[..., 0], (0.40, 0.03, 0.03))
    img = _blend(img, 0.90 * lesions[..., 1], (0.48, 0.05, 0.03))
    img = _blend(img, 0.95 * lesions[..., 2], (0.98, 0.92, 0.30))
    img = _blend(img, 0.85 * np.clip(1.5 * soft(lesions[..., 3], res / 128), 0, 1), (0.94, 0.90, 0.82))
    img = _blend(img, 0.90 * lesions[..., 4], (0.35, 0.25, 0.10))
    img = _blend(img, 0.75 * lesions[..., 5], (0.88, 0.86, 0.82))

    img = img + rng.normal(0, 0.01, img.shape)
    img = img * fov_mask(res, res)[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_sample(seed: int, grade: int, resolution: int) -> Sample:
    if resolution not in VALID_RESOLUTIONS:
        raise ConfigurationError(f"resolution must be one of {VALID_RESOLUTIONS}, got {resolution}")
    grade = check_grade(grade)
    if seed < 0:
        raise ConfigurationError("seed must be >= 0")
    rng = np.random.default_rng([seed, grade, resolution])
    vessel, disk, od, od_r, r_fov = _structures(rng, resolution)
    lesions, _ = _lesions(rng, resolution, grade, od, od_r, r_fov)
    image = _render(rng, resolution, vessel, disk, lesions, od)
    condition = encode_condition(StructuralMask(vessel, disk), LesionMask(lesions))
    return Sample(condition, image, grade, f"toy_s{seed}_g{grade}_r{resolution}")


def sample_seed(seed: int, grade: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, grade, index]).generate_state(1)[0])


def generate_corpus(seed: int, counts_per_grade, resolution: int) -> Dataset:
    counts = [int(c) for c in counts_per_grade]
    if len(counts) != N_GRADES or min(counts) < 0:
        raise ValidationError(f"counts_per_grade must be 5 non-negative integers, got {counts_per_grade}")
    samples = []
    for grade, n in enumerate(counts):
        for i in range(n):
            s = generate_toy_sample(sample_seed(seed, grade, i), grade, resolution)
            s.id = f"toy{seed}_g{grade}_{i:05d}"
            samples.append(s)
    return Dataset(samples)


def profile_counts(total: int, profile=EYEPACS_PROFILE) -> list[int]:
    """Largest-remainder apportionment of ``total`` samples over a grade profile."""
    shares = np.asarray(profile, dtype=np.float64)
    shares = shares / shares.sum()
    exact = shares * total
    counts = np.floor(exact).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts.tolist()


# ---------------------------------------------------------------- disk I/O

MASK_FILES = {name: f"{name}.png" for name in CONDITION_CHANNELS}


def _to_u8(a):
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_sample(sample: Sample, root: str | Path, extra_meta=None) -> Path:
    d = Path(root) / sample.id
    d.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_u8(sample.image), mode="RGB").save(d / "image.png")
    for k, name in enumerate(CONDITION_CHANNELS):
        Image.fromarray(_to_u8(sample.condition[..., k]), mode="L").save(d / MASK_FILES[name])
    meta = {"grade": int(sample.grade)}
    meta.update(extra_meta or {})
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    return d


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in dataset:
        save_sample(s, root)
    return root


def _read_gray(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def load_dataset(root_path: str | Path) -> Dataset:
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        warnings.warn(f"dataset directory {root} holds no samples", stacklevel=2)
        return Dataset()

    missing: dict[str, list[str]] = {}
    for d in dirs:
        need = ["image.png", "meta.json"] + list(MASK_FILES.values())
        absent = [f for f in need if not (d / f).is_file()]
        if absent:
            missing[d.name] = absent
    if missing:
        detail = "; ".join(f"{sid}: {', '.join(files)}" for sid, files in missing.items())
        raise IngestionError(f"missing channel files for {len(missing)} sample(s): {detail}", missing)

    samples = []
    for d in dirs:
        with Image.open(d / "image.png") as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        planes = []
        for name in CONDITION_CHANNELS:
            plane = _read_gray(d / MASK_FILES[name])
            if plane.shape != image.shape[:2]:
                raise ValidationError(
                    f"{d.name}: {MASK_FILES[name]} is {plane.shape}, image is {image.shape[:2]}"
                )
            if name in STRUCTURE_CHANNELS:
                plane = (plane > 0.5).astype(np.float32)
            planes.append(np.clip(plane, 0.0, 1.0))
        try:
            meta = json.loads((d / "meta.json").read_text())
            grade = meta["grade"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise IngestionError(f"{d.name}: unreadable meta.json ({exc})", [d.name]) from exc
        samples.append(Sample(np.stack(planes, axis=2), image, grade, d.name))
    log.info("loaded %d samples from %s", len(samples), root)
    return Dataset(samples)


def to_tensors(samples, dtype=None):
    """Stack samples into ``(c, x, y)``: condition (B,8,R,R) in [0,1], image (B,3,R,R) in [-1,1], grades."""
    import torch

    samples = list(samples)
    c = torch.from_numpy(np.stack([s.condition for s in samples])).permute(0, 3, 1, 2).contiguous()
    x = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    y = torch.tensor([s.grade for s in samples], dtype=torch.long)
    x = x * 2.0 - 1.0
    if dtype is not None:
        c, x = c.to(dtype), x.to(dtype)
    return c, x, y


def image_from_tensor(x) -> np.ndarray:
    """(3,R,R) tensor in [-1,1] -> HxWx3 float32 in [0,1]."""
    arr = x.detach().cpu().float().permute(1, 2, 0).numpy()
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)
