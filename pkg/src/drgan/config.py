"""Dataclass configs and the flat dotted-key JSON format used by the CLI.

A config file is a single JSON object whose keys are dotted paths into
:class:`TrainConfig`, e.g. ``{"lr_gan": 1e-4, "generator.base_channels": 16}``.
The same keys are accepted by ``--set key=value`` on the command line.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from drgan.errors import ConfigurationError

VALID_RESOLUTIONS = (64, 128, 256)


@dataclass
class GeneratorConfig:
    full_resolution: int = 256
    base_channels: int = 32
    n_residual_blocks: int = 7
    sca_reductions: tuple[int, int, int] = (8, 16, 32)
    noise_fraction: float = 0.25
    noise_scale: float = 1.0
    style_dim: int = 128
    mapping_hidden: int = 128
    use_sca: bool = True
    use_agm: bool = True

    def __post_init__(self):
        self.sca_reductions = tuple(int(d) for d in self.sca_reductions)
        if self.full_resolution % 16 != 0 or self.full_resolution <= 0:
            raise ConfigurationError(
                f"full_resolution must be a positive multiple of 16, got {self.full_resolution}"
            )
        if self.n_residual_blocks < 1:
            raise ConfigurationError("n_residual_blocks must be >= 1")
        if len(self.sca_reductions) != 3:
            raise ConfigurationError("sca_reductions needs one entry per synthesis scale (3)")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")

    @property
    def block_widths(self) -> tuple[int, ...]:
        """Channel widths of the style-bearing blocks: three SCA blocks then the output head."""
        b = self.base_channels
        return (8 * b, 4 * b, 2 * b, b)


@dataclass
class DiscConfig:
    n_scales: int = 3
    conv_layers: int = 4
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    base_channels: int = 32

    def __post_init__(self):
        if self.n_scales < 1 or self.conv_layers < 1:
            raise ConfigurationError("n_scales and conv_layers must be >= 1")


@dataclass
class LossConfig:
    lambda1: float = 10.0  # feature matching
    lambda2: float = 10.0  # perceptual
    lambda3: float = 1.0  # grade classification
    focal_gamma: float = 2.0
    perceptual_seed: int = 1234

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigurationError("loss weights must be >= 0")


@dataclass
class Ablation:
    no_lesion_masks: bool = False
    no_agm: bool = False
    no_perceptual: bool = False
    no_cls: bool = False
    no_sca: bool = False

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


@dataclass
class TrainConfig:
    lr_gan: float = 1e-4
    lr_pretrain: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_gan: int = 4
    batch_pretrain: int = 64
    epochs_stage1: int = 2
    epochs_stage2: int = 2
    epochs_pretrain: int = 15
    grader_base_channels: int = 16
    grader_holdout: float = 0.2
    accuracy_gate: float = 0.80
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    disc: DiscConfig = field(default_factory=DiscConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.lr_gan <= 0 or self.lr_pretrain <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if min(self.epochs_stage1, self.epochs_stage2, self.epochs_pretrain) < 1:
            raise ConfigurationError("epoch counts must be >= 1")
        if self.batch_gan < 1 or self.batch_pretrain < 1:
            raise ConfigurationError("batch sizes must be >= 1")

    @property
    def resolution(self) -> int:
        return self.generator.full_resolution


def smoke_config(seed: int = 0, **overrides) -> TrainConfig:
    """Desk smoke profile: R=64, tiny widths, 2+2 epochs, batch 4."""
    flat = {
        "seed": seed,
        "generator.full_resolution": 64,
        "generator.base_channels": 16,
        "generator.n_residual_blocks": 3,
        "disc.base_channels": 16,
        "batch_gan": 4,
        "epochs_stage1": 2,
        "epochs_stage2": 2,
        "epochs_pretrain": 15,
        "batch_pretrain": 32,
    }
    flat.update(overrides)
    return from_flat(flat)


PROFILES = {"smoke": smoke_config}


def to_flat(cfg: TrainConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            key = prefix + f.name
            if dataclasses.is_dataclass(value):
                walk(value, key + ".")
            elif isinstance(value, tuple):
                out[key] = list(value)
            else:
                out[key] = value

    walk(cfg, "")
    return out


def _coerce(value, template, key):
    if isinstance(template, bool):
        if isinstance(value, str):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"{key}: cannot parse {value!r} as bool")
        return bool(value)
    if isinstance(template, (int, float)):
        try:
            if isinstance(value, str):
                value = json.loads(value)
            return type(template)(value)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{key}: cannot parse {value!r}") from exc
    if isinstance(template, tuple):
        if isinstance(value, str):
            value = json.loads(value)
        return tuple(value)
    return value


def from_flat(flat: dict[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    """Apply dotted-key overrides on top of ``base`` (defaults if omitted)."""
    current = to_flat(base or TrainConfig())
    for key, value in flat.items():
        if key not in current:
            raise ConfigurationError(f"unknown config key: {key}")
        template = current[key]
        if isinstance(template, list):
            template = tuple(template)
        current[key] = _coerce(value, template, key)

    nested: dict[str, Any] = {}
    for key, value in current.items():
        node = nested
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return TrainConfig(
        generator=GeneratorConfig(**nested.pop("generator")),
        disc=DiscConfig(**nested.pop("disc")),
        loss=LossConfig(**nested.pop("loss")),
        ablation=Ablation(**nested.pop("ablation")),
        **nested,
    )


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | Path | None = None, overrides=None, profile: str | None = None) -> TrainConfig:
    base = None
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; known: {sorted(PROFILES)}")
        base = PROFILES[profile]()
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            flat.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
    flat.update(overrides or {})
    return from_flat(flat, base)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_flat(cfg), indent=2, sort_keys=True) + "\n")
