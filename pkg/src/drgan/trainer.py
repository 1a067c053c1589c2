"""Two-step training: grader pretraining + grade-space fitting, then adversarial training.

Adversarial training runs ``epochs_stage1`` epochs on the global generator
(local enhancer frozen, previews upsampled) and ``epochs_stage2`` epochs with
the enhancer unfrozen. Each batch does one discriminator step then one
generator step.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from drgan import N_GRADES
from drgan.checkpoint import load_module, load_optimizer, read_blob, read_manifest, save_checkpoint, write_blob
from drgan.config import TrainConfig, from_flat, save_config, to_flat
from drgan.data import Dataset, generate_toy_sample, image_from_tensor, sample_seed, save_sample, Sample, to_tensors
from drgan.discriminator import MultiScaleDiscriminator
from drgan.errors import NumericError, StateError, ValidationError
from drgan.generator import Generator
from drgan.grading import (
    MappingNetwork,
    fit_grading_spaces,
    load_grade_spaces,
    map_to_styles,
    pretrain_grader,
    sample_grade_batch,
    save_grade_spaces,
    style_dim,
)
from drgan.losses import (
    LossReport,
    PerceptualNet,
    adversarial_terms,
    class_balanced_alpha,
    feature_matching,
    generator_adversarial,
    grade_classification,
    perceptual,
    total,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "gm", "gm+gl")
LESION_SLICE = slice(2, None)


@dataclass
class RunState:
    step: int = 0
    epoch: int = 0
    stage: str = "pretrain"
    checkpoint: Path | None = None
    run_dir: Path | None = None
    history: list = field(default_factory=list)

    def advance_to(self, stage: str):
        if STAGES.index(stage) < STAGES.index(self.stage):
            raise StateError(f"stage cannot go back from {self.stage} to {stage}")
        self.stage = stage


def effective_generator_config(cfg: TrainConfig):
    return dataclasses.replace(
        cfg.generator,
        use_sca=cfg.generator.use_sca and not cfg.ablation.no_sca,
        use_agm=cfg.generator.use_agm and not cfg.ablation.no_agm,
    )


def _derived_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([seed, sum(stream.encode())]).generate_state(1)[0])


def build_models(cfg: TrainConfig):
    torch.manual_seed(_derived_seed(cfg.seed, "init"))
    gcfg = effective_generator_config(cfg)
    generator = Generator(gcfg)
    mapping = MappingNetwork(gcfg.style_dim, style_dim(gcfg.block_widths), gcfg.mapping_hidden)
    disc = MultiScaleDiscriminator(cfg.disc)
    return generator, mapping, disc


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def drop_lesions(c: torch.Tensor) -> torch.Tensor:
    c = c.clone()
    c[:, LESION_SLICE] = 0
    return c


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, spaces, run_dir=None):
        if len(dataset) == 0:
            raise ValidationError("cannot train on an empty dataset")
        res = {s.image.shape[0] for s in dataset}
        if res != {cfg.resolution}:
            raise ValidationError(f"dataset resolution {sorted(res)} != configured {cfg.resolution}")
        self.cfg = cfg
        self.dataset = dataset
        self.spaces = spaces
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.generator, self.mapping, self.disc = build_models(cfg)
        self.percept = PerceptualNet(cfg.loss.perceptual_seed)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = torch.optim.Adam(
            self.generator.global_parameters() + list(self.mapping.parameters()), lr=cfg.lr_gan, betas=betas
        )
        self.opt_gl = torch.optim.Adam(self.generator.local_parameters(), lr=cfg.lr_gan, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_gan, betas=betas)
        self.data_gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, "data"))
        self.noise_gen = torch.Generator().manual_seed(_derived_seed(cfg.seed, "noise"))
        self.alpha = class_balanced_alpha(dataset.counts())
        self.tensors = to_tensors(dataset)
        self.state = RunState(stage="gm", run_dir=self.run_dir)
        self._log_fh = None

    # ----------------------------------------------------------- steps

    def styles_for(self, y):
        grades = y
        if self.cfg.ablation.no_lesion_masks:
            grades = torch.randint(0, N_GRADES, y.shape, generator=self.noise_gen)
        z = sample_grade_batch(self.spaces, grades, self.noise_gen)
        return map_to_styles(z, self.mapping, self.generator.block_widths)

    def train_step(self, c, x, y, use_enhancer: bool) -> LossReport:
        cfg = self.cfg
        if cfg.ablation.no_lesion_masks:
            c = drop_lesions(c)
        self.generator.train()
        styles = self.styles_for(y)
        out = self.generator(c, styles, self.noise_gen, use_enhancer=use_enhancer)
        fake = out.full_image

        # discriminator step
        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        d_real = self.disc(x, c)
        d_fake = self.disc(fake.detach(), c)
        adv_d, _ = adversarial_terms(d_real, d_fake)
        cls_real = grade_classification(d_real, y, cfg.loss.focal_gamma, self.alpha)
        cls_fake = grade_classification(d_fake, y, cfg.loss.focal_gamma, self.alpha)
        parts = {"adv_d": adv_d, "cls_real": cls_real, "cls_fake": cls_fake,
                 "adv_g": 0.0, "feat_match": 0.0, "perceptual": 0.0}
        _, total_d = total(parts, cfg.loss, cfg.ablation)
        self._require_finite(total_d)
        total_d.backward()
        self.opt_d.step()

        # generator step
        self.disc.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        self.opt_gl.zero_grad(set_to_none=True)
        d_fake = self.disc(fake, c)
        with torch.no_grad():
            d_real = self.disc(x, c)
        parts["adv_g"] = generator_adversarial(d_fake)
        parts["feat_match"] = feature_matching(d_real, d_fake)
        parts["perceptual"] = perceptual(x, fake, self.percept)
        total_g, _ = total(parts, cfg.loss, cfg.ablation)
        grade_pred = F.cross_entropy(out.predicted_grade_logits, y)
        self._require_finite(total_g, grade_pred)
        (total_g + grade_pred).backward()
        self.opt_g.step()
        if use_enhancer:
            self.opt_gl.step()
        self.disc.requires_grad_(True)

        values = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in parts.items()}
        return LossReport(
            total_g=float(total_g.detach()), total_d=float(total_d.detach()),
            grade_pred=float(grade_pred.detach()), **values,
        )

    def _require_finite(self, *values):
        for v in values:
            if not torch.isfinite(v).all():
                raise NumericError(
                    f"non-finite loss at step {self.state.step}; last good checkpoint: {self.state.checkpoint}",
                    self.state.checkpoint,
                )

    # ----------------------------------------------------------- loop

    def _open_log(self):
        if self.run_dir is None or self._log_fh is not None:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "train_log.csv"
        kept = []
        if path.exists() and self.state.step > 0:
            # rows past the resume point belong to an abandoned continuation
            with open(path, newline="") as fh:
                kept = [r for r in list(csv.reader(fh))[1:] if r and int(r[0]) <= self.state.step]
        self._log_fh = open(path, "w", newline="")
        self._csv = csv.writer(self._log_fh)
        self._csv.writerow(["step", "epoch", "stage"] + LossReport.fields())
        self._csv.writerows(kept)

    def _log(self, report: LossReport):
        row = [self.state.step, self.state.epoch, self.state.stage] + [
            repr(v) for v in report.as_dict().values()
        ]
        self.state.history.append(report)
        if self._log_fh is not None:
            self._csv.writerow(row)

    def total_epochs(self):
        return self.cfg.epochs_stage1 + self.cfg.epochs_stage2

    def run(self, epochs: int | None = None) -> RunState:
        """Train until all configured epochs are done (or ``epochs`` more epochs)."""
        cfg = self.cfg
        c_all, x_all, y_all = self.tensors
        n = len(y_all)
        self._open_log()
        target = self.total_epochs() if epochs is None else min(self.total_epochs(), self.state.epoch + epochs)
        try:
            while self.state.epoch < target:
                stage2 = self.state.epoch >= cfg.epochs_stage1
                self.state.advance_to("gm+gl" if stage2 else "gm")
                self.generator.set_enhancer_trainable(stage2)
                order = torch.randperm(n, generator=self.data_gen)
                t0 = time.perf_counter()
                for i in range(0, n - cfg.batch_gan + 1, cfg.batch_gan):
                    idx = order[i : i + cfg.batch_gan]
                    try:
                        report = self.train_step(c_all[idx], x_all[idx], y_all[idx], use_enhancer=stage2)
                    except NumericError as exc:
                        if exc.last_checkpoint is not None:
                            raise
                        raise NumericError(
                            f"{exc} at step {self.state.step}; last good checkpoint: {self.state.checkpoint}",
                            self.state.checkpoint,
                        ) from exc
                    self.state.step += 1
                    self._log(report)
                self.state.epoch += 1
                log.info(
                    "epoch %d (%s) done in %.1fs, step %d, total_g %.4f total_d %.4f",
                    self.state.epoch, self.state.stage, time.perf_counter() - t0,
                    self.state.step, report.total_g, report.total_d,
                )
                if self.run_dir is not None:
                    self.save(self.run_dir / "checkpoints" / f"epoch_{self.state.epoch:03d}")
        finally:
            if self._log_fh is not None:
                self._log_fh.flush()
        return self.state

    def close(self):
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None

    # ----------------------------------------------------------- persistence

    def save(self, path) -> Path:
        path = Path(path)
        manifest = {
            "config": to_flat(self.cfg),
            "step": self.state.step,
            "epoch": self.state.epoch,
            "stage": self.state.stage,
            "format": "drgan-checkpoint/1",
        }
        save_checkpoint(
            path,
            {"generator": self.generator, "mapping": self.mapping, "discriminator": self.disc},
            {"opt_g": self.opt_g, "opt_gl": self.opt_gl, "opt_d": self.opt_d},
            manifest,
        )
        write_blob(
            {"data": self.data_gen.get_state(), "noise": self.noise_gen.get_state()}, path / "rng.bin"
        )
        save_grade_spaces(self.spaces, path / "grade_spaces.json")
        self.state.checkpoint = path
        if self.run_dir is not None:
            (self.run_dir / "LATEST").write_text(str(path) + "\n")
        return path

    @classmethod
    def resume(cls, path, dataset: Dataset, run_dir=None) -> "Trainer":
        path = Path(path)
        manifest = read_manifest(path)
        cfg = from_flat(manifest["config"])
        trainer = cls(cfg, dataset, load_grade_spaces(path / "grade_spaces.json"), run_dir)
        trainer.load_weights(path)
        load_optimizer(path, "opt_g", trainer.opt_g)
        load_optimizer(path, "opt_gl", trainer.opt_gl)
        load_optimizer(path, "opt_d", trainer.opt_d)
        rng = read_blob(path / "rng.bin")
        trainer.data_gen.set_state(rng["data"])
        trainer.noise_gen.set_state(rng["noise"])
        trainer.state.step = manifest["step"]
        trainer.state.epoch = manifest["epoch"]
        trainer.state.stage = manifest["stage"]
        trainer.state.checkpoint = path
        return trainer

    def load_weights(self, path):
        load_module(path, "generator", self.generator)
        load_module(path, "mapping", self.mapping)
        load_module(path, "discriminator", self.disc)


def train(dataset: Dataset, config: TrainConfig, run_dir=None, spaces=None, grader=None):
    """Full two-step pipeline. Returns ``(state, trainer)``."""
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        save_config(config, Path(run_dir) / "resolved_config.json")
    if spaces is None:
        if grader is None:
            grader = pretrain_grader(dataset, config)
        spaces = fit_grading_spaces(grader, dataset)
        if run_dir is not None:
            save_grade_spaces(spaces, Path(run_dir) / "grade_spaces.json")
    trainer = Trainer(config, dataset, spaces, run_dir)
    try:
        trainer.run()
    finally:
        trainer.close()
    return trainer.state, trainer


# ------------------------------------------------------------------ synthesis


class Synthesizer:
    """Frozen generator + mapping network + grade spaces, ready for inference."""

    def __init__(self, cfg: TrainConfig, generator: Generator, mapping: MappingNetwork, spaces, stage="gm+gl"):
        self.cfg = cfg
        self.generator = generator.eval()
        self.mapping = mapping.eval()
        self.spaces = spaces
        self.stage = stage

    @classmethod
    def from_checkpoint(cls, path) -> "Synthesizer":
        path = Path(path)
        manifest = read_manifest(path)
        cfg = from_flat(manifest["config"])
        generator, mapping, _ = build_models(cfg)
        load_module(path, "generator", generator)
        load_module(path, "mapping", mapping)
        return cls(cfg, generator, mapping, load_grade_spaces(path / "grade_spaces.json"), manifest["stage"])

    @classmethod
    def from_trainer(cls, trainer: Trainer) -> "Synthesizer":
        return cls(trainer.cfg, trainer.generator, trainer.mapping, trainer.spaces, trainer.state.stage)

    @torch.no_grad()
    def generate(self, c, grades=None, generator: torch.Generator | None = None):
        """Synthesize images for condition batch ``c``.

        ``grades`` forces the latent space per sample; when omitted the
        generator's own grade head picks it.
        """
        if self.cfg.ablation.no_lesion_masks:
            c = drop_lesions(c)
        if grades is None:
            grades = self.generator.predict_grade(c).argmax(dim=1)
        grades = torch.as_tensor(grades, dtype=torch.long)
        if grades.dim() == 0:
            grades = grades.expand(c.shape[0])
        z = sample_grade_batch(self.spaces, grades, generator)
        styles = map_to_styles(z, self.mapping, self.generator.block_widths)
        use_enhancer = self.stage == "gm+gl"
        out = self.generator(c, styles, generator, use_enhancer=use_enhancer)
        return out.full_image, grades


def iter_synthesized(synth: Synthesizer, per_grade: int, seed: int, grades=None, batch_size: int = 16):
    """Stream synthetic samples grade by grade; masks come from the toy policy generator."""
    res = synth.cfg.resolution
    torch_gen = torch.Generator().manual_seed(_derived_seed(seed, "synth"))
    grades = range(N_GRADES) if grades is None else grades
    for g in grades:
        for start in range(0, per_grade, batch_size):
            idx = range(start, min(per_grade, start + batch_size))
            masks = [generate_toy_sample(sample_seed(seed, g, i), g, res) for i in idx]
            c, _, _ = to_tensors(masks)
            t0 = time.perf_counter()
            images, _ = synth.generate(c, torch.full((len(masks),), g), torch_gen)
            elapsed = time.perf_counter() - t0
            log.debug("grade %d: %.4fs per image", g, elapsed / len(masks))
            for i, m, img in zip(idx, masks, images):
                yield Sample(m.condition, image_from_tensor(img), g, f"syn{seed}_g{g}_{i:05d}")


def synthesize_corpus(checkpoint, per_grade: int, out_root, seed: int, grades=None) -> Dataset:
    synth = checkpoint if isinstance(checkpoint, Synthesizer) else Synthesizer.from_checkpoint(checkpoint)
    samples = []
    t0 = time.perf_counter()
    for s in iter_synthesized(synth, per_grade, seed, grades):
        if out_root is not None:
            save_sample(s, out_root, {"synthetic": True})
        samples.append(s)
    if samples:
        log.info("synthesized %d images, %.3fs per image", len(samples), (time.perf_counter() - t0) / len(samples))
    return Dataset(samples)
