"""Command-line entry point.

Every command resolves its configuration (profile, then ``--config`` JSON,
then ``--set key=value`` overrides), writes the result plus the command
arguments to ``<run-dir>/<command>.resolved.json`` and prints that path.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from drgan import N_GRADES, __version__
from drgan.config import Ablation, from_flat, load_config, parse_overrides, to_flat
from drgan.data import EYEPACS_PROFILE, Dataset, generate_corpus, load_dataset, profile_counts, save_dataset
from drgan.errors import DRGANError, IngestionError, ValidationError

log = logging.getLogger("drgan")

RUN_DIR_ENV = "DRGAN_RUN_DIR"
IMBALANCE_PROFILES = {"eyepacs": EYEPACS_PROFILE}


def default_run_dir() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


# ---------------------------------------------------------------- helpers


def resolve_config(args):
    overrides = parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    for name in getattr(args, "ablate", None) or ():
        overrides[f"ablation.{name}"] = "true"
    return load_config(args.config, overrides, args.profile)


def echo_resolved(args, cfg, command: str) -> Path:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    argv = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    payload = {"command": command, "version": __version__, "args": argv, "config": to_flat(cfg)}
    path = run_dir / f"{command}.resolved.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"resolved config: {path}")
    return path


def _load(path, what) -> Dataset:
    if path is None:
        raise ValidationError(f"--{what} is required")
    ds = load_dataset(path)
    if len(ds) == 0:
        raise ValidationError(f"{what} dataset at {path} is empty")
    return ds


def contact_sheet(images, columns: int = 8) -> Image.Image:
    """Tile HxWx3 float images in [0,1] into one grid image."""
    images = list(images)
    if not images:
        raise ValidationError("contact sheet needs at least one image")
    h, w, _ = images[0].shape
    cols = min(columns, len(images))
    rows = math.ceil(len(images) / cols)
    sheet = np.zeros((rows * h, cols * w, 3), dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = img
    return Image.fromarray(np.round(np.clip(sheet, 0, 1) * 255).astype(np.uint8))


def _latest_checkpoint(run_dir: Path) -> Path:
    latest = run_dir / "LATEST"
    if not latest.is_file():
        raise IngestionError(f"no --checkpoint given and no LATEST file under {run_dir}")
    return Path(latest.read_text().strip())


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    echo_resolved(args, cfg, "gen-data")
    res = args.resolution or cfg.resolution
    if args.imbalanced:
        counts = profile_counts(args.total, IMBALANCE_PROFILES[args.imbalanced])
    else:
        counts = [args.per_grade] * N_GRADES
    ds = generate_corpus(cfg.seed, counts, res)
    out = Path(args.out) if args.out else Path(args.run_dir) / "data"
    save_dataset(ds, out)
    print(f"wrote {len(ds)} samples to {out} (per grade: {counts})")
    return 0


def cmd_pretrain_grader(args) -> int:
    from drgan.grading import pretrain_grader, save_grader

    cfg = resolve_config(args)
    echo_resolved(args, cfg, "pretrain-grader")
    ds = _load(args.data, "data")
    model = pretrain_grader(ds, cfg)
    out = save_grader(model, Path(args.out) if args.out else Path(args.run_dir) / "grader")
    print(f"grader held-out accuracy {model.achieved_accuracy:.4f}; saved to {out}")
    return 0


def cmd_fit_spaces(args) -> int:
    from drgan.grading import fit_grading_spaces, load_grader, save_grade_spaces

    cfg = resolve_config(args)
    echo_resolved(args, cfg, "fit-spaces")
    ds = _load(args.data, "data")
    grader = load_grader(args.grader or Path(args.run_dir) / "grader")
    spaces = fit_grading_spaces(grader, ds)
    out = Path(args.out) if args.out else Path(args.run_dir) / "grade_spaces.json"
    save_grade_spaces(spaces, out)
    print(f"wrote grade spaces to {out}")
    return 0


def cmd_train(args) -> int:
    from drgan.grading import load_grade_spaces
    from drgan.trainer import Trainer, train

    run_dir = Path(args.run_dir)
    ds = _load(args.data, "data")
    if args.resume:
        trainer = Trainer.resume(args.resume, ds, run_dir)
        echo_resolved(args, trainer.cfg, "train")
        start = trainer.state.step
        try:
            state = trainer.run()
        finally:
            trainer.close()
        print(f"resumed at step {start}; finished at step {state.step} ({state.stage})")
        return 0
    cfg = resolve_config(args)
    echo_resolved(args, cfg, "train")
    spaces = load_grade_spaces(args.spaces) if args.spaces else None
    state, _ = train(ds, cfg, run_dir, spaces=spaces)
    print(f"finished at step {state.step} ({state.stage}); checkpoint {state.checkpoint}")
    return 0


def cmd_synthesize(args) -> int:
    from drgan.trainer import Synthesizer, synthesize_corpus

    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(Path(args.run_dir))
    synth = Synthesizer.from_checkpoint(ckpt)
    cfg = synth.cfg if args.seed is None else from_flat({"seed": args.seed}, synth.cfg)
    echo_resolved(args, cfg, "synthesize")
    out = Path(args.out) if args.out else Path(args.run_dir) / "synth"
    ds = synthesize_corpus(synth, args.per_grade, out / "images", cfg.seed, args.grades)
    grid_dir = out / "grids"
    grid_dir.mkdir(parents=True, exist_ok=True)
    for g in sorted(set(ds.grades.tolist())):
        images = [s.image for s in ds if s.grade == g]
        contact_sheet(images).save(grid_dir / f"grade_{g}.png")
    print(f"wrote {len(ds)} images to {out / 'images'} and grids to {grid_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from drgan import metrics

    cfg = resolve_config(args)
    echo_resolved(args, cfg, "evaluate")
    real = _load(args.real, "real")
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = metrics.MetricReport(metadata={"seed": cfg.seed, "n_real": len(real)})
    if args.fake:
        fake = _load(args.fake, "fake")
        report.metadata["n_fake"] = len(fake)
        net = metrics.RandomConvEmbedding()
        report.fid = metrics.fid(metrics.embed(real, net, "real"), metrics.embed(fake, net, "fake"))
        avg, per = metrics.per_grade_fid(real, fake, net)
        report.metadata["fid_per_grade"] = [None if math.isnan(v) else v for v in per]
        report.metadata["fid_grade_avg"] = None if math.isnan(avg) else avg
        res = metrics.swd(real, fake, rng=cfg.seed)
        report.swd_per_level, report.swd_avg = res.per_level, res.avg
    if args.test:
        test = _load(args.test, "test")
        fake_train = load_dataset(args.fake) if args.fake else Dataset()
        clf = {
            "epochs": cfg.epochs_pretrain,
            "lr": cfg.lr_pretrain,
            "beta1": cfg.beta1,
            "batch_size": cfg.batch_pretrain,
            "base_channels": cfg.grader_base_channels,
        }
        ab = metrics.augmentation_ab(real, fake_train, test, clf, args.seeds)
        arms = {}
        for seed, base, aug in zip(ab.seeds, ab.baseline, ab.augmented):
            arms[f"real/seed{seed}"] = base
            arms[f"real+fake/seed{seed}"] = aug
            base.write_json(out.parent / f"ab_real_seed{seed}.json")
            aug.write_json(out.parent / f"ab_realfake_seed{seed}.json")
        metrics.write_table(arms, out.with_suffix(".csv"))
        (out.parent / "ab_deltas.json").write_text(json.dumps(ab.deltas, indent=2) + "\n")
        last = ab.augmented[-1]
        report.kappa, report.tpr, report.accuracy = last.kappa, last.tpr, last.accuracy
        report.metadata["ab_seeds"] = list(ab.seeds)
    report.write_json(out)
    print(json.dumps(report.to_flat(), indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, seed=True):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--profile", choices=["smoke"], help="base profile applied before --config")
    p.add_argument("--run-dir", default=None, help=f"output root (default ${RUN_DIR_ENV} or ./runs)")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drgan", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy fundus corpus")
    _common(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--per-grade", type=int, default=10)
    group.add_argument("--imbalanced", choices=sorted(IMBALANCE_PROFILES))
    p.add_argument("--total", type=int, default=1000, help="corpus size with --imbalanced")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-grader", help="train the grading backbone")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain_grader)

    p = sub.add_parser("fit-spaces", help="fit per-grade latent Gaussians")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--grader")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit_spaces)

    p = sub.add_parser("train", help="pretrain, fit spaces and train the GAN")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--spaces", help="skip pretraining and use these grade spaces")
    p.add_argument("--ablate", action="append", choices=Ablation.names(), default=[])
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize a corpus and per-grade contact sheets")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: <run-dir>/LATEST)")
    p.add_argument("--per-grade", type=int, default=10)
    p.add_argument("--grades", type=int, nargs="+", choices=range(N_GRADES))
    p.add_argument("--out")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="FID/SWD and the augmentation A/B harness")
    _common(p)
    p.add_argument("--real", required=True, help="real (training) dataset")
    p.add_argument("--fake", help="synthesized dataset")
    p.add_argument("--test", help="held-out test set; enables the A/B harness")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", help="report.json path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.run_dir is None:
        args.run_dir = str(default_run_dir())
    try:
        return args.func(args)
    except DRGANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        last = getattr(exc, "last_checkpoint", None)
        if last is not None:
            print(f"last good checkpoint: {last}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
