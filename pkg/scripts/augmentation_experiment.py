"""A/B grading experiment: imbalanced real corpus vs the same corpus plus balanced synthetic images."""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from drgan.data import generate_corpus, profile_counts
from drgan.metrics import augmentation_ab, write_table
from drgan.trainer import Synthesizer, synthesize_corpus


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    p.add_argument("--total", type=int, default=400, help="real training images (EyePACS-like grade mix)")
    p.add_argument("--test-per-grade", type=int, default=30)
    p.add_argument("--synth-per-grade", type=int, default=40)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--out", default="runs/ab")
    return p.parse_args()


def main():
    args = parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    real = generate_corpus(100, profile_counts(args.total), 64)
    test = generate_corpus(200, [args.test_per_grade] * 5, 64)
    fake = synthesize_corpus(Synthesizer.from_checkpoint(args.checkpoint), args.synth_per_grade, None, seed=300)
    ab = augmentation_ab(real, fake, test, {"epochs": args.epochs, "batch_size": 32}, seeds=args.seeds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for seed, base, aug in zip(ab.seeds, ab.baseline, ab.augmented):
        rows[f"real_seed{seed}"] = base
        rows[f"realfake_seed{seed}"] = aug
    write_table(rows, out / "ab.csv")
    (out / "ab_deltas.json").write_text(json.dumps(ab.deltas, indent=2) + "\n")

    print("real counts", real.counts().tolist())
    for seed, d in zip(ab.seeds, ab.deltas):
        print(f"seed {seed}: accuracy {d['accuracy']:+.3f}  kappa {d['kappa']:+.3f}  tpr {np.round(d['tpr'], 3).tolist()}")
    print(f"median minority (3,4) TPR delta: {ab.median_delta_tpr((3, 4)):+.3f}")


if __name__ == "__main__":
    main()
