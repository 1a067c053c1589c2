"""Train the desk smoke profile on a balanced toy corpus and compare FID against an untrained generator."""

import argparse
import logging
import time

import torch

from drgan.config import smoke_config
from drgan.data import generate_corpus, to_tensors
from drgan.metrics import RandomConvEmbedding, embed, fid
from drgan.trainer import Synthesizer, build_models, train


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-grade", type=int, default=40)
    p.add_argument("--eval-per-grade", type=int, default=20)
    p.add_argument("--run-dir", default="runs/smoke")
    return p.parse_args()


def main():
    args = parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    corpus = generate_corpus(args.seed, [args.per_grade] * 5, 64)
    t0 = time.perf_counter()
    state, trainer = train(corpus, smoke_config(seed=args.seed), args.run_dir)
    trainer.close()
    print(f"trained {state.step} steps in {time.perf_counter() - t0:.0f}s; checkpoint {state.checkpoint}")

    held_out = generate_corpus(1000 + args.seed, [args.eval_per_grade] * 5, 64)
    c, _, y = to_tensors(held_out)
    net = RandomConvEmbedding()
    real = embed(held_out, net, "real")
    gen, mapping, _ = build_models(trainer.cfg)
    for name, synth in (
        ("trained", Synthesizer.from_trainer(trainer)),
        ("untrained", Synthesizer(trainer.cfg, gen, mapping, trainer.spaces)),
    ):
        images, _ = synth.generate(c, y, torch.Generator().manual_seed(0))
        print(f"FID {name}: {fid(real, embed(images, net, name)):.4f}")


if __name__ == "__main__":
    main()
