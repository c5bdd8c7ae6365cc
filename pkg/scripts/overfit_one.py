"""Overfit a single synthetic box and report loss and reconstruction error.

Usage: python scripts/overfit_one.py [--epochs 200] [--lr 0.05] [--p 0.5] [--init he]
"""
from __future__ import annotations

import argparse

import numpy as np

from voxdae import evaluate as E
from voxdae import model as M
from voxdae.datasets import synthetic_shapes
from voxdae.trainer import TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--p", type=float, default=0.5)
    ap.add_argument("--init", default="he", choices=sorted(M.INIT_SCHEMES))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    shape = synthetic_shapes("box", 1, np.random.default_rng(7))[0]
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, p=args.p, batch_size=1, seed=args.seed, init=args.init)

    def progress(epoch, loss, model):
        if epoch % 20 == 0 or epoch == args.epochs:
            err = E.reconstruction_error(M.reconstruct(model, shape), shape)
            print(f"epoch {epoch:4d}  bce {loss:.5f}  error {err:.3f}%", flush=True)

    train(cfg, [shape], on_epoch=progress)


if __name__ == "__main__":
    main()
