"""Render a 10-step code interpolation between two test shapes of a trained model.

Usage: python scripts/interpolation_demo.py CHECKPOINT [--source 0] [--target 20] [--out runs/interp]
"""
from __future__ import annotations

import argparse
from pathlib import Path

from voxdae import evaluate as E
from voxdae import experiments as X
from voxdae import model as M


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--source", type=int, default=0)
    ap.add_argument("--target", type=int, default=20)
    ap.add_argument("--out", default="runs/interp")
    args = ap.parse_args()
    model = M.load_checkpoint(args.checkpoint)
    _, test = X.desk_split()
    frames = E.interpolate(model, test[args.source], test[args.target])
    out = Path(args.out)
    for t, prob in enumerate(frames, start=1):
        E.render_slices(prob, out / f"step_{t:02d}")
        print(f"step {t:2d}: {int((prob >= 0.5).sum())} occupied voxels")


if __name__ == "__main__":
    main()
