"""Train the desk-scale denoiser and its no-noise baseline, then print every table.

Usage: python scripts/desk_scale.py [--out runs/desk] [--epochs 30] [--seed 0]

Writes both checkpoints, their loss histories, one CSV per noise preset and
model, and a probe summary to the output directory.
"""
from __future__ import annotations

import argparse
import json
from dataclasses import replace
from pathlib import Path

from voxdae import evaluate as E
from voxdae import experiments as X
from voxdae import model as M
from voxdae.corruption import NoiseSpec
from voxdae.trainer import write_history


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--epochs", type=int, default=X.DESK.epochs)
    ap.add_argument("--seed", type=int, default=X.DESK.seed)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = replace(X.DESK, epochs=args.epochs, seed=args.seed)
    train, test = X.desk_split()

    def progress(epoch, loss, _model):
        if epoch % 5 == 0:
            print(f"  epoch {epoch:3d}  loss {loss:.5f}", flush=True)

    print(f"training on {len(train)} grids, testing on {len(test)}")
    (dae, dae_hist, dae_s), (cae, cae_hist, cae_s) = X.train_pair(train, config, progress)
    print(f"DAE {dae_s / 60:.1f} min, CAE {cae_s / 60:.1f} min")
    for name, model, hist in (("dae", dae, dae_hist), ("cae", cae, cae_hist)):
        M.save_checkpoint(model, out / f"{name}.vcda")
        write_history(hist, out / f"{name}.history.csv")

    for preset in E.TABLE2_PRESETS + E.TABLE3_PRESETS:
        noise = NoiseSpec.parse(preset, seed=1)
        for name, model in (("dae", dae), ("cae", cae)):
            report = E.denoise_table(model, test, noise, X.CLASS_NAMES, title=f"{name.upper()} {preset}")
            report.config = config.digest()
            (out / f"{name}_{preset.replace(':', '_')}.csv").write_text(report.to_csv())
            print(report.to_table())

    fresh = X.untrained(config)
    probes = {name: E.linear_probe(E.extract_embeddings(m, train), E.extract_embeddings(m, test))
              for name, m in (("dae", dae), ("cae", cae), ("untrained", fresh))}
    print("linear probe accuracy (%):", probes)
    (out / "probe.json").write_text(json.dumps(probes, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
