"""Command-line entry point: ``voxdae <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical
abort. Failures print one line ``voxdae-error: <code>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = ("voxelize", "synth", "train", "denoise", "complete", "interpolate", "embed", "probe",
            "finetune", "bench", "render")

# flag name -> (type, default); these may also come from --config
SHARED = {
    "seed": (int, 0),
    "dataset": (str, None),
    "noise": (str, None),
    "precision": (int, None),
    "epochs": (int, None),
    "lr": (float, None),
    "momentum": (float, None),
    "p": (float, None),
    "steps": (int, 10),
    "threshold": (float, 0.5),
    "threads": (int, None),
    "batch_size": (int, None),
    "init": (str, None),
    "per_class": (int, 50),
    "test_per_class": (int, 20),
    "data_seed": (int, 0),
    "subset": (int, 10),
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().strip()}")


def _add_shared(p: argparse.ArgumentParser, *names: str) -> None:
    helps = {
        "seed": "master seed; every random stream is derived from it",
        "dataset": "ModelNet root, a directory written by 'synth', or 'synthetic' (env VOXDAE_DATA)",
        "noise": "random:P | slice:PCT | none",
        "precision": "32 or 64 bit floats",
        "epochs": "training epochs",
        "lr": "learning rate",
        "momentum": "momentum coefficient",
        "p": "input dropout rate during training (0 trains the plain autoencoder)",
        "steps": "interpolation steps including both endpoints",
        "threshold": "occupancy threshold for binarizing probabilities",
        "threads": "cap on BLAS worker threads",
        "batch_size": "samples per gradient step",
        "init": "weight init: glorot or he",
        "per_class": "synthetic training shapes per class",
        "test_per_class": "synthetic test shapes per class",
        "data_seed": "seed of the synthetic shape generator",
        "subset": "ModelNet subset, 10 or 40",
    }
    for n in names:
        t, _ = SHARED[n]
        p.add_argument("--" + n.replace("_", "-"), dest=n, type=t, default=None, help=helps[n])


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="voxdae", description="Volumetric denoising autoencoder toolkit.")
    sub = root.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    common = ("seed", "threads")

    p = sub.add_parser("voxelize", help="OFF mesh to 30^3 VOXG grid(s)")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--rotations", action="store_true", help="write all 12 gravity-axis rotations")
    p.add_argument("--label", type=int, default=None)
    _add_shared(p, *common)

    p = sub.add_parser("synth", help="write the synthetic train/test split as VOXG files")
    p.add_argument("--out", required=True)
    _add_shared(p, *common, "per_class", "test_per_class", "data_seed")

    p = sub.add_parser("train", help="train a denoising autoencoder")
    p.add_argument("--out", required=True, help="checkpoint path; history goes to <out>.history.csv")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--config")
    _add_shared(p, *common, "dataset", "precision", "epochs", "lr", "momentum", "p", "batch_size", "init",
                "per_class", "test_per_class", "data_seed", "subset")

    for name, default in (("denoise", "random:0.5"), ("complete", "slice:0.3")):
        p = sub.add_parser(name, help=f"reconstruction-error table (default noise {default})")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", help="CSV report path")
        p.add_argument("--config")
        _add_shared(p, *common, "dataset", "noise", "threshold", "precision", "per_class", "test_per_class",
                    "data_seed", "subset")

    p = sub.add_parser("interpolate", help="decode a line between two test shapes' codes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", type=int, default=0, help="test-set index")
    p.add_argument("--target", type=int, default=1, help="test-set index")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config")
    _add_shared(p, *common, "dataset", "steps", "threshold", "per_class", "test_per_class", "data_seed",
                "subset")

    p = sub.add_parser("embed", help="bottleneck codes of a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phase", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True, help=".npz path")
    p.add_argument("--config")
    _add_shared(p, *common, "dataset", "per_class", "test_per_class", "data_seed", "subset")

    p = sub.add_parser("probe", help="linear-probe accuracy on frozen codes")
    p.add_argument("--checkpoint", help="extract codes from --dataset with this model")
    p.add_argument("--train-embeddings")
    p.add_argument("--test-embeddings")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_shared(p, *common, "dataset", "epochs", "lr", "per_class", "test_per_class", "data_seed", "subset")

    p = sub.add_parser("finetune", help="train a classifier head on the bottleneck")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--joint", action="store_true", help="also update the encoder")
    p.add_argument("--out")
    p.add_argument("--config")
    _add_shared(p, *common, "dataset", "epochs", "lr", "momentum", "batch_size", "per_class",
                "test_per_class", "data_seed", "subset")

    p = sub.add_parser("bench", help="mean eval-mode forward time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=10)
    _add_shared(p, *common)

    p = sub.add_parser("render", help="slice images and OBJ of a grid or its reconstruction")
    p.add_argument("input", help="VOXG file")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--checkpoint", help="render the model's reconstruction instead")
    _add_shared(p, *common, "noise", "threshold")
    return root


def _settings(args: argparse.Namespace) -> dict:
    """Merge flags over config-file values over built-in defaults, validating each."""
    from .config import ConfigError, read_config

    conf = {}
    if getattr(args, "config", None):
        try:
            conf = read_config(args.config)
        except ConfigError as e:
            raise UsageError(f"{args.config}: {e}") from None
        except OSError as e:
            raise DataError(f"cannot read config {args.config}: {e.strerror or e}") from None
    out = dict(conf)
    for name, (typ, default) in SHARED.items():
        val = getattr(args, name, None)
        if val is None and name in conf:
            try:
                val = typ(conf[name])
            except ValueError:
                raise UsageError(f"config value for {name} is not a valid {typ.__name__}: {conf[name]!r}") from None
        out[name] = default if val is None else val
    if out["dataset"] is None:
        out["dataset"] = os.environ.get("VOXDAE_DATA") or "synthetic"
    return out


def _validate(cmd: str, s: dict, args) -> None:
    from .corruption import NoiseSpec

    if s["precision"] is not None and s["precision"] not in (32, 64):
        raise UsageError(f"--precision must be 32 or 64, got {s['precision']}")
    if not 0 < s["threshold"] < 1:
        raise UsageError(f"--threshold must lie in (0, 1), got {s['threshold']}")
    if s["steps"] < 2:
        raise UsageError(f"--steps must be >= 2, got {s['steps']}")
    if s["threads"] is not None and s["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    if s["subset"] not in (10, 40):
        raise UsageError(f"--subset must be 10 or 40, got {s['subset']}")
    if s["per_class"] < 1 or s["test_per_class"] < 1:
        raise UsageError("--per-class and --test-per-class must be >= 1")
    for k in ("epochs", "batch_size"):
        if s[k] is not None and s[k] < 1:
            raise UsageError(f"--{k.replace('_', '-')} must be >= 1")
    if s["lr"] is not None and not s["lr"] > 0:
        raise UsageError("--lr must be > 0")
    if s["noise"] is not None:
        try:
            NoiseSpec.parse(s["noise"])
        except ValueError as e:
            raise UsageError(str(e)) from None
    if cmd == "train":
        from .config import ConfigError

        try:
            _train_config(s, args).validate()
        except ConfigError as e:
            raise UsageError(str(e)) from None


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


# --- data -----------------------------------------------------------------------------


def _load_split(s: dict, phase: str):
    """(grids, class names) for ``phase`` of the configured dataset."""
    from .datasets import MODELNET10, MODELNET40, SYNTHETIC_CLASSES, DatasetError, load_dataset, synthetic_split
    from .mesh import OffError, read_voxg

    ds = s["dataset"]
    if ds == "synthetic":
        train, test = synthetic_split(s["per_class"], s["test_per_class"], s["data_seed"])
        return (train if phase == "train" else test), list(SYNTHETIC_CLASSES)
    root = Path(ds)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    voxg = sorted((root / phase).glob("*.voxg")) if (root / phase).is_dir() else []
    if voxg:
        try:
            grids = [read_voxg(p) for p in voxg]
        except ValueError as e:
            raise DataError(str(e)) from None
        names_file = root / "classes.txt"
        labels = sorted({g.label for g in grids if g.label is not None})
        names = names_file.read_text().split() if names_file.exists() else [str(l) for l in range(max(labels) + 1)]
        return grids, names
    try:
        grids = list(load_dataset(root, s["subset"], phase, with_rotations=(phase == "train")))
    except (DatasetError, OffError) as e:
        raise DataError(str(e)) from None
    if not grids:
        raise DataError(f"no {phase} models found under {root}")
    return grids, list(MODELNET10 if s["subset"] == 10 else MODELNET40)


def _load_model(path, precision: int | None = None):
    import numpy as np

    from . import model as M

    try:
        m = M.load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e.strerror or e}") from None
    except M.CheckpointError as e:
        raise DataError(str(e)) from None
    if precision is not None:
        dt = np.float32 if precision == 32 else np.float64
        if m.dtype != dt:
            m.params = {k: v.astype(dt) for k, v in m.params.items()}
            m.velocity = {k: v.astype(dt) for k, v in m.velocity.items()}
    return m


def _write(path, data: str | bytes) -> None:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data.encode() if isinstance(data, str) else data)
    except OSError as e:
        raise DataError(f"cannot write {p}: {e.strerror or e}") from None


# --- commands ---------------------------------------------------------------------------


def _train_config(s: dict, args):
    from .trainer import TrainConfig

    items = {k: v for k, v in s.items() if v is not None}
    if getattr(args, "checkpoint_every", None) is not None:
        items["checkpoint_every"] = args.checkpoint_every
    items["checkpoint_path"] = args.out
    return TrainConfig.from_mapping(items)


def cmd_voxelize(args, s) -> int:
    from .mesh import DegenerateMeshError, OffError, augment, read_off, voxelize, write_voxg

    try:
        mesh = read_off(args.input)
        grids = augment(mesh) if args.rotations else [voxelize(mesh)]
    except OSError as e:
        raise DataError(f"cannot read {args.input}: {e.strerror or e}") from None
    except (OffError, DegenerateMeshError) as e:
        raise DataError(f"{args.input}: {e}") from None
    out = Path(args.out)
    for g in grids:
        g.label = args.label
        path = out.with_name(f"{out.stem}_r{g.rotation:02d}{out.suffix}") if args.rotations else out
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            write_voxg(g, path)
        except OSError as e:
            raise DataError(f"cannot write {path}: {e.strerror or e}") from None
        print(f"{path} {g.count}")
    return EXIT_OK


def cmd_synth(args, s) -> int:
    from .datasets import SYNTHETIC_CLASSES, synthetic_split

    train, test = synthetic_split(s["per_class"], s["test_per_class"], s["data_seed"])
    root = Path(args.out)
    for phase, grids in (("train", train), ("test", test)):
        for i, g in enumerate(grids):
            _write(root / phase / f"{i:05d}_{SYNTHETIC_CLASSES[g.label]}.voxg", g.to_bytes())
    _write(root / "classes.txt", "\n".join(SYNTHETIC_CLASSES) + "\n")
    print(f"wrote {len(train)} train and {len(test)} test grids to {root}")
    return EXIT_OK


def cmd_train(args, s) -> int:
    from . import model as M
    from .trainer import train, write_history

    cfg = _train_config(s, args)
    data, _ = _load_split(s, "train")
    model = _load_model(args.checkpoint, cfg.precision) if args.checkpoint else None

    def report(epoch, loss, _m):
        print(f"epoch {epoch} loss {loss:.6f}", flush=True)

    model, history = train(cfg, data, model=model, on_epoch=report)
    model.meta["dataset"] = s["dataset"]
    _write(args.out, M.checkpoint_bytes(model))
    hist = Path(args.out).with_suffix(".history.csv")
    try:
        write_history(history, hist)
    except OSError as e:
        raise DataError(f"cannot write {hist}: {e.strerror or e}") from None
    print(f"checkpoint {args.out} ({model.digest()}), history {hist}")
    return EXIT_OK


def cmd_table(args, s, default_noise: str) -> int:
    from .config import config_hash
    from .corruption import NoiseSpec
    from .evaluate import denoise_table

    noise = NoiseSpec.parse(s["noise"] or default_noise, seed=s["seed"])
    model = _load_model(args.checkpoint, s["precision"])
    grids, names = _load_split(s, "test")
    title = "Average completion error (%)" if noise.kind == "slicing" else "Average denoising error (%)"
    report = denoise_table(model, grids, noise, names, s["threshold"], title)
    report.config = config_hash({k: s[k] for k in ("dataset", "noise", "threshold", "seed", "per_class",
                                                    "test_per_class", "data_seed", "subset")}
                                | {"noise": noise.label()})
    print(report.to_table(), end="")
    print(f"runtime per instance: {report.runtime_ms:.2f} ms")
    if args.out:
        _write(args.out, report.to_csv())
    return EXIT_OK


def cmd_interpolate(args, s) -> int:
    import numpy as np

    from .evaluate import binarize, interpolate
    from .mesh import VoxelGrid

    model = _load_model(args.checkpoint)
    grids, _ = _load_split(s, "test")
    for idx in (args.source, args.target):
        if not 0 <= idx < len(grids):
            raise DataError(f"index {idx} outside the test set (size {len(grids)})")
    frames = interpolate(model, grids[args.source], grids[args.target], s["steps"])
    out = Path(args.out)
    for t, prob in enumerate(frames, start=1):
        _write(out / f"step_{t:02d}.voxg", VoxelGrid(binarize(prob, s["threshold"])).to_bytes())
    try:
        np.save(out / "probabilities.npy", np.stack(frames))
    except OSError as e:
        raise DataError(f"cannot write {out}: {e.strerror or e}") from None
    print(f"wrote {len(frames)} steps to {out}")
    return EXIT_OK


def cmd_embed(args, s) -> int:
    from .evaluate import extract_embeddings

    model = _load_model(args.checkpoint)
    grids, _ = _load_split(s, args.phase)
    emb = extract_embeddings(model, grids)
    try:
        emb.save(args.out)
    except OSError as e:
        raise DataError(f"cannot write {args.out}: {e.strerror or e}") from None
    print(f"{args.out}: {emb.features.shape[0]} x {emb.features.shape[1]}")
    return EXIT_OK


def cmd_probe(args, s) -> int:
    from .evaluate import EmbeddingSet, extract_embeddings, linear_probe

    if args.checkpoint:
        model = _load_model(args.checkpoint)
        train = extract_embeddings(model, _load_split(s, "train")[0])
        test = extract_embeddings(model, _load_split(s, "test")[0])
    elif args.train_embeddings and args.test_embeddings:
        try:
            train, test = EmbeddingSet.load(args.train_embeddings), EmbeddingSet.load(args.test_embeddings)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"cannot read embeddings: {e}") from None
    else:
        raise UsageError("probe needs --checkpoint or both --train-embeddings and --test-embeddings")
    kw = {"seed": s["seed"]}
    if s["epochs"] is not None:
        kw["epochs"] = s["epochs"]
    if s["lr"] is not None:
        kw["lr"] = s["lr"]
    acc = linear_probe(train, test, **kw)
    print(f"linear probe accuracy: {acc:.2f}%")
    if args.out:
        _write(args.out, json.dumps({"accuracy_percent": acc, **kw}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_finetune(args, s) -> int:
    from .evaluate import FineTuneConfig, fine_tune_eval

    model = _load_model(args.checkpoint)
    train, names = _load_split(s, "train")
    test, _ = _load_split(s, "test")
    kw = {k: s[k] for k in ("epochs", "lr", "momentum", "batch_size") if s[k] is not None}
    cfg = FineTuneConfig(joint=args.joint, seed=s["seed"], **kw)
    acc = fine_tune_eval(model, train, test, len(names), cfg)
    print(f"fine-tuned accuracy: {acc:.2f}%")
    if args.out:
        _write(args.out, json.dumps({"accuracy_percent": acc, "joint": args.joint, **kw}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_bench(args, s) -> int:
    from .evaluate import bench_inference

    if args.n < 1:
        raise UsageError("-n must be >= 1")
    ms = bench_inference(_load_model(args.checkpoint), args.n)
    print(f"{ms:.2f} ms per completion (mean of {args.n})")
    return EXIT_OK


def cmd_render(args, s) -> int:
    from . import model as M
    from .config import derive_rng
    from .corruption import NoiseSpec, corrupt
    from .evaluate import render_slices
    from .mesh import read_voxg

    try:
        grid = read_voxg(args.input)
    except OSError as e:
        raise DataError(f"cannot read {args.input}: {e.strerror or e}") from None
    except ValueError as e:
        raise DataError(f"{args.input}: {e}") from None
    vol = grid.occupancy
    if s["noise"]:
        grid = corrupt(grid, NoiseSpec.parse(s["noise"], seed=s["seed"]), derive_rng(s["seed"], "render"))
        vol = grid.occupancy
    if args.checkpoint:
        vol = M.reconstruct(_load_model(args.checkpoint), grid)
    try:
        paths = render_slices(vol, args.out, threshold=s["threshold"])
    except OSError as e:
        raise DataError(f"cannot write {args.out}: {e.strerror or e}") from None
    for p in paths:
        print(p)
    return EXIT_OK


def _dispatch(args, s) -> int:
    cmd = args.command
    if cmd in ("denoise", "complete"):
        return cmd_table(args, s, "random:0.5" if cmd == "denoise" else "slice:0.3")
    return globals()[f"cmd_{cmd}"](args, s)


def _fail(code: int, msg: str) -> int:
    first, *rest = str(msg).splitlines() or [""]
    print(f"voxdae-error: {code}: {first}", file=sys.stderr)
    for line in rest:
        print(line, file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:  # --help
            return EXIT_OK if not e.code else EXIT_USAGE
        if not args.command:
            raise UsageError(f"missing command; choose from {', '.join(COMMANDS)}\n{parser.format_usage().strip()}")
        s = _settings(args)
        _limit_threads(s["threads"])
        _validate(args.command, s, args)
        return _dispatch(args, s)
    except UsageError as e:
        return _fail(EXIT_USAGE, e)
    except DataError as e:
        return _fail(EXIT_DATA, e)
    except ArithmeticError as e:
        return _fail(EXIT_NUMERIC, e)
    except (OSError, ValueError) as e:
        return _fail(EXIT_DATA, e)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
