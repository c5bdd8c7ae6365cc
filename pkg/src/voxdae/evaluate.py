"""Reconstruction metrics, denoising/completion tables, embeddings, probes and exports."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .config import derive_rng
from .corruption import NoiseSpec, corrupt, noise_floor
from .mesh import ACTIVE_VOXELS, VoxelGrid
from .tensor import sgd_momentum_step

TABLE2_PRESETS = ("random:0.3", "random:0.5")
TABLE3_PRESETS = ("slice:0.1", "slice:0.2", "slice:0.3")


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def reconstruction_error(prob, original, threshold: float = 0.5) -> float:
    """Percent of mismatching voxels, compared over the whole grid, normalized by 24^3."""
    if isinstance(prob, VoxelGrid):
        prob = prob.occupancy
    orig = original.occupancy if isinstance(original, VoxelGrid) else np.asarray(original)
    if np.shape(prob) != orig.shape:
        raise ValueError(f"shape mismatch: {np.shape(prob)} vs {orig.shape}")
    diff = np.count_nonzero(binarize(prob, threshold) != (orig >= threshold))
    return 100.0 * diff / ACTIVE_VOXELS


@dataclass
class EvalReport:
    title: str
    rows: list[tuple[str, dict[str, float]]]
    columns: tuple[str, ...] = ("error_percent",)
    noise: str = "none"
    checkpoint: str = ""
    config: str = ""
    timestamp: float = field(default_factory=time.time)
    runtime_ms: float = 0.0

    def mean(self) -> dict[str, float]:
        return {c: float(np.mean([r[c] for _, r in self.rows])) for c in self.columns}

    def to_csv(self) -> str:
        """Deterministic CSV: metadata comments, one row per class, then the mean row."""
        buf = io.StringIO()
        buf.write(f"# {self.title}\n# noise: {self.noise}\n# checkpoint: {self.checkpoint}\n# config: {self.config}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("class",) + self.columns)
        for name, vals in self.rows:
            w.writerow([name] + [f"{vals[c]:.6f}" for c in self.columns])
        mean = self.mean()
        w.writerow(["mean"] + [f"{mean[c]:.6f}" for c in self.columns])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max([len(n) for n, _ in self.rows] + [10])
        head = f"{'Class':<{width}} | " + " | ".join(f"{c:>16}" for c in self.columns)
        lines = [self.title, f"noise: {self.noise}", head, "-" * len(head)]
        for name, vals in self.rows:
            lines.append(f"{name:<{width}} | " + " | ".join(f"{vals[c]:>16.2f}" for c in self.columns))
        lines.append("=" * len(head))
        mean = self.mean()
        lines.append(f"{'Mean':<{width}} | " + " | ".join(f"{mean[c]:>16.2f}" for c in self.columns))
        return "\n".join(lines) + "\n"

    def timing(self) -> dict:
        return {"timestamp": self.timestamp, "runtime_ms_per_instance": self.runtime_ms}


def _class_names(grids: Sequence[VoxelGrid], names: Sequence[str] | None) -> list[str]:
    labels = sorted({g.label for g in grids if g.label is not None})
    if names is None:
        return [str(l) for l in labels]
    return [names[l] for l in labels]


def denoise_table(model: M.ModelParams, testset: Sequence[VoxelGrid], noise: NoiseSpec,
                  class_names: Sequence[str] | None = None, threshold: float = 0.5,
                  title: str = "Average reconstruction error (%)") -> EvalReport:
    """Per-class mean error of the model on corrupted test grids, next to the do-nothing baseline.

    Instance ``i`` is corrupted with a generator derived from
    ``(noise.seed, i)``, so two models evaluated with the same spec see the
    same corrupted inputs.
    """
    per_class: dict[int, list[tuple[float, float]]] = {}
    t0 = time.perf_counter()
    for i, g in enumerate(testset):
        noisy = corrupt(g, noise, derive_rng(noise.seed, f"instance/{i}"))
        err = reconstruction_error(M.reconstruct(model, noisy), g, threshold)
        per_class.setdefault(g.label if g.label is not None else -1, []).append((err, noise_floor(g, noisy)))
    elapsed = time.perf_counter() - t0
    labels = sorted(per_class)
    names = _class_names(testset, class_names) if -1 not in per_class else [str(l) for l in labels]
    rows = []
    for name, lab in zip(names, labels):
        arr = np.array(per_class[lab])
        rows.append((name, {"error_percent": float(arr[:, 0].mean()),
                            "noise_floor_percent": float(arr[:, 1].mean())}))
    return EvalReport(title, rows, ("error_percent", "noise_floor_percent"), noise.label(),
                      model.digest(), runtime_ms=1000 * elapsed / max(len(testset), 1))


def interpolate(model: M.ModelParams, source, target, steps: int = 10) -> list[np.ndarray]:
    """Decode ``(1 - a) * code(source) + a * code(target)`` for ``a = 0, 1/(steps-1), ..., 1``."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    cs, ct = M.encode(model, source), M.encode(model, target)
    delta = ct - cs  # exactly zero for identical endpoints
    out = []
    for t in range(1, steps + 1):
        a = (t - 1) / (steps - 1)
        code = ct if t == steps else cs + np.asarray(a, dtype=cs.dtype) * delta
        out.append(M.decode(model, code))
    return out


@dataclass
class EmbeddingSet:
    features: np.ndarray  # (N, bottleneck)
    labels: np.ndarray
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("feature rows and labels differ in count")

    def save(self, path) -> None:
        np.savez(path, features=self.features, labels=self.labels, sources=np.array(self.sources))

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        with np.load(path) as z:
            return cls(z["features"], z["labels"], [str(s) for s in z["sources"]])


def extract_embeddings(model: M.ModelParams, dataset: Sequence[VoxelGrid], batch: int = 16) -> EmbeddingSet:
    feats = []
    for b in range(0, len(dataset), batch):
        feats.append(M.encode(model, np.stack([g.occupancy for g in dataset[b : b + batch]])))
    labels = np.array([-1 if g.label is None else g.label for g in dataset])
    return EmbeddingSet(np.concatenate(feats), labels, [g.source or "" for g in dataset])


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, epochs: int = 50, lr: float = 0.01,
                 reg: float = 1e-4, seed: int = 0) -> float:
    """Test accuracy (percent) of a one-vs-rest hinge-loss linear classifier.

    Features are standardized with training statistics; training is
    per-sample SGD on the L2-regularized hinge loss, shuffled per epoch.
    """
    x = train.features.astype(np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd[sd < 1e-8] = 1.0
    x = (x - mu) / sd
    xt = (test.features.astype(np.float64) - mu) / sd
    classes = np.unique(train.labels)
    y = np.where(train.labels[:, None] == classes[None, :], 1.0, -1.0)
    w = np.zeros((len(classes), x.shape[1]))
    b = np.zeros(len(classes))
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for i in rng.permutation(len(x)):
            active = y[i] * (w @ x[i] + b) < 1
            w *= 1 - lr * reg
            w[active] += lr * y[i, active, None] * x[i]
            b[active] += lr * y[i, active]
    pred = classes[np.argmax(xt @ w.T + b, axis=1)]
    return 100.0 * float(np.mean(pred == test.labels))


@dataclass
class FineTuneConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    joint: bool = False  # also update the encoder
    hidden: int = 512
    seed: int = 0


def fine_tune(model: M.ModelParams, train: Sequence[VoxelGrid], num_classes: int,
              config: FineTuneConfig = FineTuneConfig()) -> M.ClassifierHead:
    """Train the bottleneck-hidden-classes head, optionally together with the encoder."""
    head = M.fine_tune_head(model, num_classes, config.hidden, derive_rng(config.seed, "head-init"))
    vols = np.stack([g.occupancy for g in train])
    labels = np.array([g.label for g in train])
    enc_keys = [k for k in model.params if k.split(".")[0] in ("conv1", "conv2", "fc")]
    codes = None if config.joint else extract_embeddings(model, train).features
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, f"finetune-shuffle/{epoch}").permutation(len(train))
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            if config.joint:
                x, _ = M._volume_batch(vols[idx], model.spec.input_edge, model.dtype)
                code, enc_cache = M.encode_batch(model, x)
            else:
                code = codes[idx]
            logits, cache = M.head_forward(head, code)
            _, grads, g_code = M.head_backward(head, cache, logits, labels[idx])
            sgd_momentum_step(head.params, grads, head.velocity, config.lr, config.momentum)
            if config.joint:
                enc_grads, _ = M.encode_backward(model, enc_cache, g_code)
                sgd_momentum_step({k: model.params[k] for k in enc_keys}, enc_grads,
                                  {k: model.velocity[k] for k in enc_keys}, config.lr, config.momentum)
    return head


def classify(model: M.ModelParams, head: M.ClassifierHead, grids: Sequence[VoxelGrid]) -> np.ndarray:
    codes = extract_embeddings(model, grids).features
    logits, _ = M.head_forward(head, codes)
    return np.argmax(logits, axis=1)


def fine_tune_eval(model: M.ModelParams, train: Sequence[VoxelGrid], test: Sequence[VoxelGrid],
                   num_classes: int, config: FineTuneConfig = FineTuneConfig()) -> float:
    """Test accuracy (percent) after fine-tuning a classification head."""
    head = fine_tune(model, train, num_classes, config)
    pred = classify(model, head, test)
    return 100.0 * float(np.mean(pred == np.array([g.label for g in test])))


def bench_inference(model: M.ModelParams, n: int = 10, grid=None) -> float:
    """Mean wall-clock milliseconds of one eval-mode forward pass."""
    if grid is None:
        grid = np.zeros((model.spec.input_edge,) * 3, dtype=np.uint8)
    M.reconstruct(model, grid)
    t0 = time.perf_counter()
    for _ in range(n):
        M.reconstruct(model, grid)
    return 1000 * (time.perf_counter() - t0) / n


# --- image and mesh export ---------------------------------------------------------


def _to_u8(vol: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(vol, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def _upscale(img: np.ndarray, k: int) -> np.ndarray:
    return np.kron(img, np.ones((k, k), dtype=img.dtype))


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes())


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, np.uint8).tobytes())


def write_obj(vol: np.ndarray, path, threshold: float = 0.5) -> int:
    """One cube per occupied voxel (x right, y up the rows, z the slices). Returns cube count."""
    occ = np.argwhere(np.asarray(vol) >= threshold)
    corners = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
    quads = [(1, 4, 3, 2), (5, 6, 7, 8), (1, 2, 6, 5), (2, 3, 7, 6), (3, 4, 8, 7), (4, 1, 5, 8)]
    lines = []
    for n, (z, y, x) in enumerate(occ):
        for c in corners:
            lines.append(f"v {x + c[0]} {y + c[1]} {z + c[2]}")
        base = 8 * n
        lines += ["f " + " ".join(str(base + q) for q in quad) for quad in quads]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(occ)


def render_slices(vol, prefix, scale: int = 8, columns: int = 6, threshold: float = 0.5) -> list[Path]:
    """Mid-slices per axis (PGM), a montage of all z-slices (PPM) and an OBJ export."""
    if isinstance(vol, VoxelGrid):
        vol = vol.occupancy
    vol = np.asarray(vol, dtype=np.float64)
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for axis, name in enumerate("zyx"):
        mid = np.take(vol, vol.shape[axis] // 2, axis=axis)
        p = prefix.with_name(f"{prefix.name}_{name}.pgm")
        write_pgm(_upscale(_to_u8(mid), scale), p)
        written.append(p)
    depth, h, w = vol.shape
    rows = -(-depth // columns)
    tile = 2
    mont = np.zeros((rows * (h + tile) + tile, columns * (w + tile) + tile, 3), dtype=np.uint8)
    mont[..., 2] = 96  # blue separators
    for i in range(depth):
        r, c = divmod(i, columns)
        y0, x0 = tile + r * (h + tile), tile + c * (w + tile)
        mont[y0 : y0 + h, x0 : x0 + w] = _to_u8(vol[i])[..., None]
    p = prefix.with_name(f"{prefix.name}_montage.ppm")
    write_ppm(np.kron(mont, np.ones((scale // 2 or 1, scale // 2 or 1, 1), dtype=np.uint8)), p)
    written.append(p)
    p = prefix.with_name(f"{prefix.name}.obj")
    write_obj(vol, p, threshold)
    written.append(p)
    return written
