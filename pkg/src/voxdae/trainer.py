"""Denoising training loop: fresh dropout corruption, clean targets, SGD with momentum."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .config import ConfigError, config_hash, derive_rng
from .corruption import NoiseSpec, corrupt
from .mesh import VoxelGrid
from .tensor import dropout_mask, sgd_momentum_step

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    def __init__(self, epoch: int, source: str | None, loss: float):
        self.epoch, self.source, self.loss = epoch, source, loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch} (sample {source})")


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 500
    p: float = 0.5  # input dropout rate; 0 trains the plain autoencoder baseline
    loss: str = "bce"
    batch_size: int = 1
    seed: int = 0
    dataset: str = "synthetic"
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    precision: int = 32
    fixed_mask: bool = False
    init: str = "glorot"

    def validate(self) -> "TrainConfig":
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.p <= 1:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.loss not in ("bce", "mse"):
            raise ConfigError(f"loss must be 'bce' or 'mse', got {self.loss!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init not in M.INIT_SCHEMES:
            raise ConfigError(f"init must be one of {sorted(M.INIT_SCHEMES)}, got {self.init!r}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        return self

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @classmethod
    def from_mapping(cls, items: dict) -> "TrainConfig":
        """Build from string values (config file or CLI), ignoring unrelated keys."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in items.items():
            if k not in kinds or v is None:
                continue
            t = kinds[k]
            try:
                if t == "bool":
                    kw[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes", "on")
                elif t == "int":
                    kw[k] = int(v)
                elif t == "float":
                    kw[k] = float(v)
                else:
                    kw[k] = str(v)
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kw).validate()

    def digest(self) -> str:
        # where checkpoints are written does not change the run
        items = asdict(self)
        del items["checkpoint_path"], items["checkpoint_every"]
        return config_hash(items)


def train(config: TrainConfig, dataset: Sequence[VoxelGrid], model: M.ModelParams | None = None,
          spec: M.ModelSpec | None = None,
          on_epoch: Callable[[int, float, M.ModelParams], None] | None = None
          ) -> tuple[M.ModelParams, list[float]]:
    """Train on ``dataset``; returns the model and the mean loss of each epoch.

    Every presentation draws a fresh input dropout mask (unless
    ``fixed_mask``); the loss target is always the clean grid. Samples are
    shuffled each epoch with an epoch-derived seed and grouped into batches
    whose gradients are summed.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if model is None:
        spec = spec or M.ModelSpec(dropout=config.p)
        model = M.init_model(spec, derive_rng(config.seed, "init"), dtype=config.dtype, scheme=config.init)
        model.seed = config.seed
    volumes = np.stack([g.occupancy for g in dataset])
    fixed = None
    if config.fixed_mask:
        mrng = derive_rng(config.seed, "fixed-mask")
        fixed = dropout_mask((len(dataset), 1) + volumes.shape[1:], config.p, mrng, model.dtype)
    history: list[float] = []
    start = int(model.meta.get("epoch", 0))
    for epoch in range(start, start + config.epochs):
        order = derive_rng(config.seed, f"shuffle/{epoch}").permutation(len(dataset))
        # per-epoch streams make a resumed run replay exactly
        mask_rng = derive_rng(config.seed, f"mask/{epoch}")
        total = 0.0
        for b in range(0, len(order), config.batch_size):
            idx = order[b : b + config.batch_size]
            batch = volumes[idx]
            mask = fixed[idx] if fixed is not None else None
            _, cache = M.forward(model, batch, "train", rng=mask_rng, p=config.p, mask=mask)
            value, grads, _ = M.backward(model, cache, batch, config.loss)
            if not math.isfinite(value):
                raise NumericalError(epoch + 1, dataset[int(idx[0])].source, value)
            sgd_momentum_step(model.params, grads, model.velocity, config.lr, config.momentum)
            total += value
        mean = total / len(dataset)
        history.append(mean)
        model.meta["epoch"] = epoch + 1
        log.info("epoch %d loss %.6f", epoch + 1, mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean, model)
        if config.checkpoint_every and config.checkpoint_path and (epoch + 1) % config.checkpoint_every == 0:
            model.meta.update(loss_tail=[round(h, 8) for h in history[-5:]], config=config.digest())
            M.save_checkpoint(model, config.checkpoint_path)
    model.meta.update(loss_tail=[round(h, 8) for h in history[-5:]], config=config.digest())
    return model, history


def write_history(history: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, h in enumerate(history, start=1):
            w.writerow([i, repr(float(h))])


def evaluate_epoch(model: M.ModelParams, dataset: Sequence[VoxelGrid], noise: NoiseSpec,
                   threshold: float = 0.5) -> float:
    """Mean eval-mode reconstruction error (percent) over ``dataset`` under ``noise``."""
    from .evaluate import reconstruction_error

    rng = np.random.default_rng(noise.seed)
    errs = [reconstruction_error(M.reconstruct(model, corrupt(g, noise, rng)), g, threshold) for g in dataset]
    return float(np.mean(errs))
