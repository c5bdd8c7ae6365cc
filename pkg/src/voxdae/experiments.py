"""Desk-scale experiment recipe shared by the scripts and the acceptance suite.

Four synthetic classes, 200 training and 80 test grids. The denoising
model and its no-noise baseline are trained identically except for the
input dropout rate.
"""
from __future__ import annotations

import time
from dataclasses import replace

from . import model as M
from .datasets import SYNTHETIC_CLASSES, synthetic_split
from .mesh import VoxelGrid
from .trainer import TrainConfig, train

DESK = TrainConfig(lr=0.1, momentum=0.9, epochs=30, p=0.5, batch_size=8, seed=0, init="he")
TRAIN_PER_CLASS = 50
TEST_PER_CLASS = 20
CLASS_NAMES = list(SYNTHETIC_CLASSES)


def desk_split(seed: int = 0) -> tuple[list[VoxelGrid], list[VoxelGrid]]:
    return synthetic_split(TRAIN_PER_CLASS, TEST_PER_CLASS, seed)


def train_timed(config: TrainConfig, data, on_epoch=None) -> tuple[M.ModelParams, list[float], float]:
    t0 = time.perf_counter()
    model, history = train(config, data, on_epoch=on_epoch)
    return model, history, time.perf_counter() - t0


def train_pair(data, config: TrainConfig = DESK, on_epoch=None):
    """(dae, cae) as ``(model, history, seconds)`` triples; the baseline uses p = 0."""
    dae = train_timed(config, data, on_epoch)
    cae = train_timed(replace(config, p=0.0), data, on_epoch)
    return dae, cae


def untrained(config: TrainConfig = DESK) -> M.ModelParams:
    """The exact starting point of a run with ``config``."""
    from .config import derive_rng

    return M.init_model(M.ModelSpec(dropout=config.p), derive_rng(config.seed, "init"),
                        dtype=config.dtype, scheme=config.init)
