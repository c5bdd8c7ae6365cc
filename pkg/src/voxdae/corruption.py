"""Random voxel dropout and axis-aligned slicing noise."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .mesh import ACTIVE_VOXELS, GRID_EDGE, PADDING, RESOLUTION, VoxelGrid
from .tensor import dropout_mask


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"  # random | slicing | none
    p: float = 0.0
    percent: float = 0.0
    seed: int = 0
    slice_base: int = GRID_EDGE  # 30 (whole cube) or 24 (active region only)

    def __post_init__(self):
        if self.kind not in ("random", "slicing", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout rate p must lie in [0, 1], got {self.p}")
        if not 0.0 <= self.percent <= 1.0:
            raise ValueError(f"slice percent must lie in [0, 1], got {self.percent}")
        if self.slice_base not in (GRID_EDGE, RESOLUTION):
            raise ValueError(f"slice_base must be {GRID_EDGE} or {RESOLUTION}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "NoiseSpec":
        """``random:P``, ``slice:PCT`` or ``none``."""
        kind, _, val = text.partition(":")
        if kind == "none" and not val:
            return cls("none", seed=seed)
        try:
            x = float(val)
        except ValueError:
            raise ValueError(f"bad noise spec {text!r}; expected random:P, slice:PCT or none") from None
        if kind == "random":
            return cls("random", p=x, seed=seed)
        if kind in ("slice", "slicing"):
            return cls("slicing", percent=x, seed=seed)
        raise ValueError(f"bad noise spec {text!r}; expected random:P, slice:PCT or none")

    def label(self) -> str:
        if self.kind == "random":
            return f"random:{self.p:g}"
        if self.kind == "slicing":
            return f"slice:{self.percent:g}"
        return "none"

    def with_seed(self, seed: int) -> "NoiseSpec":
        return replace(self, seed=seed)


def apply_random_noise(grid: VoxelGrid, p: float, rng: np.random.Generator) -> VoxelGrid:
    mask = dropout_mask(grid.occupancy.shape, p, rng, dtype=np.uint8)
    return VoxelGrid(grid.occupancy * mask, grid.label, grid.source, grid.rotation)


def slice_count(percent: float, base: int = GRID_EDGE) -> int:
    return int(round(percent * base))


def draw_slices(percent: float, rng: np.random.Generator, base: int = GRID_EDGE) -> list[tuple[int, int]]:
    """Distinct ``(axis, index)`` planes; duplicates are rejected and redrawn."""
    if not 0.0 <= percent <= 1.0:
        raise ValueError(f"slice percent must lie in [0, 1], got {percent}")
    n = slice_count(percent, base)
    offset = 0 if base == GRID_EDGE else PADDING
    chosen: list[tuple[int, int]] = []
    seen = set()
    while len(chosen) < n:
        pair = (int(rng.integers(3)), int(rng.integers(base)) + offset)
        if pair in seen:
            continue
        seen.add(pair)
        chosen.append(pair)
    return chosen


def apply_slicing_noise(grid: VoxelGrid, percent: float, rng: np.random.Generator,
                        base: int = GRID_EDGE) -> VoxelGrid:
    occ = grid.occupancy.copy()
    for axis, idx in draw_slices(percent, rng, base):
        sl = [slice(None)] * 3
        sl[axis] = idx
        occ[tuple(sl)] = 0
    return VoxelGrid(occ, grid.label, grid.source, grid.rotation)


def corrupt(grid: VoxelGrid, noise: NoiseSpec, rng: np.random.Generator) -> VoxelGrid:
    if noise.kind == "random":
        return apply_random_noise(grid, noise.p, rng)
    if noise.kind == "slicing":
        return apply_slicing_noise(grid, noise.percent, rng, noise.slice_base)
    return VoxelGrid(grid.occupancy.copy(), grid.label, grid.source, grid.rotation)


def noise_floor(grid: VoxelGrid, corrupted: VoxelGrid) -> float:
    """Error (in percent of the 24^3 active voxels) of returning the corrupted input unchanged."""
    diff = np.count_nonzero(grid.occupancy != corrupted.occupancy)
    return 100.0 * diff / ACTIVE_VOXELS
