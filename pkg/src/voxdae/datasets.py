"""ModelNet-style dataset streams and a procedural shape generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .mesh import GRID_EDGE, PADDING, RESOLUTION, ROTATIONS, VoxelGrid, augment, read_off, voxelize

MODELNET10 = ("bathtub", "bed", "chair", "desk", "dresser", "monitor", "night_stand", "sofa",
              "table", "toilet")
MODELNET40 = ("airplane", "bathtub", "bed", "bench", "bookshelf", "bottle", "bowl", "car", "chair",
              "cone", "cup", "curtain", "desk", "door", "dresser", "flower_pot", "glass_box",
              "guitar", "keyboard", "lamp", "laptop", "mantel", "monitor", "night_stand", "person",
              "piano", "plant", "radio", "range_hood", "sink", "sofa", "stairs", "stool", "table",
              "tent", "toilet", "tv_stand", "vase", "wardrobe", "xbox")

SYNTHETIC_CLASSES = ("box", "cylinder", "cross", "l-shape")


class DatasetError(OSError):
    pass


@dataclass
class DatasetManifest:
    classes: tuple[str, ...]
    models: dict[str, list[Path]] = field(default_factory=dict)
    train_count: int = 80
    test_count: int = 20
    rotations: int = ROTATIONS

    @classmethod
    def scan(cls, root, subset: int, phase: str) -> "DatasetManifest":
        """Collect the first 80 train / first 20 test OFF files per class (sorted by name)."""
        if subset not in (10, 40):
            raise ValueError(f"subset must be 10 or 40, got {subset}")
        if phase not in ("train", "test"):
            raise ValueError(f"phase must be 'train' or 'test', got {phase!r}")
        root = Path(root)
        classes = MODELNET10 if subset == 10 else MODELNET40
        found = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
        missing = [c for c in classes if not (root / c).is_dir()]
        if missing:
            raise DatasetError(f"missing class directories under {root}: {', '.join(missing)}; "
                               f"found: {', '.join(found) or '(none)'}")
        man = cls(classes)
        limit = man.train_count if phase == "train" else man.test_count
        for c in classes:
            man.models[c] = sorted((root / c / phase).glob("*.off"))[:limit]
        return man


def load_dataset(root, subset: int = 10, phase: str = "train", with_rotations: bool = True,
                 axis: int = 2) -> Iterator[VoxelGrid]:
    """Stream voxel grids in class order, then file-name order, then rotation index."""
    man = DatasetManifest.scan(root, subset, phase)
    for label, c in enumerate(man.classes):
        for path in man.models[c]:
            mesh = read_off(path)
            grids = augment(mesh, axis) if with_rotations else [voxelize(mesh)]
            for g in grids:
                g.label = label
                g.source = str(path)
                yield g


def _solid(kind: str, rng: np.random.Generator) -> np.ndarray:
    """Sample a randomized implicit solid on the 24-cube.

    Each shape is defined in local coordinates with half-extents ``h`` and
    normalized like the mesh voxelizer does: centered, longest side scaled to
    span the active region. Cells are occupied when their centre is inside.
    """
    u = rng.uniform
    if kind == "box":
        h = u(0.25, 1.0, 3)

        def inside(x, y, z):
            return (abs(x) <= h[0]) & (abs(y) <= h[1]) & (abs(z) <= h[2])
    elif kind == "cylinder":
        rad, hz = u(0.3, 1.0), u(0.3, 1.0)
        h = np.array([rad, rad, hz])

        def inside(x, y, z):
            return (x * x + y * y <= rad * rad) & (abs(z) <= hz)
    elif kind == "cross":
        # plus sign in the horizontal plane, extruded along z
        w, hz = u(0.15, 0.35), u(0.1, 0.5)
        h = np.array([1.0, 1.0, hz])

        def inside(x, y, z):
            return ((abs(x) <= w) | (abs(y) <= w)) & (abs(z) <= hz)
    elif kind == "l-shape":
        # L profile in the x-z plane, extruded along y
        t, hy, hz = u(0.2, 0.5), u(0.2, 1.0), u(0.5, 1.0)
        h = np.array([1.0, hy, hz])

        def inside(x, y, z):
            return ((x <= -1 + 2 * t) | (z <= -hz + 2 * t * hz)) & (abs(y) <= hy)
    else:
        raise ValueError(f"unknown synthetic class {kind!r}; choose from {SYNTHETIC_CLASSES}")
    scale = RESOLUTION / (2 * h.max())
    c = (np.arange(RESOLUTION) + 0.5 - RESOLUTION / 2) / scale
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    return inside(x, y, z).astype(np.uint8)


def synthetic_shapes(kind: str, count: int, rng: np.random.Generator) -> list[VoxelGrid]:
    """Procedural solids of one class with randomized proportions."""
    label = SYNTHETIC_CLASSES.index(kind) if kind in SYNTHETIC_CLASSES else None
    grids = []
    for i in range(count):
        occ = np.zeros((GRID_EDGE,) * 3, dtype=np.uint8)
        occ[PADDING:-PADDING, PADDING:-PADDING, PADDING:-PADDING] = _solid(kind, rng)
        grids.append(VoxelGrid(occ, label=label, source=f"synthetic:{kind}:{i}"))
    return grids


def synthetic_dataset(per_class: int, rng: np.random.Generator,
                      classes=SYNTHETIC_CLASSES) -> list[VoxelGrid]:
    """``per_class`` shapes of each class, in class order."""
    out = []
    for kind in classes:
        out += synthetic_shapes(kind, per_class, rng)
    return out


def synthetic_split(train_per_class: int = 50, test_per_class: int = 20,
                    seed: int = 0) -> tuple[list[VoxelGrid], list[VoxelGrid]]:
    """Disjoint train/test sets drawn from independent generator streams."""
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    train = synthetic_dataset(train_per_class, train_rng)
    test = synthetic_dataset(test_per_class, test_rng)
    for g in train:
        g.source = "train/" + g.source
    for g in test:
        g.source = "test/" + g.source
    return train, test
