"""Triangle meshes, OFF I/O, gravity-axis rotation and solid voxelization."""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

RESOLUTION = 24
PADDING = 3
GRID_EDGE = RESOLUTION + 2 * PADDING
ACTIVE_VOXELS = RESOLUTION ** 3  # 13824
ROTATIONS = 12

VOXG_MAGIC = b"VOXG"
VOXG_VERSION = 1
UNLABELED = 0xFFFF


class OffError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class OffHeaderError(OffError):
    pass


class OffCountError(OffError):
    pass


class OffIndexError(OffError):
    pass


class DegenerateMeshError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64, columns x, y, z
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise OffIndexError("face index outside vertex range")
        if len(self.vertices) < 4:
            warnings.warn(f"mesh has only {len(self.vertices)} vertices; it cannot enclose a volume")


def _content_lines(text: str):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line


def parse_off(data: bytes | str) -> Mesh:
    """Parse OFF text. Polygons with more than three corners are fan-triangulated.

    Accepts the ``OFF123 456 0`` variant where the counts are glued to the
    header, which occurs in the ModelNet distribution.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, bytes) else data
    lines = _content_lines(text)
    try:
        no, first = next(lines)
    except StopIteration:
        raise OffHeaderError("empty input, expected 'OFF' header", 1) from None
    if not first.startswith("OFF"):
        raise OffHeaderError(f"expected 'OFF' header, found {first[:20]!r}", no)
    rest = first[3:].strip()
    if not rest:
        try:
            no, rest = next(lines)
        except StopIteration:
            raise OffCountError("missing vertex/face counts", no) from None
    try:
        counts = [int(t) for t in rest.split()[:3]]
        nv, nf = counts[0], counts[1]
    except (ValueError, IndexError):
        raise OffCountError(f"malformed counts line {rest!r}", no) from None
    if nv < 0 or nf < 0:
        raise OffCountError("negative counts", no)

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            no, line = next(lines)
        except StopIteration:
            raise OffCountError(f"expected {nv} vertices, found {i}", no) from None
        parts = line.split()
        if len(parts) < 3:
            raise OffCountError(f"vertex needs 3 coordinates, got {len(parts)}", no)
        try:
            verts[i] = [float(t) for t in parts[:3]]
        except ValueError:
            raise OffCountError(f"non-numeric vertex {line!r}", no) from None

    tris = []
    for i in range(nf):
        try:
            no, line = next(lines)
        except StopIteration:
            raise OffCountError(f"expected {nf} faces, found {i}", no) from None
        parts = line.split()
        try:
            k = int(parts[0])
            idx = [int(t) for t in parts[1 : 1 + k]]
        except ValueError:
            raise OffCountError(f"non-integer face entry {line!r}", no) from None
        if k < 3 or len(idx) != k:
            raise OffCountError(f"face declares {k} corners, has {len(idx)}", no)
        for j in idx:
            if j < 0 or j >= nv:
                raise OffIndexError(f"face index {j} out of range for {nv} vertices", no)
        for j in range(1, k - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    return Mesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_off(mesh: Mesh) -> str:
    out = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += ["3 " + " ".join(str(int(i)) for i in f) for f in mesh.faces]
    return "\n".join(out) + "\n"


def read_off(path) -> Mesh:
    return parse_off(Path(path).read_bytes())


def rotate_mesh(mesh: Mesh, k: int, axis: int = 2) -> Mesh:
    """Rotate by ``k * 30`` degrees about ``axis`` (0=x, 1=y, 2=z) through the vertex centroid."""
    if k % ROTATIONS == 0:
        return Mesh(mesh.vertices.copy(), mesh.faces.copy())
    theta = math.radians(30.0 * k)
    c, s = math.cos(theta), math.sin(theta)
    a, b = [i for i in range(3) if i != axis]
    rot = np.eye(3)
    rot[a, a], rot[a, b], rot[b, a], rot[b, b] = c, -s, s, c
    center = mesh.vertices.mean(axis=0)
    verts = (mesh.vertices - center) @ rot.T + center
    return Mesh(verts, mesh.faces.copy())


@dataclass
class VoxelGrid:
    """Binary occupancy, indexed ``[z, y, x]`` so that x varies fastest in memory."""

    occupancy: np.ndarray
    label: int | None = None
    source: str | None = None
    rotation: int = 0

    def __post_init__(self):
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=np.uint8)

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def padding_is_empty(self, padding: int = PADDING) -> bool:
        inner = self.occupancy[padding:-padding, padding:-padding, padding:-padding].sum()
        return int(inner) == self.count

    def to_bytes(self) -> bytes:
        nz, ny, nx = self.occupancy.shape
        label = UNLABELED if self.label is None else int(self.label)
        head = VOXG_MAGIC + struct.pack("<B3I", VOXG_VERSION, nx, ny, nz)
        return head + (self.occupancy != 0).astype(np.uint8).tobytes() + struct.pack("<H", label)

    @classmethod
    def from_bytes(cls, data: bytes, source: str | None = None) -> "VoxelGrid":
        if data[:4] != VOXG_MAGIC:
            raise ValueError("not a VOXG file (bad magic)")
        version, nx, ny, nz = struct.unpack_from("<B3I", data, 4)
        if version != VOXG_VERSION:
            raise ValueError(f"unsupported VOXG version {version}")
        n = nx * ny * nz
        body = data[17 : 17 + n]
        if len(body) != n:
            raise ValueError(f"truncated VOXG body: expected {n} bytes, got {len(body)}")
        occ = np.frombuffer(body, dtype=np.uint8).reshape(nz, ny, nx).copy()
        if occ.max(initial=0) > 1:
            raise ValueError("VOXG voxel values must be 0 or 1")
        label = None
        tail = data[17 + n :]
        if len(tail) >= 2:
            (raw,) = struct.unpack_from("<H", tail)
            label = None if raw == UNLABELED else raw
        return cls(occ, label=label, source=source)


def write_voxg(grid: VoxelGrid, path) -> None:
    Path(path).write_bytes(grid.to_bytes())


def read_voxg(path) -> VoxelGrid:
    return VoxelGrid.from_bytes(Path(path).read_bytes(), source=str(path))


def _tri_box_overlap(tri: np.ndarray, centers: np.ndarray, half: float) -> np.ndarray:
    """Separating-axis test of one triangle against many axis-aligned cubes."""
    v0, v1, v2 = tri
    edges = (v1 - v0, v2 - v1, v0 - v2)
    hit = np.ones(len(centers), dtype=bool)
    axes = [np.cross(e, u) for e in edges for u in np.eye(3)]
    axes.append(np.cross(edges[0], edges[1]))
    for ax in axes:
        r = half * np.abs(ax).sum()
        pc = centers @ ax
        pv = tri @ ax
        hit &= ~((pv.min() - pc > r) | (pv.max() - pc < -r))
    return hit


def _rasterize_surface(tris: np.ndarray, edge: int, tol: float = 1e-6) -> np.ndarray:
    surf = np.zeros((edge, edge, edge), dtype=bool)
    for tri in tris:
        lo = np.clip(np.floor(tri.min(axis=0) - tol).astype(int), 0, edge - 1)
        hi = np.clip(np.floor(tri.max(axis=0) + tol).astype(int), 0, edge - 1)
        grid = np.stack(np.meshgrid(*[np.arange(l, h + 1) for l, h in zip(lo, hi)], indexing="ij"), -1)
        idx = grid.reshape(-1, 3)
        hit = _tri_box_overlap(tri, idx + 0.5, 0.5 + tol)
        sel = idx[hit]
        surf[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return surf


def voxelize(mesh: Mesh, resolution: int = RESOLUTION, padding: int = PADDING,
             supersample: int = 4, fill_threshold: float = 0.5) -> VoxelGrid:
    """Solid occupancy grid of ``mesh``.

    The mesh is scaled uniformly so its longest side spans the active
    ``resolution^3`` region and centered there. Surface triangles are
    conservatively rasterized on a ``supersample``-times finer grid, cells
    not reachable from outside by a 6-connected flood fill are solid, and
    each output voxel is set when at least ``fill_threshold`` of its
    sub-cells are solid. The padding shell is always empty.
    """
    if len(mesh.faces) == 0 or len(mesh.vertices) == 0:
        raise DegenerateMeshError("mesh has no faces")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if not np.isfinite(extent) or extent <= 0:
        raise DegenerateMeshError("mesh has zero extent")
    fine = resolution * supersample
    scale = fine / extent
    pts = (mesh.vertices - (lo + hi) / 2) * scale + fine / 2
    # array order is [z, y, x]
    tris = pts[:, ::-1][mesh.faces]
    surf = _rasterize_surface(tris, fine)
    solid = ndimage.binary_fill_holes(np.pad(surf, 1))[1:-1, 1:-1, 1:-1]
    s = supersample
    frac = solid.reshape(resolution, s, resolution, s, resolution, s).mean(axis=(1, 3, 5))
    occ = np.zeros((resolution + 2 * padding,) * 3, dtype=np.uint8)
    occ[padding:-padding, padding:-padding, padding:-padding] = frac >= fill_threshold
    return VoxelGrid(occ)


def augment(mesh: Mesh, axis: int = 2, **kw) -> list[VoxelGrid]:
    """Voxelize the 12 rotations of ``mesh`` about the gravity axis."""
    grids = []
    for k in range(ROTATIONS):
        g = voxelize(rotate_mesh(mesh, k, axis), **kw)
        g.rotation = k
        grids.append(g)
    return grids


def box_mesh(lo, hi) -> Mesh:
    """Closed axis-aligned box as 12 triangles."""
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    v = [(x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
         (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1)]
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]
    f = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return Mesh(np.array(v, dtype=float), np.array(f))


def sphere_mesh(radius: float = 1.0, subdivisions: int = 3) -> Mesh:
    """Icosphere centered at the origin."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return Mesh(np.array(verts) * radius, np.array(f))
