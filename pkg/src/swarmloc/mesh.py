"""Triangle meshes and the ground-truth point clouds sampled from them.

Meshes are read from a small Wavefront-OBJ subset (``v`` and ``f`` records,
polygons fan-triangulated). Point clouds come either from blue-noise surface
sampling or from a synthetic planar grid.
"""

from __future__ import annotations

import heapq
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ._validation import check_points, check_positive, check_positive_int
from .exceptions import CountExceedsCapacity, EmptyMesh, InputError, ParseError

logger = logging.getLogger(__name__)

# Faces with area at or below this (relative to the squared bbox diagonal) are dropped.
_DEGENERATE_REL_AREA = 1e-14


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    n_degenerate: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InputError("face index out of range")

    @property
    def triangles(self) -> np.ndarray:
        """Corner coordinates, shape (n_faces, 3, 3)."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass
class PointCloud:
    """Ordered 3D points in meters; the row index is the provisional FLS id."""

    points: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = check_points(self.points, name="points")
        if self.ids is None:
            self.ids = np.arange(len(self.points), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (len(self.points),):
                raise InputError("ids must have one entry per point")

    def __len__(self):
        return len(self.points)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("id,x,y,z\n")
            for i, (x, y, z) in zip(self.ids, self.points):
                fh.write(f"{i},{x:.9g},{y:.9g},{z:.9g}\n")

    @classmethod
    def from_csv(cls, path) -> "PointCloud":
        ids, pts = [], []
        with open(path) as fh:
            header = fh.readline().strip()
            if header.replace(" ", "") != "id,x,y,z":
                raise ParseError(f"expected header 'id,x,y,z', got {header!r}", line=1, path=path)
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise ParseError("expected 4 fields", line=lineno, path=path)
                try:
                    ids.append(int(parts[0]))
                    pts.append([float(p) for p in parts[1:]])
                except ValueError as exc:
                    raise ParseError(str(exc), line=lineno, path=path) from exc
        if not pts:
            raise ParseError("point cloud has no rows", path=path)
        return cls(np.array(pts), np.array(ids))


def _parse_index(token: str, n_vertices: int, lineno: int, path) -> int:
    # "7", "7/2", "7//3", "-1" are all valid OBJ vertex references.
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ParseError(f"bad face index {token!r}", line=lineno, path=path) from None
    if idx < 0:
        idx = n_vertices + idx
    else:
        idx -= 1
    if not 0 <= idx < n_vertices:
        raise ParseError(f"face index {head} out of range (have {n_vertices} vertices)",
                         line=lineno, path=path)
    return idx


def load_mesh(path) -> TriangleMesh:
    """Read ``v``/``f`` records from an OBJ file.

    Other record types are ignored. Polygonal faces are fan-triangulated, and
    zero-area triangles are dropped (their count is kept on the mesh).
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    vertices: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ParseError("vertex needs 3 coordinates", line=lineno, path=path)
                try:
                    xyz = [float(t) for t in rest[:3]]
                except ValueError as exc:
                    raise ParseError(str(exc), line=lineno, path=path) from exc
                if not all(math.isfinite(c) for c in xyz):
                    raise ParseError("non-finite vertex coordinate", line=lineno, path=path)
                vertices.append(xyz)
            elif tag == "f":
                if len(rest) < 3:
                    raise ParseError("face needs at least 3 vertices", line=lineno, path=path)
                idx = [_parse_index(t, len(vertices), lineno, path) for t in rest]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))

    if not faces:
        raise EmptyMesh(f"{path}: no faces")
    mesh = TriangleMesh(np.array(vertices), np.array(faces))
    return drop_degenerate_faces(mesh, source=path)


def drop_degenerate_faces(mesh: TriangleMesh, source=None) -> TriangleMesh:
    areas = mesh.face_areas()
    span = np.ptp(mesh.vertices, axis=0)
    scale = float(span @ span) or 1.0
    keep = areas > _DEGENERATE_REL_AREA * scale
    n_bad = int((~keep).sum())
    if n_bad:
        logger.warning("%s: dropped %d degenerate face(s)", source or "mesh", n_bad)
    if not keep.any():
        raise EmptyMesh(f"{source or 'mesh'}: all faces are degenerate")
    return TriangleMesh(mesh.vertices, mesh.faces[keep], n_degenerate=mesh.n_degenerate + n_bad)


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces.tolist():
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def surface_area(mesh: TriangleMesh) -> float:
    return float(mesh.face_areas().sum())


def required_fls_count(area, fls_radius, cell_size=2.0) -> int:
    """Number of FLSs needed to cover ``area`` m^2.

    One FLS per square cell of side ``cell_size * fls_radius`` (the default
    of 2 packs FLSs diameter to diameter).
    """
    area = check_positive(area, "area")
    fls_radius = check_positive(fls_radius, "fls_radius")
    cell_size = check_positive(cell_size, "cell_size")
    ratio = area / (cell_size * fls_radius) ** 2
    # Round off float noise so that e.g. 1.0 / 0.1**2 is 100, not 101.
    return max(1, math.ceil(round(ratio, 9)))


def sample_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random points on the surface (area-weighted face choice)."""
    areas = mesh.face_areas()
    face = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = mesh.triangles[face]
    u = 1.0 - r1
    v = r1 * (1.0 - r2)
    w = r1 * r2
    return u[:, None] * tri[:, 0] + v[:, None] * tri[:, 1] + w[:, None] * tri[:, 2]


def eliminate_samples(pool: np.ndarray, count: int, area: float) -> np.ndarray:
    """Weighted sample elimination down to ``count`` points.

    Each candidate carries a weight summed over its neighbours within twice
    the ideal packing radius; the heaviest candidate is removed until
    ``count`` remain. Returns the indices of survivors in pool order.
    """
    m = len(pool)
    if count >= m:
        return np.arange(m)
    r_max = math.sqrt(area / (2.0 * math.sqrt(3.0) * count))
    r_min = r_max * 0.65 * (1.0 - (count / m) ** 1.5)
    pairs = cKDTree(pool).query_pairs(2.0 * r_max, output_type="ndarray")
    weight = np.zeros(m)
    neighbours: list[list[tuple[int, float]]] = [[] for _ in range(m)]
    if len(pairs):
        d = np.linalg.norm(pool[pairs[:, 0]] - pool[pairs[:, 1]], axis=1)
        w = (1.0 - np.maximum(d, r_min) / (2.0 * r_max)) ** 8
        np.add.at(weight, pairs[:, 0], w)
        np.add.at(weight, pairs[:, 1], w)
        for (i, j), wij in zip(pairs.tolist(), w.tolist()):
            neighbours[i].append((j, wij))
            neighbours[j].append((i, wij))

    heap = [(-weight[i], i) for i in range(m)]
    heapq.heapify(heap)
    alive = np.ones(m, dtype=bool)
    remaining = m
    while remaining > count:
        neg_w, i = heapq.heappop(heap)
        if not alive[i] or -neg_w != weight[i]:
            continue  # stale heap entry
        alive[i] = False
        remaining -= 1
        for j, wij in neighbours[i]:
            if alive[j]:
                weight[j] -= wij
                heapq.heappush(heap, (-weight[j], j))
    return np.flatnonzero(alive)


def poisson_disk_sample(mesh: TriangleMesh, count: int, seed: int = 0,
                        oversample: float = 4.0) -> PointCloud:
    """Exactly ``count`` well-spread points on the mesh surface.

    A pool of ``oversample * count`` uniform surface samples is thinned by
    weighted sample elimination. Identical (mesh, count, seed) give identical
    output.
    """
    count = check_positive_int(count, "count")
    pool_size = int(oversample * count)
    if count > pool_size:
        raise CountExceedsCapacity(f"count {count} exceeds oversample pool of {pool_size}")
    rng = np.random.default_rng(seed)
    pool = sample_surface(mesh, pool_size, rng)
    keep = eliminate_samples(pool, count, surface_area(mesh))
    return PointCloud(pool[keep])


def grid_point_cloud(rows: int, cols: int, spacing: float) -> PointCloud:
    """``rows x cols`` points at ``(i*spacing, j*spacing, 0)``, row-major."""
    rows = check_positive_int(rows, "rows")
    cols = check_positive_int(cols, "cols")
    spacing = check_positive(spacing, "spacing")
    i, j = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pts = np.column_stack([i.ravel() * spacing, j.ravel() * spacing, np.zeros(rows * cols)])
    return PointCloud(pts)


def parse_grid_spec(spec: str) -> tuple[int, int, float]:
    """Parse ``RxC:spacing`` (spacing defaults to 1)."""
    try:
        dims, _, spacing = spec.partition(":")
        r, c = dims.lower().split("x")
        return int(r), int(c), float(spacing) if spacing else 1.0
    except ValueError:
        raise InputError(f"grid spec must look like RxC:spacing, got {spec!r}") from None
