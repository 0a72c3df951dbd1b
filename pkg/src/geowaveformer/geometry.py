"""Point clouds, the regular latent grid and the neighbourhood/quadrature
structures that make irregular <-> regular kernel sums well posed."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

UNIT_BALL_VOLUME_3D = 4.0 / 3.0 * math.pi


@dataclass
class PointCloud:
    coords: np.ndarray  # (N, 3), cm
    arclength: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"point cloud must be (N, 3), got {self.coords.shape}")
        if len(self.coords) < 2:
            raise ValueError("point cloud needs at least 2 points")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.arclength is not None:
            self.arclength = np.asarray(self.arclength, dtype=np.float64)
            if self.arclength.shape != (len(self.coords),):
                raise ValueError("arclength must have one value per point")
        dist, _ = cKDTree(self.coords).query(self.coords, k=2)
        if np.any(dist[:, 1] <= 1e-9):
            raise ValueError("point cloud has coincident points (within 1e-9)")

    def __len__(self) -> int:
        return len(self.coords)

    def mean_spacing(self) -> float:
        """Mean nearest-neighbour distance."""
        dist, _ = cKDTree(self.coords).query(self.coords, k=2)
        return float(dist[:, 1].mean())


@dataclass(frozen=True)
class LatentGrid:
    origin: np.ndarray
    spacing: np.ndarray
    resolution: tuple

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.resolution) - 1)

    def axes(self) -> list:
        return [self.origin[i] + self.spacing[i] * np.arange(self.resolution[i]) for i in range(3)]

    def nodes(self) -> np.ndarray:
        """Node coordinates, (S1*S2*S3, 3), C order (last axis fastest)."""
        gx, gy, gz = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def normalized(self, pts: np.ndarray) -> np.ndarray:
        """Map coordinates into the unit box spanned by the grid."""
        return (np.asarray(pts) - self.origin) / (self.upper - self.origin)

    def contains(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= self.origin - tol) & (pts <= self.upper + tol), axis=1)


def build_latent_grid(cloud: PointCloud, resolution=(16, 16, 16), pad_fraction: float = 0.05) -> LatentGrid:
    """Axis-aligned lattice over the cloud's bounding box, padded per side by
    ``pad_fraction`` of the box extent."""
    resolution = tuple(int(s) for s in resolution)
    if len(resolution) != 3 or min(resolution) < 2:
        raise ValueError(f"resolution components must be >= 2, got {resolution}")
    if pad_fraction < 0:
        raise ValueError("pad_fraction must be >= 0")
    lo = cloud.coords.min(axis=0)
    hi = cloud.coords.max(axis=0)
    extent = hi - lo
    degenerate = extent <= 1e-12
    if np.any(degenerate):
        good = extent[~degenerate]
        base = float(good.max()) if good.size else 1.0
        # fallback: one spacing unit of the widest axis if that is larger
        unit = base / (max(resolution) - 1)
        fill = max(base, unit, 1e-6)
        log.warning("degenerate bounding box on axes %s; expanding by %.4g",
                    np.flatnonzero(degenerate).tolist(), fill)
        lo = np.where(degenerate, lo - fill / 2, lo)
        hi = np.where(degenerate, hi + fill / 2, hi)
        extent = hi - lo
    lo = lo - pad_fraction * extent
    hi = hi + pad_fraction * extent
    spacing = (hi - lo) / (np.asarray(resolution) - 1)
    return LatentGrid(origin=lo, spacing=spacing, resolution=resolution)


def _coords(q) -> np.ndarray:
    if isinstance(q, PointCloud):
        return q.coords
    if isinstance(q, LatentGrid):
        return q.nodes()
    return np.asarray(q, dtype=np.float64)


def distance_features(queries, cloud: PointCloud) -> np.ndarray:
    """Unsigned distance from each query to the nearest cloud point."""
    dist, _ = cKDTree(cloud.coords).query(_coords(queries), k=1)
    return np.asarray(dist, dtype=np.float64)


@dataclass
class NeighborSet:
    """CSR-style neighbour lists: neighbours of query ``i`` are
    ``indices[offsets[i]:offsets[i+1]]``."""

    offsets: np.ndarray
    indices: np.ndarray
    displacements: np.ndarray  # target - query, one row per edge
    distances: np.ndarray
    radius: float
    cap: int

    @property
    def n_queries(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def empty(self) -> np.ndarray:
        """Boolean mask of queries with no neighbour."""
        return self.counts() == 0

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.offsets[i]:self.offsets[i + 1]]

    def edge_queries(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_queries), self.counts())


def _point_keys(pts: np.ndarray, seed: int) -> np.ndarray:
    """Stable per-point pseudo-random keys derived from coordinates, so capped
    subsamples do not depend on point ordering."""
    keys = np.empty(len(pts), dtype=np.uint64)
    salt = int(seed).to_bytes(8, "little", signed=True)
    for i, p in enumerate(np.round(pts, 9)):
        h = hashlib.blake2b(p.tobytes() + salt, digest_size=8).digest()
        keys[i] = int.from_bytes(h, "little")
    return keys


class SpatialHash:
    """Uniform bucket grid with cell size ``r`` for fixed-radius queries."""

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.asarray(points, dtype=np.float64)
        self.cell = float(cell)
        self.buckets = defaultdict(list)
        for i, key in enumerate(map(tuple, np.floor(self.points / self.cell).astype(np.int64))):
            self.buckets[key].append(i)
        self.buckets = {k: np.asarray(v, dtype=np.int64) for k, v in self.buckets.items()}

    def query(self, p: np.ndarray, r: float) -> np.ndarray:
        c = np.floor(p / self.cell).astype(np.int64)
        reach = int(math.ceil(r / self.cell))
        found = []
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    b = self.buckets.get((c[0] + dx, c[1] + dy, c[2] + dz))
                    if b is not None:
                        found.append(b)
        if not found:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(found)
        d = np.linalg.norm(self.points[cand] - p, axis=1)
        return np.sort(cand[d <= r])


def ball_neighbors(queries, targets, r: float, cap: int = 32, seed: int = 0) -> NeighborSet:
    """Closed-ball neighbourhoods, uniformly subsampled to ``cap`` when crowded.

    The subsample keeps the ``cap`` targets with the smallest coordinate-hash
    keys, which is reproducible for a seed and independent of index order.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    q = _coords(queries)
    t = _coords(targets)
    index = SpatialHash(t, r)
    keys = None
    offsets = [0]
    lists = []
    for p in q:
        nb = index.query(p, r)
        if len(nb) > cap:
            if keys is None:
                keys = _point_keys(t, seed)
            nb = np.sort(nb[np.argsort(keys[nb], kind="stable")[:cap]])
        lists.append(nb)
        offsets.append(offsets[-1] + len(nb))
    indices = np.concatenate(lists) if lists else np.empty(0, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    qidx = np.repeat(np.arange(len(q)), np.diff(offsets))
    disp = t[indices] - q[qidx]
    ns = NeighborSet(offsets, indices.astype(np.int64), disp, np.linalg.norm(disp, axis=1), float(r), int(cap))
    n_empty = int(ns.empty().sum())
    if n_empty:
        log.debug("%d of %d queries have no neighbour within r=%.4g", n_empty, len(q), r)
    return ns


def riemann_weights(targets: PointCloud, k_density: int = 4) -> np.ndarray:
    """Inverse local-density quadrature weights ``V_3 d_k^3 / k`` (cm^3)."""
    pts = _coords(targets)
    n = len(pts)
    if not 1 <= k_density < n:
        raise ValueError(f"k_density must satisfy 1 <= k < N (k={k_density}, N={n})")
    dist, _ = cKDTree(pts).query(pts, k=k_density + 1)
    dk = dist[:, k_density]
    if np.any(dk <= 0):
        raise ValueError("duplicate points give a zero nearest-neighbour distance")
    return UNIT_BALL_VOLUME_3D * dk ** 3 / k_density


def grid_weights(neighbors: NeighborSet) -> np.ndarray:
    """Per-edge weights ``1 / M_query``; empty queries contribute no edges."""
    counts = neighbors.counts()
    per_query = np.divide(1.0, counts, out=np.zeros(len(counts)), where=counts > 0)
    if np.any(counts == 0):
        log.debug("grid_weights: %d queries without neighbours", int((counts == 0).sum()))
    return np.repeat(per_query, counts)


def default_radius(cloud: PointCloud, factor: float = 2.5) -> float:
    return factor * cloud.mean_spacing()


def read_cloud_csv(path) -> PointCloud:
    """Read ``[point_id,]x,y,z[,s]``; rows must be in point-id order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        has_id = header[:1] == ["point_id"]
        cols = header[1:] if has_id else header
        if cols[:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header [point_id,]x,y,z[,s], got {header}")
        rows = [list(map(float, row)) for row in reader if row]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, len(header))
    if has_id:
        if not np.array_equal(arr[:, 0], np.arange(len(arr))):
            raise ValueError(f"{path}: point_id column must be 0..N-1 in order")
        arr = arr[:, 1:]
    s = arr[:, 3] if len(cols) > 3 and cols[3] == "s" else None
    return PointCloud(arr[:, :3], s)


def write_cloud_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("point_id,x,y,z,s\n" if cloud.arclength is not None else "point_id,x,y,z\n")
        for i, p in enumerate(cloud.coords):
            vals = [str(i)] + [repr(float(v)) for v in p]
            if cloud.arclength is not None:
                vals.append(repr(float(cloud.arclength[i])))
            fh.write(",".join(vals) + "\n")
