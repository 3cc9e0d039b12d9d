"""Point clouds, exact k-NN, unit-ball normalisation and point sampling."""
from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._kernels import fps_grid, grid_build, grid_knn
from .autodiff import ContractError

__all__ = [
    "PointCloud",
    "KnnIndex",
    "knn",
    "knn_brute",
    "UnitBallTransform",
    "normalize_unit_ball",
    "farthest_point_sample",
    "farthest_point_sample_brute",
    "poisson_like_sample",
    "sq_dist",
]


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance along the last axis (one fixed summation order)."""
    diff = a - b
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ContractError("point positions must be finite")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.positions.shape:
                raise ContractError(
                    f"normals shape {self.normals.shape} != positions shape {self.positions.shape}"
                )
            lengths = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(lengths - 1.0) <= 1e-6):
                raise ContractError("normals must have unit length (tolerance 1e-6)")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        return PointCloud(self.positions[idx],
                          None if self.normals is None else self.normals[idx])


def knn_brute(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """O(N) scan per query; ties go to the smaller index."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ContractError("k-NN on an empty point set")
    k = min(k, len(points))
    out = np.empty((len(queries), k), dtype=np.int64)
    for q, row in enumerate(queries):
        d2 = sq_dist(points, row)
        out[q] = np.argsort(d2, kind="stable")[:k]
    return out


class KnnIndex:
    """Exact k-NN over a fixed point set, identical to :func:`knn_brute`.

    Points are bucketed into a uniform grid; queries search rings of cells
    outward and stop once no unvisited cell can hold a closer point. Ties
    resolve to the smaller index.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.positions
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self._grid = grid_build(self.points, 2.0) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int) -> np.ndarray:
        if self._grid is None:
            raise ContractError("k-NN on an empty point set")
        if k < 1:
            raise ContractError("k must be >= 1")
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        queries = np.ascontiguousarray(queries.reshape(-1, 3))
        if not np.all(np.isfinite(queries)):
            raise ContractError("k-NN queries must be finite")
        k = min(k, len(self.points))
        out = grid_knn(self.points, *self._grid, queries, k)
        return out[0] if single else out


def knn(index: KnnIndex, query_point, k: int) -> np.ndarray:
    return index.query(query_point, k)


@dataclass(frozen=True)
class UnitBallTransform:
    center: np.ndarray
    scale: float

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.center) / self.scale

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) * self.scale + self.center

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.forward(cloud.positions), cloud.normals)

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(self.inverse(cloud.positions), cloud.normals)


def normalize_unit_ball(cloud: PointCloud) -> tuple[PointCloud, UnitBallTransform]:
    if len(cloud) == 0:
        raise ContractError("cannot normalise an empty cloud")
    center = cloud.positions.mean(axis=0)
    scale = float(np.sqrt(sq_dist(cloud.positions, center).max()))
    if scale == 0.0:
        warnings.warn("degenerate cloud (all points identical); using scale 1", RuntimeWarning)
        scale = 1.0
    tf = UnitBallTransform(center=center, scale=scale)
    return tf.apply(cloud), tf


def _fps_start(n: int, seed) -> int:
    return int(np.random.default_rng(seed).integers(n))


def farthest_point_sample(cloud, m: int, seed=0, start: int | None = None) -> np.ndarray:
    """Greedy max-min subsampling; the first index comes from ``seed`` unless given."""
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if not 1 <= m <= n:
        raise ContractError(f"farthest_point_sample needs 1 <= m <= N, got m={m}, N={n}")
    if not np.all(np.isfinite(pts)):
        raise ContractError("farthest_point_sample got non-finite coordinates")
    first = _fps_start(n, seed) if start is None else int(start)
    return fps_grid(pts, int(m), first)


def farthest_point_sample_brute(cloud, m: int, seed=0, start: int | None = None) -> np.ndarray:
    pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise ContractError(f"farthest_point_sample needs 1 <= m <= N, got m={m}, N={n}")
    cur = _fps_start(n, seed) if start is None else int(start)
    d = np.full(n, np.inf)
    chosen = np.zeros(n, bool)
    out = []
    for _ in range(m):
        out.append(cur)
        chosen[cur] = True
        d = np.minimum(d, sq_dist(pts, pts[cur]))
        d[chosen] = -1.0
        cur = int(np.argmax(d))
    return np.array(out, dtype=np.int64)


def _eliminate(points: np.ndarray, m: int, area: float) -> np.ndarray:
    """Weighted sample elimination (Yuksel 2015) down to ``m`` survivors."""
    n = len(points)
    r_max = np.sqrt(area / (2.0 * np.sqrt(3.0) * m))
    radius = 2.0 * r_max
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    dist = np.sqrt(sq_dist(points[pairs[:, 0]], points[pairs[:, 1]]))
    w = (1.0 - dist / radius) ** 8
    nbrs: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for (i, j), wij in zip(pairs.tolist(), w.tolist()):
        nbrs[i].append((j, wij))
        nbrs[j].append((i, wij))
    weight = np.zeros(n)
    np.add.at(weight, pairs[:, 0], w)
    np.add.at(weight, pairs[:, 1], w)
    heap = [(-weight[i], i) for i in range(n)]
    heapq.heapify(heap)
    alive = np.ones(n, bool)
    remaining = n
    while remaining > m:
        neg, i = heapq.heappop(heap)
        if not alive[i] or -neg != weight[i]:
            continue
        alive[i] = False
        remaining -= 1
        for j, wij in nbrs[i]:
            if alive[j]:
                weight[j] -= wij
                heapq.heappush(heap, (-weight[j], j))
    return np.nonzero(alive)[0]


def poisson_like_sample(source, m: int, seed=0, oversample: int = 5) -> PointCloud:
    """Blue-noise subset via sample elimination.

    ``source`` is a dense :class:`PointCloud` (candidates used as-is) or any
    surface object exposing ``area`` and ``sample_uniform(n, rng)`` (meshes
    and the analytic surfaces).
    """
    if m < 1:
        raise ContractError("sample count must be >= 1")
    if isinstance(source, PointCloud):
        if len(source) < m:
            raise ContractError(f"need at least {m} candidates, source has {len(source)}")
        if len(source) == m:
            return PointCloud(source.positions.copy(),
                              None if source.normals is None else source.normals.copy())
        cand = source
        # area estimate from the 8-NN radius of the candidates
        d, _ = cKDTree(cand.positions).query(cand.positions, k=min(9, len(cand)))
        area = len(cand) * np.pi * float(np.mean(d[:, -1] ** 2)) / 8.0
    else:
        area = float(source.area)
        if not area > 0:
            raise ContractError("source surface has no area")
        rng = np.random.default_rng(seed)
        pts, nrm = source.sample_uniform(oversample * m, rng)
        cand = PointCloud(pts, nrm)
    keep = _eliminate(cand.positions, m, area)
    return cand.subset(keep)
