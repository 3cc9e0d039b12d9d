"""Analytic reference surfaces and triangle meshes.

Each surface can draw area-uniform samples with exact normals and report
the unsigned distance from arbitrary points, which is what dataset
generation and the point-to-surface metric need.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ConfigError, ContractError

__all__ = [
    "Sphere",
    "Torus",
    "Saddle",
    "Mesh",
    "icosphere",
    "parse_surface",
    "closest_point_on_triangles",
    "point_triangle_distance_brute",
]


@dataclass(frozen=True)
class Sphere:
    radius: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def sample_uniform(self, n: int, rng: np.random.Generator):
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d, d

    def normals(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(points) - np.asarray(self.center)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def distance(self, points: np.ndarray) -> np.ndarray:
        v = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return np.abs(np.linalg.norm(v, axis=-1) - self.radius)


@dataclass(frozen=True)
class Torus:
    """Torus around the z axis."""

    major: float = 0.7
    minor: float = 0.3

    @property
    def area(self) -> float:
        return 4.0 * np.pi ** 2 * self.major * self.minor

    def sample_uniform(self, n: int, rng: np.random.Generator):
        out = np.empty((0, 2))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, 2 * n)
            v = rng.uniform(0, 2 * np.pi, 2 * n)
            # area element is proportional to (major + minor cos v)
            accept = rng.uniform(0, self.major + self.minor, 2 * n) < self.major + self.minor * np.cos(v)
            out = np.concatenate([out, np.stack([u[accept], v[accept]], 1)])
        u, v = out[:n, 0], out[:n, 1]
        ring = self.major + self.minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), self.minor * np.sin(v)], 1)
        nrm = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], 1)
        return pts, nrm

    def normals(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        rho = np.hypot(p[..., 0], p[..., 1])
        core = np.stack([p[..., 0] / rho * self.major, p[..., 1] / rho * self.major,
                         np.zeros_like(rho)], -1)
        v = p - core
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def distance(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        rho = np.hypot(p[..., 0], p[..., 1])
        return np.abs(np.hypot(rho - self.major, p[..., 2]) - self.minor)


@dataclass(frozen=True)
class Saddle:
    """Graph z = curvature * (x^2 - y^2) over the square [-extent, extent]^2."""

    curvature: float = 0.5
    extent: float = 0.7

    def height(self, x, y):
        return self.curvature * (x * x - y * y)

    @property
    def area(self) -> float:
        g = np.linspace(-self.extent, self.extent, 401)
        x, y = np.meshgrid(g, g, indexing="ij")
        elem = np.sqrt(1 + (2 * self.curvature * x) ** 2 + (2 * self.curvature * y) ** 2)
        return float(np.trapezoid(np.trapezoid(elem, g, axis=1), g))

    def _max_elem(self) -> float:
        return float(np.sqrt(1 + 8 * (self.curvature * self.extent) ** 2))

    def sample_uniform(self, n: int, rng: np.random.Generator):
        out = np.empty((0, 2))
        while len(out) < n:
            xy = rng.uniform(-self.extent, self.extent, (2 * n, 2))
            elem = np.sqrt(1 + (2 * self.curvature) ** 2 * (xy ** 2).sum(1))
            keep = rng.uniform(0, self._max_elem(), 2 * n) < elem
            out = np.concatenate([out, xy[keep]])
        x, y = out[:n, 0], out[:n, 1]
        pts = np.stack([x, y, self.height(x, y)], 1)
        return pts, self.normals(pts)

    def normals(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        v = np.stack([-2 * self.curvature * p[..., 0], 2 * self.curvature * p[..., 1],
                      np.ones(p.shape[:-1])], -1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def distance(self, points: np.ndarray, iterations: int = 50) -> np.ndarray:
        """Distance to the (clamped) graph via projected Newton on (x, y)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        c, e = self.curvature, self.extent
        x, y = np.clip(p[:, 0], -e, e), np.clip(p[:, 1], -e, e)
        for _ in range(iterations):
            r = self.height(x, y) - p[:, 2]
            gx = (x - p[:, 0]) + r * 2 * c * x
            gy = (y - p[:, 1]) + r * (-2 * c * y)
            hxx = 1 + (2 * c * x) ** 2 + r * 2 * c
            hyy = 1 + (2 * c * y) ** 2 - r * 2 * c
            hxy = (2 * c * x) * (-2 * c * y)
            det = hxx * hyy - hxy * hxy
            ok = (det > 1e-12) & (hxx > 0)
            dx = np.where(ok, (hyy * gx - hxy * gy) / np.where(ok, det, 1), gx * 0.5)
            dy = np.where(ok, (hxx * gy - hxy * gx) / np.where(ok, det, 1), gy * 0.5)
            x, y = np.clip(x - dx, -e, e), np.clip(y - dy, -e, e)
        q = np.stack([x, y, self.height(x, y)], 1)
        return np.linalg.norm(p - q, axis=1)


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    _tree: cKDTree | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def sample_uniform(self, n: int, rng: np.random.Generator):
        areas = self.face_areas()
        face = rng.choice(len(areas), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        bary = np.stack([1 - s, s * (1 - r2), s * r2], 1)
        tri = self.triangles()[face]
        return np.einsum("nk,nkd->nd", bary, tri), self.face_normals()[face]

    def distance(self, points: np.ndarray) -> np.ndarray:
        """Exact unsigned distance using a centroid kd-tree with a safe search radius."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        tri = self.triangles()
        centroids = tri.mean(axis=1)
        reach = np.linalg.norm(tri - centroids[:, None, :], axis=2).max()
        if self._tree is None:
            self._tree = cKDTree(centroids)
        _, nearest = self._tree.query(p, k=1)
        out = np.empty(len(p))
        for i, q in enumerate(p):
            upper = np.linalg.norm(closest_point_on_triangles(q[None], tri[nearest[i]][None])[0] - q)
            # any triangle closer than `upper` has its centroid within upper + reach
            cand = self._tree.query_ball_point(q, upper + reach + 1e-12)
            cp = closest_point_on_triangles(np.broadcast_to(q, (len(cand), 3)), tri[cand])
            out[i] = np.sqrt(((cp - q) ** 2).sum(1)).min()
        return out


def point_triangle_distance_brute(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri = mesh.triangles()
    out = np.empty(len(p))
    for i, q in enumerate(p):
        cp = closest_point_on_triangles(np.broadcast_to(q, (len(tri), 3)), tri)
        out[i] = np.sqrt(((cp - q) ** 2).sum(1)).min()
    return out


def closest_point_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on triangle ``tri[i]`` to ``p[i]`` (Ericson's region test)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        out = a + ab * v_in[:, None] + ac * w_in[:, None]

        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    region_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(region_bc[:, None], b + (c - b) * t_bc[:, None], out)
    region_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(region_ac[:, None], a + ac * t_ac[:, None], out)
    region_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(region_c[:, None], c, out)
    region_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(region_ab[:, None], a + ab * t_ab[:, None], out)
    region_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(region_b[:, None], b, out)
    region_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(region_a[:, None], a, out)
    return out


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(radius * np.array(v), np.array(faces))


_SURFACES = {
    "sphere": (Sphere, {"radius": "radius", "r": "radius"}),
    "torus": (Torus, {"major": "major", "minor": "minor", "R": "major", "r": "minor"}),
    "saddle": (Saddle, {"curvature": "curvature", "c": "curvature", "extent": "extent"}),
}


def parse_surface(spec):
    """Build a surface from ``"sphere"``, ``"torus:major=0.7,minor=0.3"`` or a dict."""
    if isinstance(spec, dict):
        spec = dict(spec)
        kind = spec.pop("kind", None)
        kwargs = spec
    else:
        kind, _, rest = str(spec).partition(":")
        kwargs = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            kwargs[key.strip()] = float(value)
    if kind not in _SURFACES:
        raise ConfigError(f"unknown surface spec {kind!r}; expected one of {sorted(_SURFACES)}")
    cls, aliases = _SURFACES[kind]
    try:
        return cls(**{aliases[k]: float(v) for k, v in kwargs.items()})
    except KeyError as exc:
        raise ConfigError(f"unknown parameter {exc.args[0]!r} for surface {kind!r}") from None
