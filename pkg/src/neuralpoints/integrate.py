"""Blend overlapping charts into one surface map and its normals."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._kernels import knn_in_groups
from .autodiff import ContractError, Tensor
from .field import fused_blend, soft_blend
from .geometry import KnnIndex, sq_dist

__all__ = ["GlobalField", "blend_weights", "rho", "rho_normal", "rho_batch",
           "project_onto_neighbors"]


@dataclass
class GlobalField:
    """Centers with R samples (and normals) each, flattened center-major."""

    centers: np.ndarray  # (I, 3)
    samples: Tensor  # (I * R, 3)
    normals: Tensor  # (I * R, 3)
    r: int
    alpha1: float = 100.0
    alpha2: float = 1000.0
    k_blend: int = 4
    k_proj: int = 4
    index: KnnIndex = field(init=False, repr=False)

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.samples = ad.as_tensor(self.samples)
        self.normals = ad.as_tensor(self.normals)
        if len(self.centers) == 0:
            raise ContractError("a global field needs at least one center")
        if self.samples.shape != (len(self.centers) * self.r, 3):
            raise ContractError(
                f"expected {len(self.centers)} x {self.r} samples, got {self.samples.shape}")
        if not self.alpha1 > 0:
            raise ContractError("alpha1 must be positive")
        self.index = KnnIndex(self.centers)

    @property
    def num_centers(self) -> int:
        return len(self.centers)

    def patch(self, i: int) -> tuple[Tensor, Tensor]:
        rows = slice(i * self.r, (i + 1) * self.r)
        return ad.take(self.samples, rows), ad.take(self.normals, rows)

    def neighbors(self, x: np.ndarray, k: int | None = None) -> np.ndarray:
        k = self.k_blend if k is None else k
        return self.index.query(np.asarray(x).reshape(-1, 3), min(k, self.num_centers))


def blend_weights(x, neighbor_centers, alpha1: float = 100.0):
    """Raw weights exp(-alpha1 |x - x_k|^2) and an all-underflow flag.

    When every weight underflows the nearest center gets weight 1.
    """
    x = np.asarray(x, dtype=np.float64)
    nc = np.asarray(neighbor_centers, dtype=np.float64).reshape(-1, 3)
    if len(nc) == 0:
        raise ContractError("blend_weights needs at least one neighbor")
    d2 = sq_dist(nc, x)
    w = np.exp(-alpha1 * d2)
    if not np.any(w > 0):
        w = np.zeros_like(d2)
        w[np.argmin(d2)] = 1.0
        return w, True
    return w, False


def project_onto_neighbors(x: Tensor, g: GlobalField, nbr: np.ndarray):
    """Project every x_m onto each listed neighbor patch.

    Returns ``(points (M, K, 3), normals (M, K, 3), flags (M, K))``.
    """
    kp = min(g.k_proj, g.r)
    idx = knn_in_groups(np.ascontiguousarray(x.data), np.ascontiguousarray(nbr, dtype=np.int64),
                        np.ascontiguousarray(g.samples.data), g.r, kp)
    cand = ad.gather(g.samples, idx)
    cand_n = ad.gather(g.normals, idx)
    query = ad.reshape(x, (x.shape[0], 1, 3))
    points, normals, _, flags = soft_blend(query, cand, cand_n, g.alpha2)
    return points, normals, flags


def rho_batch(x, g: GlobalField):
    """Pull points (M, 3) onto the blended surface.

    Returns ``(points, normals, flags)`` where a flag marks any fallback
    (underflowing weights or a degenerate normal blend).
    """
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, 3))
    nbr = g.neighbors(x.data)
    proj_pts, proj_nrm, proj_flags = project_onto_neighbors(x, g, nbr)
    points, normals, _, flags = fused_blend(x, g.centers[nbr], proj_pts, proj_nrm, g.alpha1)
    flags = flags | proj_flags.any(axis=-1)
    if single:
        return ad.reshape(points, (3,)), ad.reshape(normals, (3,)), bool(flags[0])
    return points, normals, flags


def rho(x, g: GlobalField) -> Tensor:
    return rho_batch(x, g)[0]


def rho_normal(x, g: GlobalField) -> Tensor:
    return rho_batch(x, g)[1]
