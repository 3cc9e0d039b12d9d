"""Projection-based training losses.

Every distance here goes through the soft projection, never through hard
closest-point matching, so the gradient reaches all k blended neighbors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import LossWeights
from .field import proj
from .integrate import GlobalField, project_onto_neighbors

__all__ = ["LossReport", "proj_distance", "proj_normal_distance", "shape_loss", "normal_loss",
           "integration_loss", "total_loss", "LossTerms"]


@dataclass
class LossReport:
    shape: float
    normal: float
    integration: float
    total: float

    def as_row(self) -> list[float]:
        return [self.shape, self.normal, self.integration, self.total]


@dataclass
class LossTerms:
    """Differentiable loss terms alongside their float report."""

    shape: Tensor
    normal: Tensor
    integration: Tensor
    total: Tensor
    report: LossReport


def _nonempty(name, t):
    if t.shape[0] == 0:
        raise ContractError(f"{name} must be nonempty")


def _project(p, q, q_normals=None, k=4, alpha=1000.0):
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    _nonempty("P", p)
    _nonempty("Q", q)
    return proj(p, q, q_normals, k=min(k, q.shape[0]), alpha=alpha)


def proj_distance(p, q, k: int = 4, alpha: float = 1000.0) -> Tensor:
    """Mean squared distance from each p_s to its soft projection onto Q."""
    p = ad.as_tensor(p)
    target, _, _ = _project(p, q, k=k, alpha=alpha)
    return ad.mean(ad.sum_reduce(ad.square(p - target), axis=-1))


def proj_normal_distance(p, p_normals, q, q_normals, k: int = 4, alpha: float = 1000.0) -> Tensor:
    """Mean squared difference between n_p and the normal of Proj(p, Q).

    The projected normal is flipped to agree with n_p first; the flip is a
    constant with respect to the gradient.
    """
    if p_normals is None or q_normals is None:
        raise ContractError("proj_normal_distance needs normals on both clouds")
    p_normals = ad.as_tensor(p_normals)
    _, n_proj, _ = _project(p, q, q_normals, k=k, alpha=alpha)
    sign = np.where(np.sum(n_proj.data * p_normals.data, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return ad.mean(ad.sum_reduce(ad.square(p_normals - n_proj * sign), axis=-1))


def shape_loss(x_r, y, z, k: int = 4, alpha: float = 1000.0) -> Tensor:
    """d(X_R, Z) + d(Z, X_R) + d(Y, Z) + d(Z, Y)."""
    return (proj_distance(x_r, z, k, alpha) + proj_distance(z, x_r, k, alpha)
            + proj_distance(y, z, k, alpha) + proj_distance(z, y, k, alpha))


def normal_loss(x_r, n_x, y, n_y, z, n_z, k: int = 4, alpha: float = 1000.0) -> Tensor:
    return (proj_normal_distance(x_r, n_x, z, n_z, k, alpha)
            + proj_normal_distance(z, n_z, x_r, n_x, k, alpha)
            + proj_normal_distance(y, n_y, z, n_z, k, alpha)
            + proj_normal_distance(z, n_z, y, n_y, k, alpha))


def integration_loss(y, g: GlobalField, reduction: str = "sum") -> Tensor:
    """Sum over y_j and its neighbor patches of |y_j - Proj(y_j, patch_k)|^2.

    ``reduction="mean"`` divides by the number of (y_j, patch) pairs instead.
    """
    y = ad.as_tensor(y)
    _nonempty("Y", y)
    nbr = g.neighbors(y.data)
    projected, _, _ = project_onto_neighbors(y, g, nbr)
    diff = projected - ad.reshape(y, (y.shape[0], 1, 3))
    total = ad.sum_reduce(ad.square(diff))
    if reduction == "mean":
        return total * (1.0 / (diff.shape[0] * diff.shape[1]))
    if reduction != "sum":
        raise ContractError(f"unknown reduction {reduction!r}")
    return total


def _directional_terms(p, n_p, q, n_q, k, alpha):
    """Point and normal distances from one shared projection of P onto Q."""
    p, n_p = ad.as_tensor(p), ad.as_tensor(n_p)
    target, n_proj, _ = _project(p, q, n_q, k=k, alpha=alpha)
    dist = ad.mean(ad.sum_reduce(ad.square(p - target), axis=-1))
    sign = np.where(np.sum(n_proj.data * n_p.data, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    ndist = ad.mean(ad.sum_reduce(ad.square(n_p - n_proj * sign), axis=-1))
    return dist, ndist


def total_loss(x_r, n_x, y, n_y, z, n_z, g: GlobalField,
               weights: LossWeights | None = None) -> LossTerms:
    """L_shape + w1 L_nor + w2 L_int, with a float report of each term.

    Shape and normal terms share each of the four projections; the result
    equals calling :func:`shape_loss` and :func:`normal_loss` separately.
    """
    weights = weights or LossWeights()
    k, alpha = g.k_proj, g.alpha2
    pairs = [(x_r, n_x, z, n_z), (z, n_z, x_r, n_x), (y, n_y, z, n_z), (z, n_z, y, n_y)]
    terms = [_directional_terms(a, na, b, nb, k, alpha) for a, na, b, nb in pairs]
    shape = terms[0][0] + terms[1][0] + terms[2][0] + terms[3][0]
    normal = terms[0][1] + terms[1][1] + terms[2][1] + terms[3][1]
    integ = integration_loss(y, g, weights.integration_reduction)
    total = shape + normal * weights.normal + integ * weights.integration
    report = LossReport(shape=float(shape.data), normal=float(normal.data),
                        integration=float(integ.data), total=float(total.data))
    return LossTerms(shape, normal, integ, total, report)
