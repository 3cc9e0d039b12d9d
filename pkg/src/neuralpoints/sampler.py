"""Resampling the blended patch surface at any target count.

Per-patch parameter grids are mapped to 3D, pooled into one set, thinned to
the requested count with farthest point sampling, and every survivor is
pulled onto the blended surface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor, TrainingError
from .config import patch_sample_count
from .encoder import LocalFeature, extract_local_features
from .field import FieldSample, jittered_uv, sample_patches
from .geometry import (KnnIndex, PointCloud, farthest_point_sample, normalize_unit_ball,
                       sq_dist)
from .integrate import GlobalField, rho_batch
from .model import NeuralPointsModel

__all__ = [
    "UpsampleRequest",
    "Union",
    "PipelineOutput",
    "target_count",
    "build_union",
    "subsample_targets",
    "pull_to_surface",
    "run_pipeline",
    "upsample",
    "TooFewCandidates",
]


class TooFewCandidates(ContractError):
    """More targets were requested than the pooled patch samples hold."""


def target_count(num_inputs: int, factor: float | None = None, count: int | None = None) -> int:
    """Output size J from a (possibly fractional) factor, rounded half up, or an explicit count."""
    if (factor is None) == (count is None):
        raise ContractError("give exactly one of factor or count")
    if count is None:
        if not factor > 0:
            raise ContractError("factor must be positive")
        count = int(math.floor(factor * num_inputs + 0.5))
    if count < 1:
        raise ContractError(f"target count must be >= 1, got {count}")
    return int(count)


@dataclass
class UpsampleRequest:
    cloud: PointCloud
    target: int
    r: int | None = None

    def __post_init__(self):
        if self.target < 1:
            raise ContractError(f"target count must be >= 1, got {self.target}")
        if len(self.cloud) == 0:
            raise ContractError("cannot upsample an empty cloud")
        if self.r is None:
            self.r = patch_sample_count(self.target, len(self.cloud))
        self.r = max(1, int(self.r))


@dataclass
class Union:
    points: Tensor  # (I * R, 3)
    normals: Tensor  # (I * R, 3)
    provenance: np.ndarray  # (I * R, 2) -> (center i, sample r)
    r: int


def build_union(samples) -> Union:
    """Concatenate per-patch samples center-major, tagging each with (i, r).

    ``samples`` is a list of :class:`FieldSample` or a pair of (I, R, 3)
    point and normal tensors.
    """
    if isinstance(samples, (list, tuple)) and samples and isinstance(samples[0], FieldSample):
        r = len(samples[0].points)
        if any(len(s.points) != r for s in samples):
            raise ContractError("every patch must be sampled with the same R")
        pts = ad.concat([s.points for s in samples], axis=0)
        nrm = ad.concat([s.normals for s in samples], axis=0)
        centers = np.repeat([s.center_index for s in samples], r)
    else:
        points, normals = samples
        i, r = points.shape[0], points.shape[1]
        pts = ad.reshape(points, (i * r, 3))
        nrm = ad.reshape(normals, (i * r, 3))
        centers = np.repeat(np.arange(i), r)
    prov = np.stack([centers, np.tile(np.arange(r), len(centers) // r)], 1)
    return Union(pts, nrm, prov, r)


def subsample_targets(points, j: int, seed=0) -> np.ndarray:
    """Indices of J farthest-point-sampled members of the pooled set."""
    data = points.data if isinstance(points, Tensor) else np.asarray(points)
    if j > len(data):
        raise TooFewCandidates(f"requested {j} points from a pool of {len(data)}")
    return farthest_point_sample(data, j, seed=seed)


def pull_to_surface(targets, g: GlobalField):
    """y_j = rho(y*_j) with blended normals; returns ``(points, normals, flags)``."""
    return rho_batch(targets, g)


@dataclass
class PipelineOutput:
    features: LocalFeature
    union: Union
    target_index: np.ndarray
    points: Tensor  # Y, (J, 3)
    normals: Tensor
    flags: np.ndarray
    field: GlobalField


def _global_field(centers, union: Union, model: NeuralPointsModel, scale: float = 1.0):
    cfg = model.config
    return GlobalField(centers=centers, samples=union.points, normals=union.normals, r=union.r,
                       alpha1=cfg.alpha1 / scale ** 2, alpha2=cfg.alpha2 / scale ** 2,
                       k_blend=cfg.knn_blend, k_proj=cfg.knn_proj)


def run_pipeline(model: NeuralPointsModel, points: np.ndarray, j: int, r: int | None = None,
                 seed=0, neighbors: np.ndarray | None = None, jitter: bool = False) -> PipelineOutput:
    """The full differentiable pipeline on one already normalised patch.

    ``jitter`` moves every patch sample to a random spot in its grid cell
    (drawn from ``seed``); training uses it so charts are fit between grid points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    r = patch_sample_count(j, n) if r is None else r
    if n * r < j:
        r = math.ceil(j / n) + 1
    feats = extract_local_features(points, model.encoder, model.config, neighbors)
    uv = jittered_uv(r, np.random.default_rng((int(seed), 1))) if jitter else None
    _, pts, nrm, _ = sample_patches(r, feats.f, points, model.field, uv)
    union = build_union((pts, nrm))
    if not np.all(np.isfinite(union.points.data)):
        raise TrainingError("field produced non-finite patch samples")
    idx = subsample_targets(union.points, j, seed)
    targets = ad.gather(union.points, idx)
    g = _global_field(points, union, model)
    y, ny, flags = pull_to_surface(targets, g)
    return PipelineOutput(feats, union, idx, y, ny, flags, g)


def _anchor_patches(points: np.ndarray, patch_size: int, anchors: int | None, seed):
    """Cover the cloud with k-NN patches around FPS anchors; assign each point an owner."""
    n = len(points)
    count = anchors if anchors else max(1, math.ceil(2 * n / patch_size))
    count = min(count, n)
    anchor_idx = list(farthest_point_sample(points, count, seed=seed))
    index = KnnIndex(points)
    patches = [index.query(points[a], patch_size) for a in anchor_idx]
    owner = np.full(n, -1)
    best = np.full(n, np.inf)
    while True:
        for p_id, (a, members) in enumerate(zip(anchor_idx, patches)):
            d2 = sq_dist(points[members], points[a])
            closer = d2 < best[members]
            owner[members[closer]] = p_id
            best[members[closer]] = d2[closer]
        missing = np.nonzero(owner < 0)[0]
        if len(missing) == 0:
            return anchor_idx, patches, owner
        anchor_idx.append(int(missing[0]))
        patches.append(index.query(points[missing[0]], patch_size))


def upsample(request: UpsampleRequest, model: NeuralPointsModel, seed=0, patch_size: int = 256,
             anchors: int | None = None) -> PointCloud:
    """Resample the represented surface with exactly ``request.target`` points."""
    cloud = request.cloud
    if len(cloud) == 0:
        raise ContractError("cannot upsample an empty cloud")
    j = request.target
    normalized, tf = normalize_unit_ball(cloud)
    pts = normalized.positions
    n = len(pts)
    r = request.r
    if n * r < j:
        r = math.ceil(j / n) + 1
    with ad.no_grad():
        if n <= patch_size:
            out = run_pipeline(model, pts, j, r=r, seed=seed)
            y, ny = out.points.data, out.normals.data
        else:
            y, ny = _upsample_anchored(model, pts, j, r, seed, patch_size, anchors)
    return PointCloud(tf.inverse(y), ny)


def _upsample_anchored(model, pts, j, r, seed, patch_size, anchors):
    anchor_idx, patches, owner = _anchor_patches(pts, patch_size, anchors, seed)
    n = len(pts)
    samples = np.empty((n, r, 3))
    normals = np.empty((n, r, 3))
    scales = []
    for p_id, members in enumerate(patches):
        owned = np.nonzero(owner[members] == p_id)[0]
        if len(owned) == 0:
            continue
        local, tf = normalize_unit_ball(PointCloud(pts[members]))
        scales.append(tf.scale)
        feats = extract_local_features(local.positions, model.encoder, model.config)
        f_owned = ad.gather(feats.f, owned)
        _, sp, sn, _ = sample_patches(r, f_owned, local.positions[owned], model.field)
        samples[members[owned]] = tf.inverse(sp.data)
        normals[members[owned]] = sn.data
    union = build_union((Tensor(samples), Tensor(normals)))
    idx = subsample_targets(union.points, j, seed)
    g = _global_field(pts, union, model, scale=float(np.median(scales)))
    y, ny, _ = pull_to_surface(ad.gather(union.points, idx), g)
    return y.data, ny.data
