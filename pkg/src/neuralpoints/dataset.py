"""Synthetic training data: anchored input patches with matched ground truth.

Layout on disk::

    inputs/<id>.xyz    input patch, "x y z nx ny nz" per line
    gt/<id>.xyz        ground-truth patch at the target factor
    manifest.json      one entry per sample plus the generation settings
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, ContractError
from .geometry import KnnIndex, PointCloud, farthest_point_sample, poisson_like_sample
from .pcio import read_xyz, write_xyz
from .surfaces import parse_surface

__all__ = ["DatasetConfig", "TrainSample", "gen_dataset", "load_dataset", "match_gt_patch"]


@dataclass
class DatasetConfig:
    surfaces: list
    output: str
    points_in: int = 256
    factor: float = 4.0
    anchors: int = 1
    patch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.surfaces:
            raise ConfigError("dataset needs at least one surface")
        if not self.factor >= 1:
            raise ConfigError("factor must be >= 1")
        if self.points_in < 1 or self.anchors < 1 or self.patch_size < 1:
            raise ConfigError("points_in, anchors and patch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainSample:
    sample_id: str
    model_id: int
    anchor: int
    input: PointCloud
    gt: PointCloud


def match_gt_patch(inputs: np.ndarray, patch: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Indices of GT points whose nearest input point lies in ``patch``."""
    nearest = KnnIndex(inputs).query(gt, 1)[:, 0]
    member = np.zeros(len(inputs), dtype=bool)
    member[patch] = True
    return np.nonzero(member[nearest])[0]


def _describe(spec) -> str:
    return spec if isinstance(spec, str) else json.dumps(spec, sort_keys=True)


def gen_dataset(cfg: DatasetConfig) -> dict:
    """Sample every surface, cut anchored patches and write them out.

    Each surface gets its own child seed, so repeating a surface in the list
    yields independent samplings of it.
    """
    out = Path(cfg.output)
    (out / "inputs").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(cfg.surfaces))
    n_gt = int(math.floor(cfg.factor * cfg.points_in + 0.5))
    entries = []
    for model_id, (spec, ss) in enumerate(zip(cfg.surfaces, seeds)):
        surface = parse_surface(spec)
        s_in, s_gt, s_anchor = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        inputs = poisson_like_sample(surface, cfg.points_in, seed=s_in)
        gt = poisson_like_sample(surface, n_gt, seed=s_gt)
        count = min(cfg.anchors, len(inputs))
        anchors = farthest_point_sample(inputs.positions, count, seed=s_anchor)
        index = KnnIndex(inputs.positions)
        for a in anchors:
            patch = index.query(inputs.positions[a], min(cfg.patch_size, len(inputs)))
            gt_idx = match_gt_patch(inputs.positions, patch, gt.positions)
            sample_id = f"m{model_id:03d}_a{int(a):05d}"
            write_xyz(out / "inputs" / f"{sample_id}.xyz", inputs.subset(np.sort(patch)))
            write_xyz(out / "gt" / f"{sample_id}.xyz", gt.subset(gt_idx))
            entries.append({"id": sample_id, "model": model_id, "surface": _describe(spec),
                            "anchor": int(a), "factor": cfg.factor,
                            "inputs": len(patch), "gt": int(len(gt_idx))})
    manifest = {"seed": cfg.seed, "factor": cfg.factor, "points_in": cfg.points_in,
                "anchors": cfg.anchors, "patch_size": cfg.patch_size,
                "surfaces": [_describe(s) for s in cfg.surfaces], "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def load_dataset(path) -> list[TrainSample]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for e in manifest["samples"]:
        inp = read_xyz(root / "inputs" / f"{e['id']}.xyz")
        gt = read_xyz(root / "gt" / f"{e['id']}.xyz")
        if not inp.has_normals or not gt.has_normals:
            raise ContractError(f"sample {e['id']} lacks normals")
        samples.append(TrainSample(e["id"], e["model"], e["anchor"], inp, gt))
    if not samples:
        raise ContractError(f"{root}: dataset is empty")
    return samples
