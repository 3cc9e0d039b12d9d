"""Training loop with a CSV loss log and periodic checkpoints."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ContractError, SgdState, TrainingError, adam_step, sgd_step
from .config import TrainConfig, patch_sample_count
from .dataset import TrainSample
from .encoder import local_sets
from .geometry import PointCloud, normalize_unit_ball
from .loss import LossReport, total_loss
from .model import Checkpoint, NeuralPointsModel, save_checkpoint
from .sampler import run_pipeline

__all__ = ["PreparedSample", "prepare_sample", "train_step", "train", "TrainResult", "LOG_COLUMNS"]

LOG_COLUMNS = ["iter", "shape", "normal", "integration", "total", "lr"]


@dataclass
class PreparedSample:
    """A sample moved into its input patch's unit-ball frame."""

    points: np.ndarray
    neighbors: np.ndarray
    gt: np.ndarray
    gt_normals: np.ndarray
    target: int
    r: int


def prepare_sample(sample: TrainSample | tuple, knn_feature: int) -> PreparedSample:
    inp, gt = (sample.input, sample.gt) if isinstance(sample, TrainSample) else sample
    norm, tf = normalize_unit_ball(PointCloud(inp.positions))
    z = tf.forward(gt.positions)
    neighbors, _ = local_sets(norm.positions, knn_feature)
    j = len(z)
    return PreparedSample(norm.positions, neighbors, z, gt.normals, j,
                          patch_sample_count(j, len(norm.positions)))


def sample_loss(model: NeuralPointsModel, s: PreparedSample, weights, seed=0, jitter=False):
    """Differentiable total loss of one prepared sample."""
    out = run_pipeline(model, s.points, s.target, r=s.r, seed=seed, neighbors=s.neighbors,
                       jitter=jitter)
    return total_loss(out.union.points, out.union.normals, out.points, out.normals,
                      s.gt, s.gt_normals, out.field, weights)


def train_step(model: NeuralPointsModel, batch: list[PreparedSample], weights, seeds,
               jitter=False):
    """Batch-mean loss report and gradient, one backward pass per sample."""
    params = model.parameters()
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    rows = []
    for s, seed in zip(batch, seeds):
        try:
            terms = sample_loss(model, s, weights, seed, jitter)
        except TrainingError:
            break
        rows.append(terms.report.as_row())
        if not math.isfinite(terms.report.total):
            break
        for k, g in ad.backward(terms.total, params).items():
            grads[k] += g
    scale = 1.0 / len(batch)
    mean = np.mean(rows, axis=0) if len(rows) == len(batch) else [math.nan] * 4
    report = LossReport(*(float(v) for v in mean))
    return report, {k: g * scale for k, g in grads.items()}


@dataclass
class TrainResult:
    model: NeuralPointsModel
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0
    checkpoint: Checkpoint | None = None


def _checkpoint(model, cfg, iteration, rng) -> Checkpoint:
    return Checkpoint(model=model, train_config=cfg.to_dict(), iteration=iteration,
                      rng_state=rng.bit_generator.state)


def train(cfg: TrainConfig, samples: list, log_path=None, checkpoint_path=None,
          model: NeuralPointsModel | None = None, progress=None) -> TrainResult:
    """Run ``cfg.iterations`` SGD (or Adam) steps over random batches.

    A non-finite loss or gradient stops training: the parameters from before
    the failing step are written to ``checkpoint_path`` and
    :class:`TrainingError` is raised.
    """
    if not samples:
        raise ContractError("training needs a nonempty dataset")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = NeuralPointsModel.initialize(cfg.model_config(), rng)
    prepared = [prepare_sample(s, cfg.knn_feature) for s in samples]
    state_cls, step_fn = (AdamState, adam_step) if cfg.optimizer == "adam" else (SgdState, sgd_step)
    opt = state_cls(cfg.lr, cfg.lr_decay, cfg.decay_interval)
    params = model.parameters()
    result = TrainResult(model)
    log_fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(LOG_COLUMNS)
    start = time.perf_counter()
    last_good = (model.config, {k: v.copy() for k, v in model.state_arrays().items()}, 0)
    try:
        for it in range(1, cfg.iterations + 1):
            pick = rng.integers(len(prepared), size=cfg.batch_size)
            seeds = rng.integers(2 ** 31, size=cfg.batch_size)
            lr = opt.effective_rate
            report, grads = train_step(model, [prepared[i] for i in pick], cfg.weights, seeds,
                                       cfg.uv_jitter)
            row = {"iter": it, "shape": report.shape, "normal": report.normal,
                   "integration": report.integration, "total": report.total, "lr": lr}
            result.log.append(row)
            if writer:
                writer.writerow([it] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
            finite = math.isfinite(report.total) and all(np.all(np.isfinite(g)) for g in grads.values())
            if not finite:
                if checkpoint_path:
                    good = NeuralPointsModel.from_arrays(last_good[0], last_good[1])
                    save_checkpoint(checkpoint_path, _checkpoint(good, cfg, last_good[2], rng))
                raise TrainingError(f"non-finite loss or gradient at iteration {it}")
            last_good = (model.config, {k: v.copy() for k, v in model.state_arrays().items()}, it - 1)
            step_fn(params, grads, opt)
            if progress:
                progress(row)
            if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, _checkpoint(model, cfg, it, rng))
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.perf_counter() - start
    result.checkpoint = _checkpoint(model, cfg, cfg.iterations, rng)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result.checkpoint)
    return result


def read_log(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]
