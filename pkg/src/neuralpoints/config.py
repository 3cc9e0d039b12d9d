"""Hyperparameters. Every field is optional in JSON; defaults are desk scale."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .autodiff import ConfigError

__all__ = ["TrainConfig", "ModelConfig", "LossWeights", "patch_sample_count"]


@dataclass(frozen=True)
class LossWeights:
    """Term weights; ``integration_reduction`` is "sum" (default) or "mean"."""

    normal: float = 0.01
    integration: float = 0.3
    integration_reduction: str = "sum"

    def __post_init__(self):
        if self.normal < 0 or self.integration < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.integration_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown integration_reduction {self.integration_reduction!r}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the pipeline constants the model is evaluated with."""

    edge_widths: tuple = (32, 32, 64, 64, 128)
    agg_width: int = 128
    edge_k: int = 4
    knn_feature: int = 10
    field_hidden: tuple = (256, 256)
    pe_frequencies: int = 6
    pe_include_input: bool = True
    last_layer_scale: float = 1e-2
    knn_proj: int = 4
    knn_blend: int = 4
    alpha1: float = 100.0
    alpha2: float = 1000.0

    @property
    def feature_dim(self) -> int:
        return 2 * self.agg_width

    @property
    def pe_dim(self) -> int:
        return 4 * self.pe_frequencies + (2 if self.pe_include_input else 0)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["edge_widths"] = list(self.edge_widths)
        d["field_hidden"] = list(self.field_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("edge_widths", "field_hidden"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


@dataclass
class TrainConfig:
    batch_size: int = 4
    iterations: int = 2000
    lr: float = 0.01
    lr_decay: float = 0.5
    decay_interval: int = 250
    optimizer: str = "sgd"
    patch_size: int = 256
    knn_feature: int = 10
    knn_proj: int = 4
    knn_blend: int = 4
    alpha1: float = 100.0
    alpha2: float = 1000.0
    omega1: float = 0.01
    omega2: float = 0.3
    integration_reduction: str = "sum"
    uv_jitter: bool = False
    r_rule: str = "floor(4*J/I)"
    seed: int = 0
    edge_widths: tuple = (32, 32, 64, 64, 128)
    agg_width: int = 128
    edge_k: int = 4
    field_hidden: tuple = (256, 256)
    pe_frequencies: int = 6
    pe_include_input: bool = True
    last_layer_scale: float = 1e-2
    checkpoint_every: int = 0
    dataset: str | None = None
    output: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edge_widths = tuple(int(v) for v in self.edge_widths)
        self.field_hidden = tuple(int(v) for v in self.field_hidden)
        for name in ("batch_size", "decay_interval", "patch_size", "knn_feature", "knn_proj",
                     "knn_blend", "agg_width", "edge_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")
        if self.omega1 < 0 or self.omega2 < 0 or self.alpha1 <= 0 or self.alpha2 <= 0:
            raise ConfigError("loss weights must be nonnegative and sharpness positive")
        if self.integration_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown integration_reduction {self.integration_reduction!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.r_rule != "floor(4*J/I)":
            raise ConfigError(f"unsupported r_rule {self.r_rule!r}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.omega1, self.omega2, self.integration_reduction)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            edge_widths=self.edge_widths, agg_width=self.agg_width, edge_k=self.edge_k,
            knn_feature=self.knn_feature, field_hidden=self.field_hidden,
            pe_frequencies=self.pe_frequencies, pe_include_input=self.pe_include_input,
            last_layer_scale=self.last_layer_scale, knn_proj=self.knn_proj,
            knn_blend=self.knn_blend, alpha1=self.alpha1, alpha2=self.alpha2,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["edge_widths"] = list(self.edge_widths)
        d["field_hidden"] = list(self.field_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def patch_sample_count(target: int, inputs: int) -> int:
    """Per-patch sample count R = floor(4 J / I), at least 1."""
    return max(1, (4 * target) // inputs)
