"""Model container and the versioned checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic  b"NPCKPT\\x00\\x01"  (format version 1 in the last byte)
    8 bytes   uint64 length L of the JSON header
    L bytes   UTF-8 JSON: {"model": ModelConfig, "train": TrainConfig | null,
              "iteration": int, "rng": numpy bit-generator state | null,
              "tensors": [{"name": str, "shape": [int, ...]}, ...]}
    rest      float64 little-endian tensor data, concatenated in header order

The JSON is written with sorted keys and no whitespace, so saving a loaded
checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor
from .config import ModelConfig
from .encoder import EncoderParams, init_encoder
from .field import FieldParams, init_field

__all__ = ["NeuralPointsModel", "Checkpoint", "save_checkpoint", "load_checkpoint", "MAGIC"]

MAGIC = b"NPCKPT\x00\x01"


class NeuralPointsModel:
    def __init__(self, config: ModelConfig, encoder: EncoderParams, field: FieldParams):
        self.config = config
        self.encoder = encoder
        self.field = field

    @classmethod
    def initialize(cls, config: ModelConfig, seed=0) -> "NeuralPointsModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, init_encoder(config, rng), init_field(config, rng))

    def parameters(self) -> dict[str, Tensor]:
        return {**self.encoder.named(), **self.field.named()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_final_layer(self) -> None:
        self.field.w2.data = np.zeros_like(self.field.w2.data)
        self.field.b2.data = np.zeros_like(self.field.b2.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(arrays) != set(params):
            raise ContractError("checkpoint tensors do not match the model layout")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "NeuralPointsModel":
        model = cls.initialize(config, 0)
        model.load_arrays(arrays)
        return model


@dataclass
class Checkpoint:
    model: NeuralPointsModel
    train_config: dict | None = None
    iteration: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _header(ckpt: Checkpoint) -> tuple[bytes, list[np.ndarray]]:
    arrays = ckpt.model.state_arrays()
    names = list(arrays)
    meta = {
        "model": ckpt.model.config.to_dict(),
        "train": ckpt.train_config,
        "iteration": int(ckpt.iteration),
        "rng": ckpt.rng_state,
        "tensors": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    if ckpt.extra:
        meta["extra"] = ckpt.extra
    text = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    return text.encode("utf-8"), [arrays[n] for n in names]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header, arrays = _header(ckpt)
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return MAGIC + struct.pack("<Q", len(header)) + header + body


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:6] != MAGIC[:6]:
        raise ContractError(f"{path}: not a neuralpoints checkpoint")
    if raw[:8] != MAGIC:
        raise ContractError(f"{path}: unsupported checkpoint version {raw[7]}")
    (length,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + length].decode("utf-8"))
    offset = 16 + length
    arrays = {}
    for spec in meta["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 8 * count > len(raw):
            raise ContractError(f"{path}: truncated tensor data")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing tensor data")
    config = ModelConfig.from_dict(meta["model"])
    model = NeuralPointsModel.from_arrays(config, arrays)
    return Checkpoint(model=model, train_config=meta["train"], iteration=meta["iteration"],
                      rng_state=meta["rng"], extra=meta.get("extra", {}))

