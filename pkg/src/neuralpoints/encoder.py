"""Local feature extraction: a small DGCNN run on every decentralised k-NN set."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import ModelConfig
from ._kernels import knn_graph_sets
from .geometry import KnnIndex, PointCloud

__all__ = ["EncoderParams", "LocalFeature", "init_encoder", "knn_graph", "edge_conv",
           "extract_local_features", "local_sets"]


@dataclass
class EncoderParams:
    """Weights ``(W, b)`` of the EdgeConv layers; the last pair aggregates."""

    layers: list[tuple[Tensor, Tensor]]

    @property
    def conv_layers(self) -> list[tuple[Tensor, Tensor]]:
        return self.layers[:-1]

    @property
    def aggregation(self) -> tuple[Tensor, Tensor]:
        return self.layers[-1]

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"encoder.{i}.weight"] = w
            out[f"encoder.{i}.bias"] = b
        return out


@dataclass
class LocalFeature:
    f_star: Tensor  # (I, C)
    f: Tensor  # (I, 2C)


def init_encoder(cfg: ModelConfig, rng: np.random.Generator) -> EncoderParams:
    layers = []
    c_in = 3
    for width in cfg.edge_widths:
        layers.append(_edge_layer(c_in, width, rng))
        c_in = width
    layers.append(_edge_layer(sum(cfg.edge_widths), cfg.agg_width, rng))
    return EncoderParams(layers)


def _edge_layer(c_in: int, c_out: int, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    # A zero bias would put the center of every decentralised set exactly on
    # the relu kink (its own coordinates are 0), so biases start small but nonzero.
    fan_in = 2 * c_in
    w = rng.standard_normal((fan_in, c_out)) * np.sqrt(2.0 / fan_in)
    b = rng.uniform(-1.0, 1.0, c_out) / np.sqrt(fan_in)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


def knn_graph(features: np.ndarray, k: int) -> np.ndarray:
    """k nearest members (self included) of every point within its own set.

    ``features`` has shape (..., N, C); returns (..., N, k) indices into the
    set axis, ties resolved to the smaller index.
    """
    n, c = features.shape[-2], features.shape[-1]
    if k > n:
        raise ContractError(f"edge_conv needs k <= N, got k={k}, N={n}")
    lead = features.shape[:-2]
    flat = np.ascontiguousarray(features.reshape(-1, n, c), dtype=np.float64)
    return knn_graph_sets(flat, k).reshape(lead + (n, k))


def edge_conv(features: Tensor, k: int, weight: Tensor, bias: Tensor,
              graph: np.ndarray | None = None) -> Tensor:
    """EdgeConv with a one-layer edge MLP and max aggregation.

    ``out_i = max_j relu([f_i, f_j - f_i] W + b)`` over the k-NN graph in the
    current feature space. The linear map splits into ``f_i (W_top - W_bot)
    + f_j W_bot`` and relu commutes with the max, so only per-point products
    are formed.
    """
    features = ad.as_tensor(features)
    c = features.shape[-1]
    if weight.shape[0] != 2 * c:
        raise ad.DimensionError(
            f"edge_conv: weight rows {weight.shape[0]} != 2 * feature dim {c}")
    if graph is None:
        graph = knn_graph(features.data, k)
    n = features.shape[-2]
    w_top = ad.take(weight, slice(0, c))
    w_bot = ad.take(weight, slice(c, 2 * c))
    nbr_term = features @ w_bot
    self_term = features @ w_top - nbr_term
    lead = features.shape[:-2]
    c_out = weight.shape[1]
    offsets = (np.arange(int(np.prod(lead, dtype=np.int64))) * n).reshape(lead + (1, 1))
    flat = ad.reshape(nbr_term, (-1, c_out))
    pooled = ad.gather_max(flat, graph + offsets)  # (..., N, C')
    return ad.relu(self_term + pooled + bias)


def local_sets(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k-NN index sets and their decentralised coordinates, shapes (I, k) and (I, k, 3)."""
    if len(points) == 0:
        raise ContractError("cannot extract features from an empty cloud")
    if k > len(points):
        raise ContractError(f"knn_feature={k} exceeds cloud size {len(points)}")
    idx = KnnIndex(points).query(points, k)
    return idx, points[idx] - points[:, None, :]


def extract_local_features(cloud, params: EncoderParams, cfg: ModelConfig,
                           neighbors: np.ndarray | None = None) -> LocalFeature:
    points = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if neighbors is None:
        neighbors, local = local_sets(points, cfg.knn_feature)
    else:
        local = points[neighbors] - points[:, None, :]
    k_edge = min(cfg.edge_k, neighbors.shape[1])
    x = Tensor(local)
    outs = []
    for w, b in params.conv_layers:
        x = edge_conv(x, k_edge, w, b)
        outs.append(x)
    w, b = params.aggregation
    agg = edge_conv(ad.concat(outs, axis=-1), k_edge, w, b)
    f_star = ad.max_reduce(agg, axis=1)
    pooled = ad.gather_max(f_star, neighbors)
    return LocalFeature(f_star=f_star, f=ad.concat([f_star, pooled], axis=-1))
