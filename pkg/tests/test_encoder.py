import numpy as np
import pytest

from neuralpoints import autodiff as ad
from neuralpoints.autodiff import ContractError, Tensor
from neuralpoints.config import ModelConfig
from neuralpoints.encoder import (edge_conv, extract_local_features, init_encoder, knn_graph,
                                  local_sets)
from neuralpoints.geometry import knn_brute

CFG = ModelConfig(edge_widths=(4, 4, 6), agg_width=8, edge_k=3, knn_feature=5,
                  field_hidden=(8, 8), pe_frequencies=2)


def test_knn_graph_matches_brute_force_in_feature_space():
    rng = np.random.default_rng(0)
    feats = np.round(rng.standard_normal((3, 12, 5)), 1)
    graph = knn_graph(feats, 4)
    for b in range(3):
        d2 = ((feats[b][:, None] - feats[b][None]) ** 2).sum(-1)
        want = np.argsort(d2, axis=1, kind="stable")[:, :4]
        assert np.array_equal(graph[b], want)
    assert np.all(graph[..., 0] == np.arange(12))  # self first


def test_knn_graph_three_dims_uses_exact_knn():
    pts = np.random.default_rng(1).standard_normal((30, 3))
    assert np.array_equal(knn_graph(pts[None], 5)[0], knn_brute(pts, pts, 5))


def test_edge_conv_matches_explicit_edge_features():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((2, 7, 3))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    out = edge_conv(Tensor(f), 3, Tensor(w), Tensor(b)).data
    graph = knn_graph(f, 3)
    for s in range(2):
        for i in range(7):
            edges = [np.concatenate([f[s, i], f[s, j] - f[s, i]]) @ w + b for j in graph[s, i]]
            assert np.allclose(out[s, i], np.maximum(np.max(edges, axis=0), 0.0), atol=1e-13)


def test_edge_conv_rejects_bad_widths():
    with pytest.raises(ad.DimensionError):
        edge_conv(Tensor(np.zeros((1, 4, 3))), 2, Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        edge_conv(Tensor(np.zeros((1, 2, 3))), 3, Tensor(np.zeros((6, 2))), Tensor(np.zeros(2)))


def test_local_sets_are_decentralised():
    pts = np.random.default_rng(3).standard_normal((20, 3))
    idx, local = local_sets(pts, 5)
    assert np.array_equal(idx[:, 0], np.arange(20))
    assert np.allclose(local, pts[idx] - pts[:, None])
    with pytest.raises(ContractError):
        local_sets(pts, 21)


def test_features_have_expected_shape_and_translation_invariance():
    params = init_encoder(CFG, np.random.default_rng(4))
    pts = np.random.default_rng(5).uniform(-1, 1, (25, 3))
    feat = extract_local_features(pts, params, CFG)
    assert feat.f.shape == (25, 2 * CFG.agg_width)
    moved = extract_local_features(pts + np.array([0.25, -0.5, 0.125]), params, CFG)
    assert np.allclose(feat.f.data, moved.f.data, atol=1e-12)


def test_feature_pooling_is_neighborhood_max():
    params = init_encoder(CFG, np.random.default_rng(6))
    pts = np.random.default_rng(7).uniform(-1, 1, (15, 3))
    idx, _ = local_sets(pts, CFG.knn_feature)
    feat = extract_local_features(pts, params, CFG)
    c = CFG.agg_width
    assert np.array_equal(feat.f.data[:, c:], feat.f_star.data[idx].max(axis=1))


def test_encoder_gradient_matches_finite_differences():
    params = init_encoder(CFG, np.random.default_rng(8))
    pts = np.random.default_rng(9).uniform(-1, 1, (12, 3))
    w = np.random.default_rng(10).standard_normal((12, 2 * CFG.agg_width))
    named = params.named()

    def f():
        return float(np.sum(extract_local_features(pts, params, CFG).f.data * w))

    loss = ad.sum_reduce(extract_local_features(pts, params, CFG).f * w)
    grads = ad.backward(loss, named)
    rng = np.random.default_rng(11)
    for name, t in named.items():
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            num = ad.finite_difference(f, t, idx, 1e-6)
            assert ad.relative_error(grads[name][idx], num) < 1e-5, (name, idx)
