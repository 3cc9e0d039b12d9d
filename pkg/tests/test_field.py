import math

import numpy as np
import pytest

from neuralpoints import autodiff as ad
from neuralpoints.autodiff import ContractError, Tensor
from neuralpoints.config import ModelConfig
from neuralpoints.geometry import knn_brute
from neuralpoints.field import (PosEncodingConfig, evaluate_charts, fused_blend, grid_uv,
                                init_field, jittered_uv, phi, phi_normal, phi_partials, pos_encode,
                                pos_encode_with_derivatives, proj, sample_patches,
                                soft_blend_graph)

CFG = ModelConfig(edge_widths=(4,), agg_width=4, field_hidden=(8, 8), pe_frequencies=3,
                  last_layer_scale=1.0)


def _params(seed=0, cfg=CFG):
    return init_field(cfg, np.random.default_rng(seed))


def _reference_chart(uv, f, x, p):
    """The chart MLP written with elementary graph ops."""
    enc = pos_encode(uv, p.pe)
    n_i, n_r = f.shape[0], len(uv)
    pe = ad.broadcast_to(Tensor(enc[None]), (n_i, n_r, enc.shape[1]))
    feat = ad.broadcast_to(ad.reshape(f, (n_i, 1, f.shape[1])), (n_i, n_r, f.shape[1]))
    h = ad.relu(pe @ p.w0_pe + feat @ p.w0_feat + p.b0)
    h = ad.relu(h @ p.w1 + p.b1)
    return h @ p.w2 + p.b2 + Tensor(x[:, None, :])


def test_pos_encoding_layout_and_derivatives():
    cfg = PosEncodingConfig(3, True)
    uv = np.array([[0.3, -0.7]])
    enc = pos_encode(uv[0], cfg)
    assert enc.shape == (cfg.dim,) and cfg.dim == 14
    assert enc[:2].tolist() == [0.3, -0.7]
    assert enc[2] == pytest.approx(np.sin(np.pi * 0.3)) and enc[3] == pytest.approx(np.cos(np.pi * 0.3))
    _, du, dv = pos_encode_with_derivatives(uv, cfg)
    h = 1e-6
    num_u = (pos_encode(uv + [h, 0], cfg) - pos_encode(uv - [h, 0], cfg)) / (2 * h)
    num_v = (pos_encode(uv + [0, h], cfg) - pos_encode(uv - [0, h], cfg)) / (2 * h)
    assert np.allclose(du, num_u, atol=1e-6) and np.allclose(dv, num_v, atol=1e-6)


def test_grid_uv_cell_centers():
    assert grid_uv(1).tolist() == [[0.0, 0.0]]
    g = grid_uv(16)
    assert len(g) == 16 and np.all(np.abs(g) < 1)
    assert sorted(set(g[:, 0].tolist())) == [-0.75, -0.25, 0.25, 0.75]
    assert len(grid_uv(10)) == 10
    with pytest.raises(ContractError):
        grid_uv(0)


def test_jittered_uv_stays_in_its_cell():
    rng = np.random.default_rng(0)
    for r in (1, 4, 10, 64):
        g = grid_uv(r)
        half = 1.0 / (math.isqrt(r - 1) + 1)
        j = jittered_uv(r, rng)
        assert j.shape == g.shape and np.all(np.abs(j) <= 1)
        assert np.all(np.abs(j - g) <= half) and not np.array_equal(j, g)
    assert np.array_equal(jittered_uv(9, np.random.default_rng(3)),
                          jittered_uv(9, np.random.default_rng(3)))


def test_fused_chart_matches_graph_reference():
    p = _params(1)
    rng = np.random.default_rng(2)
    f = Tensor(rng.standard_normal((5, CFG.feature_dim)), requires_grad=True)
    x = rng.standard_normal((5, 3))
    uv = grid_uv(9)
    batch = evaluate_charts(uv, f, x, p)
    ref = _reference_chart(uv, f, x, p)
    assert np.allclose(batch.points.data, ref.data, atol=1e-13)

    w = rng.standard_normal(ref.shape)
    named = {"f": f, **p.named()}
    g_fused = ad.backward(ad.sum_reduce(batch.points * w), named)
    g_ref = ad.backward(ad.sum_reduce(ref * w), named)
    for k in named:
        assert np.allclose(g_fused[k], g_ref[k], atol=1e-12), k


def test_chart_partials_match_finite_differences_in_uv():
    p = _params(3)
    rng = np.random.default_rng(4)
    f = rng.standard_normal((1, CFG.feature_dim))
    x = rng.standard_normal((1, 3))
    uv = rng.uniform(-0.9, 0.9, (6, 2))
    batch = evaluate_charts(uv, f, x, p)
    h = 1e-6
    for axis, tangent in ((0, batch.du), (1, batch.dv)):
        e = np.zeros(2)
        e[axis] = h
        num = (evaluate_charts(uv + e, f, x, p).points.data
               - evaluate_charts(uv - e, f, x, p).points.data) / (2 * h)
        assert np.allclose(tangent.data, num, atol=1e-6)


def test_partial_derivatives_are_differentiable_in_weights():
    p = _params(5)
    rng = np.random.default_rng(6)
    f = rng.standard_normal((3, CFG.feature_dim))
    x = rng.standard_normal((3, 3))
    uv = grid_uv(4)
    w = rng.standard_normal((2, 3, 4, 3))

    def value():
        b = evaluate_charts(uv, f, x, p)
        return float(np.sum(b.du.data * w[0]) + np.sum(b.dv.data * w[1]))

    b = evaluate_charts(uv, f, x, p)
    grads = ad.backward(ad.sum_reduce(b.du * w[0]) + ad.sum_reduce(b.dv * w[1]), p.named())
    for name, t in p.named().items():
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        num = ad.finite_difference(value, t, idx, 1e-6)
        assert ad.relative_error(grads[name][idx], num) < 1e-5, name


def test_phi_normal_unit_and_orthogonal_to_partials():
    p = _params(7)
    rng = np.random.default_rng(8)
    for _ in range(20):
        uv = rng.uniform(-1, 1, 2)
        f = rng.standard_normal(CFG.feature_dim)
        x = rng.standard_normal(3)
        n, degenerate = phi_normal(uv, f, x, p)
        du, dv = phi_partials(uv, f, x, p)
        if degenerate:  # every hidden unit off: the chart is locally constant
            assert np.linalg.norm(np.cross(du.data, dv.data)) < 1e-12
            continue
        assert abs(np.linalg.norm(n.data) - 1) < 1e-12
        assert abs(n.data @ du.data) < 1e-9 * np.linalg.norm(du.data)
        assert abs(n.data @ dv.data) < 1e-9 * np.linalg.norm(dv.data)


def test_zero_final_layer_gives_centers_and_fallback_normals():
    p = _params(9)
    p.w2.data = np.zeros_like(p.w2.data)
    p.b2.data = np.zeros_like(p.b2.data)
    x = np.random.default_rng(10).standard_normal((4, 3))
    f = np.random.default_rng(11).standard_normal((4, CFG.feature_dim))
    _, pts, nrm, degenerate = sample_patches(9, f, x, p)
    assert np.array_equal(pts.data, np.repeat(x[:, None], 9, axis=1))
    assert degenerate.all()
    assert np.array_equal(nrm.data, np.broadcast_to([0.0, 0.0, 1.0], (4, 9, 3)))
    assert np.array_equal(phi(np.zeros(2), f[0], x[0], p).data, x[0])


def test_patch_normals_are_oriented_consistently():
    p = _params(12)
    f = np.random.default_rng(13).standard_normal((6, CFG.feature_dim))
    uv, _, nrm, _ = sample_patches(16, f, np.zeros((6, 3)), p)
    for i in range(6):
        raw = np.array([phi_normal(t, f[i], np.zeros(3), p)[0].data for t in uv])
        sign = np.where(raw @ raw.mean(0) < 0, -1.0, 1.0)
        assert np.allclose(nrm.data[i], raw * sign[:, None], atol=1e-14)


@pytest.mark.parametrize("alpha", [1.0, 100.0, 1e3, 1e6])
def test_fused_blend_matches_graph_composition(alpha):
    rng = np.random.default_rng(int(alpha))
    q = Tensor(rng.standard_normal((7, 3)) * 0.1, requires_grad=True)
    a = Tensor(rng.standard_normal((7, 4, 3)) * 0.1, requires_grad=True)
    n0 = rng.standard_normal((7, 4, 3))
    n = Tensor(n0 / np.linalg.norm(n0, axis=-1, keepdims=True), requires_grad=True)
    p1, m1, w1, f1 = fused_blend(q, a, a, n, alpha)
    p2, m2, w2, f2 = soft_blend_graph(q, a, n, alpha)
    assert np.allclose(p1.data, p2.data, atol=1e-14, rtol=0)
    assert np.allclose(m1.data, m2.data, atol=1e-13, rtol=0)
    assert np.allclose(w1, w2.data, atol=1e-14)
    assert np.array_equal(f1, f2)
    wp, wn = rng.standard_normal((2, 7, 3))
    named = {"q": q, "a": a, "n": n}
    g1 = ad.backward(ad.sum_reduce(p1 * wp) + ad.sum_reduce(m1 * wn), named)
    g2 = ad.backward(ad.sum_reduce(p2 * wp) + ad.sum_reduce(m2 * wn), named)
    for k in named:
        scale = max(1.0, np.abs(g2[k]).max())
        assert np.allclose(g1[k], g2[k], atol=1e-11 * scale), k


def test_fused_blend_broadcasts_query():
    rng = np.random.default_rng(14)
    q = Tensor(rng.standard_normal((5, 1, 3)), requires_grad=True)
    a = Tensor(rng.standard_normal((5, 2, 4, 3)))
    p, _, _, _ = fused_blend(q, a, a, None, 10.0)
    assert p.shape == (5, 2, 3)
    g = ad.backward(ad.sum_reduce(p), {"q": q})["q"]
    assert g.shape == (5, 1, 3)
    with pytest.raises(ad.DimensionError):
        fused_blend(Tensor(np.zeros((3, 3))), a, a, None, 1.0)


def _proj_brute(p, q, qn, k, alpha):
    d2 = ((q - p) ** 2).sum(1)
    nb = np.argsort(d2, kind="stable")[:k]
    w = np.exp(-alpha * d2[nb])
    point = (w[:, None] * q[nb]).sum(0) / w.sum()
    ref = qn[nb[0]]
    aligned = qn[nb] * np.where(qn[nb] @ ref < 0, -1.0, 1.0)[:, None]
    nrm = (w[:, None] * aligned).sum(0) / w.sum()
    return point, nrm / np.linalg.norm(nrm)


def test_proj_matches_brute_force():
    rng = np.random.default_rng(15)
    for _ in range(25):
        q = rng.uniform(-0.2, 0.2, (30, 3))
        qn = rng.standard_normal((30, 3))
        qn /= np.linalg.norm(qn, axis=1, keepdims=True)
        p = rng.uniform(-0.2, 0.2, (5, 3))
        got_p, got_n, flags = proj(p, q, qn, k=4, alpha=1000.0)
        assert not flags.any()
        for s in range(5):
            bp, bn = _proj_brute(p[s], q, qn, 4, 1000.0)
            assert np.allclose(got_p.data[s], bp, atol=1e-12)
            assert np.allclose(got_n.data[s], bn, atol=1e-12)


def test_proj_is_convex_combination_and_rotation_equivariant():
    rng = np.random.default_rng(16)
    q = rng.uniform(-0.3, 0.3, (40, 3))
    p = rng.uniform(-0.3, 0.3, (20, 3))
    out, _, _ = proj(p, q, k=4, alpha=100.0)
    nb = knn_brute(q, p, 4)
    _, _, w, _ = fused_blend(p, q[nb], q[nb], None, 100.0)
    assert np.all(w > 0) and np.allclose(w.sum(-1), 1.0)
    rot, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    out_r, _, _ = proj(p @ rot.T, q @ rot.T, k=4, alpha=100.0)
    assert np.allclose(out_r.data, out.data @ rot.T, atol=1e-12)


def test_proj_underflow_takes_nearest_exactly():
    q = np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0]])
    far = np.array([[10.0, 0.0, 0.0]])
    out, _, flags = proj(far, q, k=3, alpha=1e3)
    assert flags[0]
    assert np.array_equal(out.data[0], q[1])


def test_proj_needs_points():
    with pytest.raises(ContractError):
        proj(np.zeros((1, 3)), np.zeros((0, 3)))
