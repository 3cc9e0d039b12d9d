import numpy as np
import pytest

import oracles
from neuralpoints import autodiff as ad
from neuralpoints.autodiff import ContractError, Tensor
from neuralpoints.integrate import GlobalField, blend_weights, rho, rho_batch, rho_normal


def test_rho_and_normal_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(40):
        g = oracles.random_field(rng)
        x = rng.uniform(-0.25, 0.25, (4, 3))
        pts, nrm, flags = rho_batch(x, g)
        assert not flags.any()
        for m in range(4):
            bp, bn = oracles.rho(x[m], g)
            assert np.max(np.abs(pts.data[m] - bp)) < 1e-12
            assert np.max(np.abs(nrm.data[m] - bn)) < 1e-12


def test_single_point_helpers():
    g = oracles.random_field(np.random.default_rng(1), 5, 4)
    x = np.array([0.01, 0.02, -0.03])
    bp, bn = oracles.rho(x, g)
    assert np.allclose(rho(x, g).data, bp, atol=1e-12)
    assert np.allclose(rho_normal(x, g).data, bn, atol=1e-12)


def test_blend_weights_and_underflow_fallback():
    c = np.array([[0.0, 0, 0], [0.1, 0, 0]])
    w, flag = blend_weights(np.array([0.02, 0, 0]), c, 100.0)
    assert np.allclose(w, oracles.blend_weights(np.array([0.02, 0, 0]), c, 100.0), rtol=1e-15)
    assert not flag
    w, flag = blend_weights(np.array([50.0, 0, 0]), c, 100.0)
    assert flag and w.tolist() == [0.0, 1.0]
    with pytest.raises(ContractError):
        blend_weights(np.zeros(3), np.zeros((0, 3)))


def test_rho_is_convex_combination_of_patch_projections():
    rng = np.random.default_rng(2)
    g = oracles.random_field(rng, 6, 5)
    x = rng.uniform(-0.2, 0.2, (20, 3))
    pts, _, _ = rho_batch(x, g)
    lo = g.samples.data.min(0) - 1e-12
    hi = g.samples.data.max(0) + 1e-12
    assert np.all(pts.data >= lo) and np.all(pts.data <= hi)


def test_rho_far_query_falls_back_to_nearest_patch():
    g = oracles.random_field(np.random.default_rng(3), 3, 2)
    _, _, flags = rho_batch(np.array([[20.0, 0, 0]]), g)
    assert flags[0]


def test_rho_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = oracles.random_field(rng, 4, 6)
    g.samples = Tensor(g.samples.data, requires_grad=True)
    g.normals = Tensor(g.normals.data, requires_grad=True)
    x = Tensor(rng.uniform(-0.15, 0.15, (5, 3)), requires_grad=True)
    wp, wn = rng.standard_normal((2, 5, 3))

    def value():
        p, n, _ = rho_batch(x, g)
        return float(np.sum(p.data * wp) + np.sum(n.data * wn))

    p, n, _ = rho_batch(x, g)
    named = {"x": x, "s": g.samples, "n": g.normals}
    grads = ad.backward(ad.sum_reduce(p * wp) + ad.sum_reduce(n * wn), named)
    for name, t in named.items():
        for _ in range(6):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            num = ad.finite_difference(value, t, idx, 1e-7)
            assert abs(grads[name][idx] - num) < 1e-5 * max(1.0, abs(num)), (name, idx)


def test_global_field_validation():
    with pytest.raises(ContractError):
        GlobalField(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), 1)
    with pytest.raises(ContractError):
        GlobalField(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((3, 3)), 2)
