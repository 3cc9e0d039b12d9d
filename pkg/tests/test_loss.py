import inspect

import numpy as np
import pytest

import oracles
from neuralpoints import autodiff as ad
from neuralpoints import loss as loss_mod
from neuralpoints.autodiff import ContractError, Tensor
from neuralpoints.config import LossWeights
from neuralpoints.integrate import GlobalField
from neuralpoints.loss import (integration_loss, normal_loss, proj_distance,
                               proj_normal_distance, shape_loss, total_loss)


def _unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_proj_distance_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(30):
        p = rng.uniform(-0.2, 0.2, (int(rng.integers(1, 12)), 3))
        q = rng.uniform(-0.2, 0.2, (int(rng.integers(1, 12)), 3))
        assert abs(float(proj_distance(p, q).data) - oracles.proj_distance(p, q)) < 1e-12


def test_proj_distance_zero_on_identical_sets_far_apart():
    p = np.eye(3)
    assert float(proj_distance(p, p).data) < 1e-300


def test_integration_loss_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(30):
        g = oracles.random_field(rng)
        y = rng.uniform(-0.25, 0.25, (5, 3))
        got = float(integration_loss(y, g).data)
        assert abs(got - oracles.integration_loss(y, g)) < 1e-12


def test_integration_loss_two_patch_pencil():
    # y halfway between two single-sample patches at distance 2a apart
    a = 0.05
    g = GlobalField(centers=np.array([[-a, 0, 0], [a, 0, 0.0]]),
                    samples=np.array([[-a, 0.01, 0], [a, -0.01, 0.0]]),
                    normals=np.array([[0, 0, 1.0], [0, 0, 1.0]]), r=1)
    y = np.zeros((1, 3))
    want = 2 * (a * a + 0.01 ** 2)
    assert float(integration_loss(y, g).data) == pytest.approx(want, rel=1e-14)
    mean = integration_loss(y, g, reduction="mean")
    assert float(mean.data) == pytest.approx(want / 2, rel=1e-14)
    with pytest.raises(ContractError):
        integration_loss(y, g, reduction="max")


def test_integration_loss_vanishes_when_patches_agree():
    pts = np.array([[0.0, 0, 0], [0.01, 0, 0]])
    g = GlobalField(centers=pts, samples=pts, normals=np.tile([0, 0, 1.0], (2, 1)), r=1,
                    k_blend=1)
    assert float(integration_loss(pts, g).data) == 0.0


def test_shape_and_normal_are_four_direction_sums():
    rng = np.random.default_rng(2)
    x, y, z = (rng.uniform(-0.2, 0.2, (n, 3)) for n in (9, 7, 11))
    nx, ny, nz = _unit(rng, 9), _unit(rng, 7), _unit(rng, 11)
    want = sum(oracles.proj_distance(a, b) for a, b in ((x, z), (z, x), (y, z), (z, y)))
    assert abs(float(shape_loss(x, y, z).data) - want) < 1e-12
    want_n = 0.0
    for a, na, b, nb in ((x, nx, z, nz), (z, nz, x, nx), (y, ny, z, nz), (z, nz, y, ny)):
        terms = []
        for s in range(len(a)):
            _, n = oracles.proj(a[s], b, nb)
            n = n if n @ na[s] >= 0 else -n
            terms.append(np.sum((na[s] - n) ** 2))
        want_n += np.mean(terms)
    assert abs(float(normal_loss(x, nx, y, ny, z, nz).data) - want_n) < 1e-12


def test_normal_distance_ignores_orientation():
    rng = np.random.default_rng(3)
    p, q = rng.uniform(size=(5, 3)), rng.uniform(size=(6, 3))
    n_p, n_q = _unit(rng, 5), _unit(rng, 6)
    a = float(proj_normal_distance(p, n_p, q, n_q).data)
    b = float(proj_normal_distance(p, -n_p, q, n_q).data)
    assert a == pytest.approx(b, abs=1e-15)
    with pytest.raises(ContractError):
        proj_normal_distance(p, None, q, n_q)


def _instance(seed):
    rng = np.random.default_rng(seed)
    g = oracles.random_field(rng, 6, 4)
    x_r, n_x = g.samples, g.normals
    y = rng.uniform(-0.2, 0.2, (8, 3))
    z = rng.uniform(-0.2, 0.2, (10, 3))
    return x_r, n_x, y, _unit(rng, 8), z, _unit(rng, 10), g


def test_total_loss_decomposition_and_weights():
    x_r, n_x, y, n_y, z, n_z, g = _instance(4)
    terms = total_loss(x_r, n_x, y, n_y, z, n_z, g, LossWeights(0.01, 0.3))
    r = terms.report
    assert r.total == pytest.approx(r.shape + 0.01 * r.normal + 0.3 * r.integration, abs=1e-12)
    assert r.shape == pytest.approx(float(shape_loss(x_r, y, z).data), abs=1e-15)
    assert r.normal == pytest.approx(float(normal_loss(x_r, n_x, y, n_y, z, n_z).data), abs=1e-15)
    zero = total_loss(x_r, n_x, y, n_y, z, n_z, g, LossWeights(0.0, 0.0)).report
    assert zero.total == zero.shape
    doubled = total_loss(x_r, n_x, y, n_y, z, n_z, g, LossWeights(0.02, 0.6)).report
    assert doubled.shape == r.shape
    assert min(r.shape, r.normal, r.integration) >= 0


def test_report_arithmetic():
    assert 1 + 0.01 * 2 + 0.3 * 3 == pytest.approx(1.92)


def test_losses_are_translation_invariant():
    x_r, n_x, y, n_y, z, n_z, g = _instance(5)
    t = np.array([0.5, -0.25, 0.125])
    moved = GlobalField(g.centers + t, g.samples.data + t, g.normals.data, g.r)
    a = total_loss(x_r, n_x, y, n_y, z, n_z, g).report
    b = total_loss(x_r.data + t, n_x, y + t, n_y, z + t, n_z, moved).report
    for u, v in zip(a.as_row(), b.as_row()):
        assert abs(u - v) < 1e-9


def test_total_loss_gradient_matches_finite_differences():
    x_r, n_x, y, n_y, z, n_z, g = _instance(6)
    g.samples = Tensor(g.samples.data, requires_grad=True)
    yt = Tensor(y, requires_grad=True)

    def value():
        return total_loss(g.samples, n_x, yt, n_y, z, n_z, g).report.total

    terms = total_loss(g.samples, n_x, yt, n_y, z, n_z, g)
    grads = ad.backward(terms.total, {"s": g.samples, "y": yt})
    rng = np.random.default_rng(7)
    for name, t in (("s", g.samples), ("y", yt)):
        for _ in range(8):
            idx = tuple(int(rng.integers(s)) for s in t.shape)
            num = ad.finite_difference(value, t, idx, 1e-7)
            assert ad.relative_error(grads[name][idx], num, floor=1e-6) < 1e-5, (name, idx)


def test_empty_sets_rejected():
    with pytest.raises(ContractError):
        proj_distance(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        proj_distance(np.zeros((2, 3)), np.zeros((0, 3)))


def test_training_loss_uses_no_closest_point_matching():
    src = inspect.getsource(loss_mod)
    assert "chamfer" not in src and "hausdorff" not in src
    assert "argmin" not in src
