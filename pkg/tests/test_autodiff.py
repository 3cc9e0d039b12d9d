import numpy as np
import pytest

from neuralpoints import autodiff as ad
from neuralpoints.autodiff import ContractError, DimensionError, Tensor


def _fd_check(build, shapes, seed=0, h=1e-6, tol=1e-6, positive=False):
    """Compare reverse-mode gradients of sum(w * build(*xs)) with central differences."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.uniform(0.5, 1.5, s) if positive else rng.standard_normal(s),
                 requires_grad=True) for s in shapes]
    out_shape = build(*xs).shape
    w = rng.standard_normal(out_shape)

    def f():
        return float(np.sum(build(*xs).data * w))

    loss = ad.sum_reduce(build(*xs) * w)
    grads = ad.backward(loss, {str(i): x for i, x in enumerate(xs)})
    for i, x in enumerate(xs):
        for idx in np.ndindex(x.shape):
            num = ad.finite_difference(f, x, idx, h)
            assert abs(grads[str(i)][idx] - num) <= tol * max(1.0, abs(num)), (i, idx)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(3, 1), (1, 4)]),
    ("mul", lambda a, b: a * b, [(2, 3), (2, 3)]),
    ("square", lambda a: ad.square(a), [(5,)]),
    ("exp", lambda a: ad.exp(a), [(2, 3)]),
    ("sin", lambda a: ad.sin(a), [(4,)]),
    ("cos", lambda a: ad.cos(a), [(4,)]),
    ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: a @ b, [(2, 3, 4), (4, 2)]),
    ("cross3", lambda a, b: ad.cross3(a, b), [(4, 3), (4, 3)]),
    ("l2norm", lambda a: ad.l2norm(a), [(4, 3)]),
    ("normalize3", lambda a: ad.normalize3(a), [(4, 3)]),
    ("sum_axis", lambda a: ad.sum_reduce(a, axis=1), [(3, 5)]),
    ("sum_small_trailing", lambda a: ad.sum_reduce(a, axis=-1), [(4, 3)]),
    ("mean", lambda a: ad.mean(a, axis=0), [(3, 2)]),
    ("max_reduce", lambda a: ad.max_reduce(a, axis=1), [(3, 5)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    ("reshape", lambda a: ad.reshape(a, (6,)), [(2, 3)]),
    ("take", lambda a: ad.take(a, (slice(None), slice(1, 3))), [(3, 4)]),
    ("gather", lambda a: ad.gather(a, np.array([[0, 2], [2, 2]])), [(3, 2)]),
    ("broadcast_to", lambda a: ad.broadcast_to(a, (3, 2)), [(1, 2)]),
])
def test_op_gradients_match_finite_differences(name, build, shapes):
    _fd_check(build, shapes)


def test_div_gradient():
    _fd_check(lambda a, b: a / b, [(3,), (3,)], positive=True)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(3)
    x = Tensor(rng.choice([-1, 1], 8) * rng.uniform(0.1, 1.0, 8), requires_grad=True)
    g = ad.backward(ad.sum_reduce(ad.relu(x) * np.arange(8.0)), {"x": x})["x"]
    assert np.array_equal(g, (x.data > 0) * np.arange(8.0))


def test_gather_max_first_winner_takes_tie():
    a = Tensor(np.array([[1.0], [3.0], [3.0], [0.0]]), requires_grad=True)
    idx = np.array([[1, 2, 0], [2, 1, 3]])
    out = ad.gather_max(a, idx)
    assert out.data.ravel().tolist() == [3.0, 3.0]
    g = ad.backward(ad.sum_reduce(out), {"a": a})["a"]
    # row 0 picks index 1 (first listed), row 1 picks index 2
    assert g.ravel().tolist() == [0.0, 1.0, 1.0, 0.0]


def test_gather_max_matches_dense_max():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((20, 5)))
    idx = rng.integers(0, 20, (7, 4))
    assert np.array_equal(ad.gather_max(a, idx).data, a.data[idx].max(axis=1))


def test_gradient_accumulates_over_shared_subgraph():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = ad.sum_reduce(y + y * 3.0)
    assert ad.backward(z, {"x": x})["x"][0] == pytest.approx(16.0)


def test_shape_errors_are_dimension_errors():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        ad.cross3(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0, {"x": x})


def test_forward_op_dispatch():
    a = Tensor(np.array([[1.0, -2.0]]))
    assert np.array_equal(ad.forward_op("relu", a).data, [[1.0, 0.0]])
    with pytest.raises(ContractError):
        ad.forward_op("tanh", a)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_sgd_step_and_decay_schedule():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    st = ad.SgdState(0.1, decay_factor=0.5, decay_interval=2)
    rates = []
    for _ in range(5):
        rates.append(st.effective_rate)
        ad.sgd_step(p, {"w": np.ones(2)}, st)
    assert rates == [0.1, 0.1, 0.05, 0.05, 0.025]
    assert np.allclose(p["w"].data, [1.0 - 0.325, 2.0 - 0.325])


def test_sgd_rejects_mismatched_gradients():
    p = {"w": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(ContractError):
        ad.sgd_step(p, {"w": np.ones(3)}, ad.SgdState(0.1))


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": Tensor(np.array([0.0, 0.0]), requires_grad=True)}
    ad.adam_step(p, {"w": np.array([5.0, -0.01])}, ad.AdamState(0.01))
    assert np.allclose(p["w"].data, [-0.01, 0.01], rtol=1e-5)


def test_relative_error_floor():
    assert ad.relative_error(1.0, 1.0) == 0.0
    assert ad.relative_error(0.0, 1e-12) < 1e-3
