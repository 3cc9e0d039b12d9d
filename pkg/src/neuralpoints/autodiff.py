"""Dense reverse-mode automatic differentiation on numpy float64 arrays.

Every op returns a new :class:`Tensor`. When gradient recording is on and any
input requires a gradient, the output keeps references to its inputs plus a
closure mapping the output gradient to input gradients. :func:`backward`
walks that graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ._kernels import gather_max_backward, gather_max_forward, scatter_rows

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "TrainingError",
    "ConfigError",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "forward_op",
    "backward",
    "SgdState",
    "sgd_step",
    "AdamState",
    "adam_step",
]


class DimensionError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class ContractError(ValueError):
    """Raised when a precondition of a public operation is violated."""


class ConfigError(ContractError):
    """A configuration file or surface spec is invalid."""


class TrainingError(RuntimeError):
    """Raised when optimisation hits a non-finite value."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    # numpy must defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_reduce(self, axis=axis, keepdims=keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at exactly 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def cross3(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != (3,) or b.shape[-1:] != (3,):
        raise DimensionError(f"cross3: last axis must be 3, got {a.shape} and {b.shape}")
    _broadcast_shape("cross3", a, b)

    def bw(g):
        # d(a x b) . g  ->  grad_a = b x g, grad_b = g x a
        ga = _unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.cross(a.data, b.data), (a, b), bw, "cross3")


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gk * a.data / safe * (n > 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (a,), bw, "l2norm")


def normalize3(a) -> Tensor:
    """Scale each 3-vector along the last axis to unit length."""
    a = as_tensor(a)
    if a.shape[-1:] != (3,):
        raise DimensionError(f"normalize3: last axis must be 3, got {a.shape}")
    n = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = a.data / safe

    def bw(g):
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - proj * out) / safe,)

    return _make(out, (a,), bw, "normalize3")


# ---------------------------------------------------------------- reductions & shape


def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and a.ndim and axis % a.ndim == a.ndim - 1 and 1 < a.shape[-1] <= 8:
        # numpy reduces tiny trailing axes slowly; left-to-right adds are the same sum
        d = a.data
        out = d[..., 0] + d[..., 1]
        for j in range(2, d.shape[-1]):
            out = out + d[..., j]
        if keepdims:
            out = out[..., None]
    else:
        out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum_reduce")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_reduce(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_reduce(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    arg = np.argmax(a.data, axis=ax)  # first maximum on ties
    out = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (ga,)

    return _make(out, (a,), bw, "max_reduce")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
            )
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def take(a, index) -> Tensor:
    """Basic numpy indexing (slices, ints, ellipsis) with scatter-back gradient."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "take")


def _scatter_rows(g: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    flat = idx.reshape(-1)
    g2 = g.reshape(flat.size, -1)
    return scatter_rows(np.ascontiguousarray(g2, dtype=np.float64),
                        np.ascontiguousarray(flat, dtype=np.int64), n_rows)


def gather_max(a, idx) -> Tensor:
    """Max over gathered rows: out[..., c] = max_j a[idx[..., j], c].

    Equal to ``max_reduce(gather(a, idx), axis=-2)`` (first maximum wins on
    ties) without materialising the gathered array.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"gather_max expects a 2-D source, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError("gather_max index out of range")
    flat = np.ascontiguousarray(idx.reshape(-1, idx.shape[-1]))
    out, arg = gather_max_forward(np.ascontiguousarray(a.data), flat)

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, a.shape[1]))
        return (gather_max_backward(g2, arg, a.shape[0]),)

    return _make(out.reshape(idx.shape[:-1] + (a.shape[1],)), (a,), bw, "gather_max")


def gather(a, idx) -> Tensor:
    """Row gather along axis 0: ``out[...] = a[idx[...]]``."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather: index out of range for shape {a.shape}")
    out = a.data[idx]

    def bw(g):
        return (_scatter_rows(g, idx, a.shape[0]).reshape(a.shape),)

    return _make(out, (a,), bw, "gather")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "exp": exp,
    "sin": sin,
    "cos": cos,
    "square": square,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "max_reduce": max_reduce,
    "sum_reduce": sum_reduce,
    "cross3": cross3,
    "l2norm": l2norm,
    "normalize3": normalize3,
    "gather": gather,
    "reshape": reshape,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named op; the op table is the public vocabulary of the engine."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(
    loss: Tensor,
    params: dict[str, Tensor] | Iterable[Tensor] | None = None,
    release_graph: bool = True,
) -> dict:
    """Populate gradients of a scalar ``loss``.

    Returns a map from parameter name (or the tensor itself when ``params``
    is a plain iterable) to a gradient array. Parameters the loss does not
    reach get zeros. With ``release_graph`` the recorded graph is freed so
    intermediate arrays can be collected.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        order = _topo_order(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(order):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64, copy=True)
            if release_graph:
                node._parents = ()
                node._backward = None
    if params is None:
        return {}
    items = params.items() if isinstance(params, dict) else ((p, p) for p in params)
    result = {}
    for key, p in items:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        p.grad = g
        result[key] = g
    return result


# ---------------------------------------------------------------- optimisers


class SgdState:
    """Plain SGD with step-wise exponential learning-rate decay."""

    def __init__(self, learning_rate: float, decay_factor: float = 1.0,
                 decay_interval: int = 1, step: int = 0):
        if not learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if not 0 < decay_factor <= 1:
            raise ContractError("decay_factor must lie in (0, 1]")
        if decay_interval < 1:
            raise ContractError("decay_interval must be a positive integer")
        self.learning_rate = float(learning_rate)
        self.decay_factor = float(decay_factor)
        self.decay_interval = int(decay_interval)
        self.step = int(step)

    @property
    def effective_rate(self) -> float:
        return self.learning_rate * self.decay_factor ** (self.step // self.decay_interval)

    def state_dict(self) -> dict:
        return {"kind": "sgd", "step": self.step}

    def load_state_dict(self, state: dict) -> None:
        self.step = int(state["step"])


def _check_grads(params: dict, grads: dict) -> None:
    if set(params) != set(grads):
        raise ContractError("params and grads must have the same keys")
    for name, g in grads.items():
        if np.shape(g) != params[name].shape:
            raise ContractError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: SgdState) -> dict:
    _check_grads(params, grads)
    rate = state.effective_rate
    for name, p in params.items():
        p.data = p.data - rate * grads[name]
    state.step += 1
    return params


class AdamState(SgdState):
    """Adam moments on top of the same decayed learning-rate schedule."""

    def __init__(self, learning_rate: float, decay_factor: float = 1.0,
                 decay_interval: int = 1, step: int = 0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate, decay_factor, decay_interval, step)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def state_dict(self) -> dict:
        return {"kind": "adam", "step": self.step}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> dict:
    _check_grads(params, grads)
    rate = state.effective_rate
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step += 1
    return params


def finite_difference(fn: Callable[[], float], tensor: Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central difference of ``fn`` w.r.t. one entry of ``tensor`` (restores it after)."""
    old = tensor.data[index]
    tensor.data = tensor.data.copy()
    tensor.data[index] = old + h
    fp = fn()
    tensor.data[index] = old - h
    fm = fn()
    tensor.data[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)

