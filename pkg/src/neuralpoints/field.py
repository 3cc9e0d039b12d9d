"""The shared neural field, per-center charts, their normals, and soft projection.

A chart maps ``(u, v)`` in ``[-1, 1]^2`` to ``x_i + MLP(pe(u, v) ++ f_i)``.
Surface normals need the partial derivatives of that map; they are carried
forward through the MLP as tangent tensors built from the same graph ops,
so a loss on normals differentiates back to the weights.
"""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import ModelConfig
from ._kernels import blend_backward, blend_forward
from .geometry import KnnIndex

__all__ = [
    "PosEncodingConfig",
    "FieldParams",
    "FieldSample",
    "PatchBatch",
    "pos_encode",
    "pos_encode_with_derivatives",
    "init_field",
    "evaluate_charts",
    "phi",
    "phi_partials",
    "phi_normal",
    "grid_uv",
    "jittered_uv",
    "sample_patch",
    "sample_patches",
    "exp_weights",
    "blend_points",
    "blend_normals",
    "soft_blend",
    "soft_blend_graph",
    "fused_blend",
    "proj",
    "phi_psi",
    "DEGENERATE_NORMAL",
]

DEGENERATE_NORMAL = np.array([0.0, 0.0, 1.0])
_NORM_EPS = 1e-12
_UNDERFLOW = 745.0  # exp(-x) == 0.0 in float64 beyond this


@dataclass(frozen=True)
class PosEncodingConfig:
    num_frequencies: int = 6
    include_input: bool = True

    @property
    def dim(self) -> int:
        return 4 * self.num_frequencies + (2 if self.include_input else 0)


def pos_encode_with_derivatives(uv, cfg: PosEncodingConfig):
    """Encoding of (R, 2) coordinates plus its exact d/du and d/dv, each (R, D)."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    freqs = (2.0 ** np.arange(cfg.num_frequencies)) * np.pi
    blocks, d_u, d_v = [], [], []
    zeros = np.zeros((len(uv), 2 * cfg.num_frequencies))
    if cfg.include_input:
        blocks.append(uv)
        d_u.append(np.tile([1.0, 0.0], (len(uv), 1)))
        d_v.append(np.tile([0.0, 1.0], (len(uv), 1)))
    for axis in (0, 1):
        arg = uv[:, axis:axis + 1] * freqs
        s, c = np.sin(arg), np.cos(arg)
        block = np.stack([s, c], axis=-1).reshape(len(uv), -1)
        deriv = np.stack([freqs * c, -freqs * s], axis=-1).reshape(len(uv), -1)
        blocks.append(block)
        d_u.append(deriv if axis == 0 else zeros)
        d_v.append(deriv if axis == 1 else zeros)
    return np.hstack(blocks), np.hstack(d_u), np.hstack(d_v)


def pos_encode(uv, cfg: PosEncodingConfig) -> np.ndarray:
    """[sin(2^l pi u), cos(2^l pi u)]_l then the same for v; raw (u, v) first if enabled."""
    single = np.ndim(uv) == 1
    out = pos_encode_with_derivatives(uv, cfg)[0]
    return out[0] if single else out


@dataclass
class FieldParams:
    """Three linear layers; the first is split into encoding and feature blocks."""

    w0_pe: Tensor
    w0_feat: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    pe: PosEncodingConfig

    def named(self) -> dict[str, Tensor]:
        return {
            "field.0.weight_pe": self.w0_pe, "field.0.weight_feat": self.w0_feat,
            "field.0.bias": self.b0, "field.1.weight": self.w1, "field.1.bias": self.b1,
            "field.2.weight": self.w2, "field.2.bias": self.b2,
        }


def init_field(cfg: ModelConfig, rng: np.random.Generator) -> FieldParams:
    pe = PosEncodingConfig(cfg.pe_frequencies, cfg.pe_include_input)
    h0, h1 = cfg.field_hidden
    fan0 = pe.dim + cfg.feature_dim

    def t(a):
        return Tensor(a, requires_grad=True)

    return FieldParams(
        w0_pe=t(rng.standard_normal((pe.dim, h0)) * np.sqrt(2.0 / fan0)),
        w0_feat=t(rng.standard_normal((cfg.feature_dim, h0)) * np.sqrt(2.0 / fan0)),
        b0=t(np.zeros(h0)),
        w1=t(rng.standard_normal((h0, h1)) * np.sqrt(2.0 / h0)),
        b1=t(np.zeros(h1)),
        w2=t(rng.standard_normal((h1, 3)) * np.sqrt(1.0 / h1) * cfg.last_layer_scale),
        b2=t(np.zeros(3)),
        pe=pe,
    )


@dataclass
class PatchBatch:
    """Chart evaluations for I centers at the same R parameter points."""

    points: Tensor  # (I, R, 3)
    du: Tensor  # (I, R, 3)
    dv: Tensor  # (I, R, 3)


def _chart_mlp(enc, jac, features: Tensor, centers, params: FieldParams) -> Tensor:
    """Fused chart MLP with forward-mode tangents, one graph node.

    ``enc`` (R, D) and ``jac`` (2, R, D) are the positional encoding and its
    u/v derivatives. Returns (3, I, R, 3): chart points, d/du and d/dv.
    The relu masks are constants of the tangent pass, so the returned
    partials stay differentiable with respect to every weight. Only 2-D
    matrix products are formed, in both directions.
    """
    w0p, w0f, b0 = params.w0_pe.data, params.w0_feat.data, params.b0.data
    w1, b1, w2, b2 = params.w1.data, params.b1.data, params.w2.data, params.b2.data
    f = features.data
    n_i, n_r = f.shape[0], enc.shape[0]
    h0w, h1w = w0p.shape[1], w1.shape[1]
    a0 = (enc @ w0p)[None, :, :] + (f @ w0f)[:, None, :] + b0  # (I, R, H0)
    m0 = a0 > 0
    h0 = (a0 * m0).reshape(-1, h0w)
    t0 = (jac.reshape(-1, jac.shape[-1]) @ w0p).reshape(2, 1, n_r, h0w)
    tm0 = (t0 * m0[None]).reshape(-1, h0w)  # (2 I R, H0)
    a1 = h0 @ w1 + b1
    m1 = a1 > 0
    h1 = a1 * m1
    m1t = np.concatenate([m1, m1])
    tm1 = (tm0 @ w1) * m1t  # (2 I R, H1)
    out = np.empty((3, n_i, n_r, 3))
    out[0] = (h1 @ w2 + b2).reshape(n_i, n_r, 3) + np.asarray(centers)[:, None, :]
    out[1:] = (tm1 @ w2).reshape(2, n_i, n_r, 3)

    def bw(g):
        gp = g[0].reshape(-1, 3)
        gt = g[1:].reshape(-1, 3)
        g_w2 = h1.T @ gp + tm1.T @ gt
        g_b2 = gp.sum(axis=0)
        ga1 = (gp @ w2.T) * m1
        gs1 = (gt @ w2.T) * m1t
        g_w1 = h0.T @ ga1 + tm0.T @ gs1
        g_b1 = ga1.sum(axis=0)
        ga0 = (ga1 @ w1.T).reshape(n_i, n_r, h0w) * m0
        gt0 = ((gs1 @ w1.T).reshape(2, n_i, n_r, h0w) * m0[None]).sum(axis=1)
        g_w0p = enc.T @ ga0.sum(axis=0) + jac.reshape(-1, jac.shape[-1]).T @ gt0.reshape(-1, h0w)
        g_fw = ga0.sum(axis=1)  # (I, H0)
        g_w0f = f.T @ g_fw
        g_f = g_fw @ w0f.T
        g_b0 = g_fw.sum(axis=0)
        return g_f, g_w0p, g_w0f, g_b0, g_w1, g_b1, g_w2, g_b2

    parents = (features, params.w0_pe, params.w0_feat, params.b0, params.w1, params.b1,
               params.w2, params.b2)
    return ad._make(out, parents, bw, "chart_mlp")


def evaluate_charts(uv, features, centers, params: FieldParams) -> PatchBatch:
    """Evaluate every chart at every ``uv`` together with both partial derivatives."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    features = ad.as_tensor(features)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if features.ndim != 2 or features.shape[0] != centers.shape[0]:
        raise ad.DimensionError(
            f"evaluate_charts: features {features.shape} vs centers {centers.shape}")
    if features.shape[1] != params.w0_feat.shape[0]:
        raise ad.DimensionError(
            f"evaluate_charts: feature dim {features.shape[1]} != {params.w0_feat.shape[0]}")
    enc, enc_du, enc_dv = pos_encode_with_derivatives(uv, params.pe)
    out = _chart_mlp(enc, np.stack([enc_du, enc_dv]), features, centers, params)
    return PatchBatch(points=ad.take(out, 0), du=ad.take(out, 1), dv=ad.take(out, 2))


def _single(uv, f_i, x_i, params):
    f = ad.reshape(ad.as_tensor(f_i), (1, -1))
    return evaluate_charts(np.reshape(uv, (1, 2)), f, np.reshape(x_i, (1, 3)), params)


def phi(uv, f_i, x_i, params: FieldParams) -> Tensor:
    """One chart point x_i + MLP(pe(uv) ++ f_i), shape (3,)."""
    return ad.reshape(_single(uv, f_i, x_i, params).points, (3,))


def phi_partials(uv, f_i, x_i, params: FieldParams) -> tuple[Tensor, Tensor]:
    batch = _single(uv, f_i, x_i, params)
    return ad.reshape(batch.du, (3,)), ad.reshape(batch.dv, (3,))


def _raw_normals(du: Tensor, dv: Tensor) -> tuple[Tensor, np.ndarray]:
    cross = ad.cross3(du, dv)
    norm = np.linalg.norm(cross.data, axis=-1)
    degenerate = norm < _NORM_EPS
    unit = ad.normalize3(cross)
    if degenerate.any():
        keep = (~degenerate)[..., None].astype(np.float64)
        unit = unit * keep + DEGENERATE_NORMAL * (1.0 - keep)
    return unit, degenerate


def phi_normal(uv, f_i, x_i, params: FieldParams) -> tuple[Tensor, bool]:
    """Unit normal d/du x d/dv of one chart; falls back to +z when degenerate."""
    batch = _single(uv, f_i, x_i, params)
    unit, degenerate = _raw_normals(batch.du, batch.dv)
    return ad.reshape(unit, (3,)), bool(degenerate.reshape(-1)[0])


def grid_uv(r: int) -> np.ndarray:
    """R cell-center points of the ceil(sqrt R)^2 grid on [-1, 1]^2, row-major."""
    if r < 1:
        raise ContractError("R must be >= 1")
    n = math.isqrt(r - 1) + 1  # ceil(sqrt(r))
    centers = 2.0 * (np.arange(n) + 0.5) / n - 1.0
    u, v = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([u.reshape(-1), v.reshape(-1)], 1)[:r]


@dataclass
class FieldSample:
    uv: np.ndarray  # (R, 2)
    points: Tensor  # (R, 3)
    normals: Tensor  # (R, 3)
    center_index: int
    degenerate: np.ndarray


def jittered_uv(r: int, rng: np.random.Generator) -> np.ndarray:
    """The R grid points, each moved uniformly at random within its own cell."""
    uv = grid_uv(r)
    n = math.isqrt(r - 1) + 1
    return uv + rng.uniform(-1.0 / n, 1.0 / n, uv.shape)


def sample_patches(r: int, features, centers, params: FieldParams, uv=None):
    """Sample all charts on the R-point grid, or at the given ``uv`` (R, 2).

    Returns ``(uv, points (I, R, 3), normals (I, R, 3), degenerate (I, R))``;
    each patch's normals are flipped to agree with that patch's mean normal.
    """
    uv = grid_uv(r) if uv is None else np.asarray(uv, dtype=np.float64).reshape(r, 2)
    batch = evaluate_charts(uv, features, centers, params)
    unit, degenerate = _raw_normals(batch.du, batch.dv)
    mean_n = unit.data.mean(axis=1, keepdims=True)
    sign = np.where(np.sum(unit.data * mean_n, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    return uv, batch.points, unit * sign, degenerate


def sample_patch(center_index: int, r: int, f_i, x_i, params: FieldParams) -> FieldSample:
    f = ad.reshape(ad.as_tensor(f_i), (1, -1))
    uv, pts, nrm, deg = sample_patches(r, f, np.reshape(x_i, (1, 3)), params)
    return FieldSample(uv=uv, points=ad.reshape(pts, (r, 3)), normals=ad.reshape(nrm, (r, 3)),
                       center_index=center_index, degenerate=deg.reshape(r))


# ---------------------------------------------------------------- projection


def exp_weights(query, anchors, alpha: float):
    """Normalised weights exp(-alpha |query - anchor|^2) over the k axis.

    ``anchors`` has shape (..., k, 3). Weights are evaluated relative to the
    nearest anchor: the normalised weights, and their gradient, do not
    change under that shift, and it keeps the nearest weight at 1. Rows
    whose unshifted weights would all underflow take the nearest anchor
    exactly and are flagged.

    Returns ``(weights (..., k), nearest (...), flags (...))``.
    """
    query = ad.as_tensor(query)
    anchors = ad.as_tensor(anchors)
    diff = anchors - ad.reshape(query, query.shape[:-1] + (1, 3))
    d2 = ad.sum_reduce(ad.square(diff), axis=-1)
    d2min = d2.data.min(axis=-1, keepdims=True)
    nearest = np.argmin(d2.data, axis=-1)
    flags = alpha * d2min[..., 0] > _UNDERFLOW
    w = ad.exp((d2 - d2min) * (-alpha))
    if flags.any():
        onehot = np.zeros(d2.shape)
        np.put_along_axis(onehot, nearest[..., None], 1.0, axis=-1)
        keep = (~flags)[..., None].astype(np.float64)
        w = w * keep + onehot * (1.0 - keep)
    return w / ad.sum_reduce(w, axis=-1, keepdims=True), nearest, flags


def blend_points(weights, values) -> Tensor:
    weights = ad.as_tensor(weights)
    return ad.sum_reduce(ad.reshape(weights, weights.shape + (1,)) * values, axis=-2)


def blend_normals(weights, normals, reference: np.ndarray):
    """Orientation-aligned weighted normal average, renormalised.

    Each normal is flipped to agree with the one at index ``reference`` of
    its row. A blend shorter than 1e-12 is replaced by that reference
    normal and flagged. Returns ``(unit normals, degenerate flags)``.
    """
    normals = ad.as_tensor(normals)
    ref = np.take_along_axis(normals.data, reference[..., None, None], axis=-2)
    sign = np.where(np.sum(normals.data * ref, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    blended = blend_points(weights, normals * sign)
    degenerate = np.linalg.norm(blended.data, axis=-1) < _NORM_EPS
    unit = ad.normalize3(blended)
    if degenerate.any():
        keep = (~degenerate)[..., None].astype(np.float64)
        unit = unit * keep + ref[..., 0, :] * (1.0 - keep)
    return unit, degenerate


def fused_blend(query, anchors, values, normals=None, alpha: float = 1000.0):
    """One-node weighted blend: the composition of :func:`exp_weights`,
    :func:`blend_points` and :func:`blend_normals` with a compiled forward
    and an analytic backward.

    ``query`` is (..., 3); ``anchors``, ``values`` and ``normals`` are
    (..., k, 3). Returns ``(points, normals_or_None, weights, flags)``
    where the weights are plain arrays.
    """
    query, anchors, values = ad.as_tensor(query), ad.as_tensor(anchors), ad.as_tensor(values)
    lead = anchors.shape[:-2]
    k = anchors.shape[-2]
    try:
        qb = np.broadcast_to(query.data, lead + (3,))
    except ValueError:
        raise ad.DimensionError(f"blend: query {query.shape} vs anchors {anchors.shape}") from None
    q2 = np.ascontiguousarray(qb.reshape(-1, 3))
    a3 = np.ascontiguousarray(anchors.data.reshape(-1, k, 3))
    v3 = np.ascontiguousarray(values.data.reshape(-1, k, 3))
    has_n = normals is not None
    if has_n:
        normals = ad.as_tensor(normals)
        n3 = np.ascontiguousarray(normals.data.reshape(-1, k, 3))
    else:
        n3 = np.zeros((0, k, 3))
    p, nout, w, sgn, blen, _, fl = blend_forward(q2, a3, v3, n3, float(alpha), _UNDERFLOW,
                                                 _NORM_EPS)
    out = np.concatenate([p, nout], axis=1).reshape(lead + (6,))

    def bw(g):
        g2 = g.reshape(-1, 6)
        gq, ga, gv, gn = blend_backward(np.ascontiguousarray(g2[:, :3]),
                                        np.ascontiguousarray(g2[:, 3:]), q2, a3, v3, n3,
                                        w, sgn, nout, blen, fl, float(alpha))
        grads = [ad._unbroadcast(gq.reshape(lead + (3,)), query.shape), ga.reshape(anchors.shape),
                 gv.reshape(values.shape)]
        if has_n:
            grads.append(gn.reshape(normals.shape))
        return tuple(grads)

    parents = (query, anchors, values) + ((normals,) if has_n else ())
    both = ad._make(out, parents, bw, "blend")
    point = ad.take(both, (Ellipsis, slice(0, 3)))
    normal = ad.take(both, (Ellipsis, slice(3, 6))) if has_n else None
    return point, normal, w.reshape(lead + (k,)), (fl & 1).astype(bool).reshape(lead) | \
        (fl & 2).astype(bool).reshape(lead)


def soft_blend_graph(query, cand, cand_normals, alpha: float):
    """Reference composition of elementary ops; same values as :func:`soft_blend`."""
    wn, nearest, flags = exp_weights(query, cand, alpha)
    point = blend_points(wn, cand)
    normal = None
    if cand_normals is not None:
        normal, degenerate = blend_normals(wn, cand_normals, nearest)
        flags = flags | degenerate
    return point, normal, wn, flags


def soft_blend(query, cand, cand_normals, alpha: float):
    """Projection of ``query`` (..., 3) onto its candidate set (..., k, 3).

    Returns ``(point, normal_or_None, weights, flags)``.
    """
    return fused_blend(query, cand, cand, cand_normals, alpha)


def proj(p, q_points, q_normals=None, k: int = 4, alpha: float = 1000.0,
         neighbors: np.ndarray | None = None):
    """Soft projection of points p (S, 3) onto the point set Q (T, 3).

    Returns ``(points, normals_or_None, flags)``.
    """
    p = ad.as_tensor(p)
    q_points = ad.as_tensor(q_points)
    single = p.ndim == 1
    if single:
        p = ad.reshape(p, (1, 3))
    if q_points.shape[0] == 0:
        raise ContractError("proj needs a nonempty target set")
    if neighbors is None:
        neighbors = KnnIndex(q_points.data).query(p.data, k).reshape(p.shape[0], -1)
    cand = ad.gather(q_points, neighbors)
    cand_n = None if q_normals is None else ad.gather(ad.as_tensor(q_normals), neighbors)
    point, normal, _, flags = soft_blend(p, cand, cand_n, alpha)
    if single:
        point = ad.reshape(point, (3,))
        normal = None if normal is None else ad.reshape(normal, (3,))
    return point, normal, flags


def phi_psi(p, sample: FieldSample, k: int = 4, alpha: float = 1000.0):
    """Chart composed with its inverse: projection onto the sampled patch."""
    return proj(p, sample.points, sample.normals, k=min(k, len(sample.points)), alpha=alpha)
