"""Structural tensor operations: linear maps, convolutions, pooling, reductions.

All operations accept the per-sample ranks used throughout the package
(matrices, C×H×W maps, C×T×H×W stacks) and, where noted, extra leading
axes that are treated as batch dimensions. Convolution uses cross-
correlation semantics with zero padding; reductions use numpy's fixed
deterministic accumulation so replays are bit-identical.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp as _logsumexp, softmax as _softmax

from .errors import NonFiniteError, ShapeError
from .tensor import Tensor, apply_op

# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an M×K by a K×N tensor."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return apply_op("matmul", (a, b), out, bwd)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias for x of shape (B, F), weight (F, K), bias (K,)."""
    from .tensor import add

    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# convolution


def _leading(shape: tuple, keep: int) -> tuple:
    return shape[: len(shape) - keep]


def _im2col2d(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )
    return view.reshape(b, c * kh * kw, ho * wo)


def _col2im2d(gcols, b, c, kh, kw, ho, wo, hp, wp):
    g6 = gcols.reshape(b, c, kh, kw, ho, wo)
    gxp = np.zeros((b, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += g6[:, :, i, j]
    return gxp


def conv2d(x: Tensor, kernel: Tensor, same_padding: bool = True) -> Tensor:
    """2D cross-correlation of (..., C, H, W) with a (C_out, C, kH, kW) kernel.

    With ``same_padding`` the input is zero-padded so spatial extents are
    preserved (odd kernels only); otherwise the correlation is valid-mode.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv2d input needs at least rank 3, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be rank 4, got {kernel.shape}")
    c, h, w = x.shape[-3:]
    co, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {ck}")
    if same_padding and (kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"same-padding conv2d needs odd kernel extents, got {kh}x{kw}")
    ph, pw = (kh // 2, kw // 2) if same_padding else (0, 0)
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")

    lead = _leading(x.shape, 3)
    b = int(np.prod(lead)) if lead else 1
    xb = x.data.reshape(b, c, h, w)
    xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col2d(xp, kh, kw, ho, wo)
    kflat = kernel.data.reshape(co, -1)
    out = np.matmul(kflat, cols).reshape(*lead, co, ho, wo)

    def bwd(g):
        gb = g.reshape(b, co, ho * wo)
        gk = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kflat.T, gb)
        gxp = _col2im2d(gcols, b, c, kh, kw, ho, wo, h + 2 * ph, w + 2 * pw)
        gx = gxp[:, :, ph : ph + h, pw : pw + w].reshape(x.shape)
        return gx, gk

    return apply_op("conv2d", (x, kernel), out, bwd)


def _im2col3d(xp, kt, kh, kw, to, ho, wo):
    b, c = xp.shape[:2]
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        (b, c, kt, kh, kw, to, ho, wo),
        (s[0], s[1], s[2], s[3], s[4], s[2], s[3], s[4]),
        writeable=False,
    )
    return view.reshape(b, c * kt * kh * kw, to * ho * wo)


def conv3d(x: Tensor, kernel: Tensor, same_padding: bool = True) -> Tensor:
    """3D cross-correlation of (..., C, T, H, W) with (C_out, C, kT, kH, kW)."""
    if x.ndim < 4:
        raise ShapeError(f"conv3d input needs at least rank 4, got {x.shape}")
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be rank 5, got {kernel.shape}")
    c, t, h, w = x.shape[-4:]
    co, ck, kt, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, kernel expects {ck}")
    if same_padding and (kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0):
        raise ShapeError(f"same-padding conv3d needs odd kernel extents, got {kt}x{kh}x{kw}")
    pt, ph, pw = (kt // 2, kh // 2, kw // 2) if same_padding else (0, 0, 0)
    to, ho, wo = t + 2 * pt - kt + 1, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if to < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"conv3d kernel {kt}x{kh}x{kw} larger than padded input {t}x{h}x{w}")

    lead = _leading(x.shape, 4)
    b = int(np.prod(lead)) if lead else 1
    xb = x.data.reshape(b, c, t, h, w)
    xp = np.pad(xb, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = _im2col3d(xp, kt, kh, kw, to, ho, wo)
    kflat = kernel.data.reshape(co, -1)
    out = np.matmul(kflat, cols).reshape(*lead, co, to, ho, wo)

    def bwd(g):
        gb = g.reshape(b, co, to * ho * wo)
        gk = np.matmul(gb, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(kflat.T, gb).reshape(b, c, kt, kh, kw, to, ho, wo)
        gxp = np.zeros((b, c, t + 2 * pt, h + 2 * ph, w + 2 * pw))
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    gxp[:, :, i : i + to, j : j + ho, k : k + wo] += gcols[:, :, i, j, k]
        gx = gxp[:, :, pt : pt + t, ph : ph + h, pw : pw + w].reshape(x.shape)
        return gx, gk

    return apply_op("conv3d", (x, kernel), out, bwd)


# ---------------------------------------------------------------------------
# spatial reductions


def softmax_spatial(x: Tensor) -> Tensor:
    """Softmax over the trailing H×W grid of a (..., 1, H, W) map.

    Stabilized by max subtraction; outputs are positive and sum to one
    over the grid.
    """
    if x.ndim < 3 or x.shape[-3] != 1:
        raise ShapeError(f"softmax_spatial expects (..., 1, H, W), got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax_spatial: non-finite input")
    out = _softmax(x.data, axis=(-2, -1))

    def bwd(g):
        inner = (g * out).sum(axis=(-2, -1), keepdims=True)
        return (out * (g - inner),)

    return apply_op("softmax_spatial", (x,), out, bwd)


def softmax_spatial_scaled(x: Tensor) -> Tensor:
    """Spatial softmax of a (..., 1, H, W) map scaled by H·W.

    Computed as exp(x - max) · (H·W) / Σexp, so a constant map yields
    exactly 1.0 everywhere: the numerator and denominator are then the
    identical float H·W and the division is exact.
    """
    if x.ndim < 3 or x.shape[-3] != 1:
        raise ShapeError(f"softmax_spatial_scaled expects (..., 1, H, W), got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NonFiniteError("softmax_spatial_scaled: non-finite input")
    h, w = x.shape[-2:]
    hw = float(h * w)
    e = np.exp(x.data - x.data.max(axis=(-2, -1), keepdims=True))
    out = e * hw / e.sum(axis=(-2, -1), keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=(-2, -1), keepdims=True)
        return (out * (g - inner / hw),)

    return apply_op("softmax_spatial_scaled", (x,), out, bwd)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Mean over the trailing H×W plane: (..., C, H, W) -> (..., C)."""
    if x.ndim < 3:
        raise ShapeError(f"spatial_avg_pool needs at least rank 3, got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    inv = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g[..., None, None] * inv, x.shape).copy(),)

    return apply_op("spatial_avg_pool", (x,), out, bwd)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2×2 mean downsampling of (..., C, H, W); H and W must be even."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial extents, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bwd(g):
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (up * 0.25,)

    return apply_op("avg_pool2x2", (x,), out, bwd)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return apply_op("reshape", (x,), out, bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return apply_op("transpose", (x,), out, bwd)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(
            np.moveaxis(moved[offsets[i] : offsets[i + 1]], 0, axis) for i in range(len(sizes))
        )

    return apply_op("concat", tuple(parts), out, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries from ``start`` along ``axis``."""
    n = x.shape[axis]
    if start < 0 or length < 1 or start + length > n:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    out = x.data[tuple(index)]

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[tuple(index)] = g
        return (gx,)

    return apply_op("narrow", (x,), out, bwd)


def index_select(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis``, dropping that axis."""
    n = x.shape[axis]
    if not 0 <= index < n:
        raise ShapeError(f"index {index} out of range for extent {n}")
    sl = [slice(None)] * x.ndim
    sl[axis] = index

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[tuple(sl)] = g
        return (gx,)

    return apply_op("index_select", (x,), x.data[tuple(sl)], bwd)


# ---------------------------------------------------------------------------
# reductions and classification helpers


def sum_along(x: Tensor, axis) -> Tensor:
    axis = tuple(np.atleast_1d(axis).tolist()) if not isinstance(axis, tuple) else axis
    out = x.data.sum(axis=axis)

    def bwd(g):
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).copy(),)

    return apply_op("sum", (x,), out, bwd)


def mean_along(x: Tensor, axis) -> Tensor:
    axis = tuple(np.atleast_1d(axis).tolist()) if not isinstance(axis, tuple) else axis
    count = int(np.prod([x.shape[a] for a in axis]))
    out = x.data.mean(axis=axis)
    inv = 1.0 / count

    def bwd(g):
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp * inv, x.shape).copy(),)

    return apply_op("mean", (x,), out, bwd)


def mean_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean())
    inv = 1.0 / x.size

    def bwd(g):
        return (np.full(x.shape, float(g) * inv),)

    return apply_op("mean_all", (x,), out, bwd)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log-sum-exp over the last axis."""
    out = _logsumexp(x.data, axis=-1)
    soft = _softmax(x.data, axis=-1)

    def bwd(g):
        return (g[..., None] * soft,)

    return apply_op("logsumexp", (x,), out, bwd)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick x[i, index[i]] from a (B, K) tensor -> (B,)."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a matrix, got {x.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"take_rows index shape {idx.shape} mismatches {x.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= x.shape[1]:
        raise ShapeError("take_rows index out of class range")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def bwd(g):
        gx = np.zeros(x.shape)
        gx[rows, idx] = g
        return (gx,)

    return apply_op("take_rows", (x,), out, bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability p, rescale by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    from .tensor import hadamard

    return hadamard(x, Tensor(mask))
