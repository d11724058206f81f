"""Differentiable array ops.

Every public function takes and returns :class:`Tensor` and registers a
backward closure on the active tape. Convolutions use zero padding and the
cross-correlation convention (no kernel flip); pooling uses valid windows
only. Reductions rely on numpy's fixed traversal order, so repeated runs on
identical inputs produce bitwise-identical buffers.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record

__all__ = [
    "add", "batchnorm", "concat", "convnd_grouped", "gather_axis", "linear",
    "max_axis", "mean_axis", "pool", "relu", "reshape", "scale",
    "softmax_xent", "transpose",
]


def _as_tuple(v, rank: int, name: str) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * rank
    t = tuple(int(x) for x in v)
    if len(t) != rank:
        raise ShapeError(f"{name} must have {rank} entries, got {len(t)}")
    return t


def _check_same_dtype(*tensors: Tensor) -> np.dtype:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(
                f"mixed dtypes: {tensors[0].dtype} vs {t.dtype}")
    return dt


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    _check_same_dtype(x, y)
    out = Tensor(x.data + y.data)

    def bwd(g):
        return g, g

    return record("add", out, (x, y), bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    _check_same_dtype(x, y)
    out = Tensor(x.data * y.data)
    xd, yd = x.data, y.data

    def bwd(g):
        return g * yd, g * xd

    return record("mul", out, (x, y), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * x.data.dtype.type(c))

    def bwd(g):
        return (g * c,)

    return record("scale", out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return record("relu", out, (x,), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x[B,D] @ w[D,O] + b[O]."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(
            f"linear expects 2-D x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"linear: input dim {x.shape[1]} does not match weight dim {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(
            f"linear: bias shape {b.shape} does not match output dim {w.shape[1]}")
    _check_same_dtype(x, w, *([b] if b is not None else []))
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    xd, wd = x.data, w.data

    def bwd(g):
        gx = g @ wd.T
        gw = xd.T @ g
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return record("linear", out, (x, w, b) if b is not None else (x, w), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(np.ascontiguousarray(x.data.reshape(shape)))
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return record("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record("transpose", out, (x,), bwd)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of zero tensors")
    _check_same_dtype(*xs)
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return record("concat", out, tuple(xs), bwd)


def gather_axis(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Index-select along one axis (used by nearest-index resampling)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_axis expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(
            f"gather_axis: index out of range for axis {axis} of size {x.shape[axis]}")
    out = Tensor(np.take(x.data, idx, axis=axis))
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return record("gather", out, (x,), bwd)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    # f64 accumulation is exact for f32 inputs, which makes the result
    # independent of element order along the reduced axis (bitwise)
    out = Tensor(x.data.mean(axis=axis, dtype=np.float64).astype(x.data.dtype))
    n = x.shape[axis]

    def bwd(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return record("mean_axis", out, (x,), bwd)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; gradient flows to the first maximizer only."""
    am = np.argmax(x.data, axis=axis)
    out = Tensor(np.take_along_axis(x.data, np.expand_dims(am, axis), axis).squeeze(axis))
    in_shape = x.shape

    def bwd(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        np.put_along_axis(gx, np.expand_dims(am, axis),
                          np.expand_dims(g, axis), axis)
        return (gx,)

    return record("max_axis", out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def convnd_grouped(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *,
                   groups: int = 1, padding=0, spatial_rank: Optional[int] = None,
                   stride=1) -> Tensor:
    """Grouped n-D cross-correlation with zero padding.

    x: [B, C_in, *S]; w: [C_out, C_in/G, *K]; returns [B, C_out, *S'] with
    S'_d = (S_d + 2*pad_d - K_d) // stride_d + 1. Accumulation runs over
    kernel positions innermost, then input channels, via one batched matmul
    per call.
    """
    rank = w.ndim - 2 if spatial_rank is None else int(spatial_rank)
    if rank not in (1, 2, 3):
        raise ShapeError(f"spatial_rank must be 1, 2 or 3, got {rank}")
    if x.ndim != rank + 2:
        raise ShapeError(
            f"input rank {x.ndim} does not match spatial_rank {rank} (+2)")
    if w.ndim != rank + 2:
        raise ShapeError(
            f"weight rank {w.ndim} does not match spatial_rank {rank} (+2)")
    B, c_in = x.shape[0], x.shape[1]
    c_out, c_g = w.shape[0], w.shape[1]
    K = w.shape[2:]
    G = int(groups)
    if G < 1 or c_in % G != 0:
        raise ShapeError(f"groups={G} does not divide input channels C_in={c_in}")
    if c_out % G != 0:
        raise ShapeError(f"groups={G} does not divide output channels C_out={c_out}")
    if c_g != c_in // G:
        raise ShapeError(
            f"weight channel dim {c_g} != C_in/G = {c_in // G}")
    pad = _as_tuple(padding, rank, "padding")
    strd = _as_tuple(stride, rank, "stride")
    if any(s < 1 for s in strd):
        raise ShapeError(f"stride entries must be >= 1, got {strd}")
    S = x.shape[2:]
    for d in range(rank):
        if K[d] > S[d] + 2 * pad[d]:
            raise ShapeError(
                f"kernel dim {d} ({K[d]}) exceeds padded input dim "
                f"({S[d]} + 2*{pad[d]})")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"bias shape {b.shape} != ({c_out},)")
    _check_same_dtype(x, w, *([b] if b is not None else []))

    if any(pad):
        xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pad])
    else:
        xp = x.data
    win = sliding_window_view(xp, K, axis=tuple(range(2, 2 + rank)))
    win = win[(slice(None), slice(None)) +
              tuple(slice(None, None, s) for s in strd)]
    s_out = win.shape[2:2 + rank]
    kp = int(np.prod(K))
    sp = int(np.prod(s_out))
    cog = c_out // G

    # columns laid out [G, Cg*Kp, B*Sp] so forward / dW / dX are each one
    # large gemm; the contraction axis keeps kernel positions innermost
    win = win.reshape(B, G, c_g, *s_out, *K)
    order = (1, 2) + tuple(3 + rank + i for i in range(rank)) \
        + (0,) + tuple(3 + i for i in range(rank))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(
        G, c_g * kp, B * sp)
    wmat = w.data.reshape(G, cog, c_g * kp)
    y = np.matmul(wmat, cols).reshape(G, cog, B, sp)
    y = np.ascontiguousarray(y.transpose(2, 0, 1, 3)).reshape(
        B, c_out, *s_out)
    if b is not None:
        y = y + b.data.reshape((1, c_out) + (1,) * rank)
    out = Tensor(y)

    xp_shape = xp.shape
    in_shape = x.shape

    def bwd(g):
        gm = np.ascontiguousarray(
            g.reshape(B, G, cog, sp).transpose(1, 2, 0, 3)).reshape(
            G, cog, B * sp)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(w.data.shape)
        gcols = np.matmul(wmat.transpose(0, 2, 1), gm)
        gc = np.ascontiguousarray(
            gcols.reshape(G, c_g, *K, B, sp).transpose(
                (2 + rank,) + (0, 1) + tuple(2 + i for i in range(rank))
                + (3 + rank,))).reshape((B, c_in) + K + s_out)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for kidx in np.ndindex(*K):
            sl = tuple(
                slice(kidx[d], kidx[d] + strd[d] * (s_out[d] - 1) + 1, strd[d])
                for d in range(rank))
            gxp[(slice(None), slice(None)) + sl] += gc[
                (slice(None), slice(None)) + kidx]
        crop = tuple(slice(pad[d], pad[d] + in_shape[2 + d]) for d in range(rank))
        gx = np.ascontiguousarray(gxp[(slice(None), slice(None)) + crop])
        if b is not None:
            gb = g.reshape(B, c_out, sp).sum(axis=(0, 2))
            return gx, gw, gb
        return gx, gw

    inputs = (x, w, b) if b is not None else (x, w)
    return record(f"conv{rank}d", out, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool(x: Tensor, kind: str, window=None, stride=None) -> Tensor:
    """max / avg / global_avg pooling over the spatial dims of [B, C, *S]."""
    if kind not in ("max", "avg", "global_avg"):
        raise ShapeError(f"unknown pool kind {kind!r}")
    rank = x.ndim - 2
    if rank < 1:
        raise ShapeError(f"pool needs at least one spatial dim, got {x.shape}")
    if kind == "global_avg":
        axes = tuple(range(2, x.ndim))
        n = int(np.prod(x.shape[2:]))
        out = Tensor(x.data.mean(axis=axes, dtype=np.float64).astype(
            x.data.dtype))
        in_shape = x.shape

        def bwd_gap(g):
            gx = np.broadcast_to(
                g.reshape(g.shape + (1,) * rank) / n, in_shape)
            return (np.ascontiguousarray(gx),)

        return record("global_avg_pool", out, (x,), bwd_gap)

    if window is None:
        raise ShapeError(f"{kind} pool requires a window")
    win_t = _as_tuple(window, rank, "window")
    strd = _as_tuple(window if stride is None else stride, rank, "stride")
    S = x.shape[2:]
    for d in range(rank):
        if win_t[d] > S[d]:
            raise ShapeError(
                f"pool window dim {d} ({win_t[d]}) exceeds input dim ({S[d]})")
    win = sliding_window_view(x.data, win_t, axis=tuple(range(2, 2 + rank)))
    win = win[(slice(None), slice(None)) +
              tuple(slice(None, None, s) for s in strd)]
    s_out = win.shape[2:2 + rank]
    wp = int(np.prod(win_t))
    B, C = x.shape[0], x.shape[1]
    flat = win.reshape(B, C, *s_out, wp)
    in_shape = x.shape

    if kind == "avg":
        out = Tensor(np.ascontiguousarray(
            flat.mean(axis=-1, dtype=np.float64).astype(x.data.dtype)))

        def bwd_avg(g):
            gxp = np.zeros(in_shape, dtype=g.dtype)
            gshare = g / wp
            for kidx in np.ndindex(*win_t):
                sl = tuple(
                    slice(kidx[d], kidx[d] + strd[d] * (s_out[d] - 1) + 1, strd[d])
                    for d in range(rank))
                gxp[(slice(None), slice(None)) + sl] += gshare
            return (gxp,)

        return record("avg_pool", out, (x,), bwd_avg)

    # max: argmax over the flattened window picks the first maximum, which
    # keeps the backward pass deterministic under ties.
    am = np.argmax(flat, axis=-1)
    out = Tensor(np.ascontiguousarray(np.take_along_axis(
        flat, am[..., None], axis=-1)[..., 0]))

    def bwd_max(g):
        gx = np.zeros(in_shape, dtype=g.dtype)
        offs = np.unravel_index(am, win_t)  # rank arrays, each [B,C,*S_out]
        grids = np.meshgrid(*[np.arange(n) for n in s_out], indexing="ij")
        flat_idx = np.zeros(am.shape, dtype=np.int64)
        mult = 1
        for d in range(rank - 1, -1, -1):
            pos = offs[d] + grids[d][None, None] * strd[d]
            flat_idx += pos * mult
            mult *= in_shape[2 + d]
        gxf = gx.reshape(B, C, -1)
        bidx = np.arange(B)[:, None, None]
        cidx = np.arange(C)[None, :, None]
        np.add.at(gxf, (bidx, cidx, flat_idx.reshape(B, C, -1)),
                  g.reshape(B, C, -1))
        return (gx,)

    return record("max_pool", out, (x,), bwd_max)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, run_mean: Tensor,
              run_var: Tensor, mode: str, eps: float = 1e-5,
              momentum: float = 0.9, update_stats: bool = True) -> Tensor:
    """Per-channel normalization over all non-channel axes of [B, C, *S].

    Train mode normalizes with batch statistics and (unless frozen) updates
    the running buffers in place: run <- momentum*run + (1-momentum)*batch.
    Eval mode is a per-channel affine map using the running buffers.
    """
    if mode not in ("train", "eval"):
        raise ShapeError(f"batchnorm mode must be train or eval, got {mode!r}")
    if eps <= 0:
        raise ShapeError(f"batchnorm eps must be positive, got {eps}")
    C = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("run_mean", run_mean), ("run_var", run_var)):
        if t.shape != (C,):
            raise ShapeError(
                f"batchnorm {name} shape {t.shape} != ({C},) for input {x.shape}")
    _check_same_dtype(x, gamma, beta)
    axes = (0,) + tuple(range(2, x.ndim))
    br = (1, C) + (1,) * (x.ndim - 2)
    m = int(np.prod([x.shape[a] for a in axes]))

    if mode == "train":
        # f64 stats are exact for f32 activations -> batch-order invariant
        mu = x.data.mean(axis=axes, dtype=np.float64).astype(x.data.dtype)
        var = x.data.var(axis=axes, dtype=np.float64).astype(x.data.dtype)
        if update_stats:
            run_mean.data[...] = momentum * run_mean.data + (1 - momentum) * mu
            run_var.data[...] = momentum * run_var.data + (1 - momentum) * var
    else:
        mu = run_mean.data.astype(x.data.dtype)
        var = run_var.data.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu.reshape(br)) * inv.reshape(br)
    out = Tensor(gamma.data.reshape(br) * xhat + beta.data.reshape(br))
    gd = gamma.data

    if mode == "train":
        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            gh = g * gd.reshape(br)
            gx = (inv.reshape(br) / m) * (
                m * gh
                - gh.sum(axis=axes).reshape(br)
                - xhat * (gh * xhat).sum(axis=axes).reshape(br))
            return gx, dgamma, dbeta
    else:
        def bwd(g):
            dbeta = g.sum(axis=axes)
            dgamma = (g * xhat).sum(axis=axes)
            gx = g * (gd * inv).reshape(br)
            return gx, dgamma, dbeta

    return record("batchnorm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_xent(logits: Tensor, labels) -> tuple:
    """Mean cross-entropy with max-subtraction; returns (loss, probs).

    `probs` is detached: gradients flow through the loss only.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent expects [B,K] logits, got {logits.shape}")
    lab = np.asarray(labels)
    B, K = logits.shape
    if lab.shape != (B,):
        raise ShapeError(f"labels shape {lab.shape} != ({B},)")
    if not np.issubdtype(lab.dtype, np.integer):
        raise ShapeError("labels must be integers")
    if lab.size and (lab.min() < 0 or lab.max() >= K):
        raise ShapeError(
            f"label out of range [0, {K}): got {lab[(lab < 0) | (lab >= K)][0]}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    probs = np.exp(logp)
    loss_val = -logp[np.arange(B), lab].mean()
    loss = Tensor(np.asarray(loss_val, dtype=logits.data.dtype))

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(B), lab] -= 1.0
        return (gl * (g / B),)

    record("softmax_xent", loss, (logits,), bwd)
    return loss, Tensor(probs)
