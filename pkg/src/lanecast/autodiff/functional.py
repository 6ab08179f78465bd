"""Differentiable operations on :class:`Tensor`.

Convolutions use an im2col formulation built on strided window views. The
column matrix is processed in batch chunks and recomputed in the backward pass
instead of being stored, which bounds peak memory on large batches.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, LabelError
from .tensor import Tensor, as_tensor, check_finite

# Upper bound on elements in one im2col block.
_COL_BUDGET = 8_000_000


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _expect_rank(x: Tensor, rank: int, op: str, axes: Sequence[str]) -> None:
    if x.ndim != rank:
        raise DimensionError(
            f"{op}: expected rank {rank} input ({' x '.join(axes)}), got shape {x.shape}"
        )


# ---------------------------------------------------------------- elementwise


def _operands(a, b):
    # Python scalars adopt the tensor dtype so float32 graphs stay float32.
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._from_op(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), bw, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: feature axis mismatch, {a.shape[1]} (axis 1 of lhs) vs {b.shape[0]}"
        )

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape batch x features."""
    if x.ndim != 2:
        raise DimensionError(f"linear: expected batch x features input, got shape {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: features axis (axis 1) has {x.shape[1]}, layer expects {weight.shape[1]}"
        )
    w, xd = weight.data, x.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ w, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "linear")


# ---------------------------------------------------------------- convolution


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _chunks(batch: int, per_item: int):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, batch, step):
        yield slice(start, min(batch, start + step))


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
) -> Tensor:
    _expect_rank(x, 4, "conv2d", ("batch", "channels", "height", "width"))
    B, C, H, W = x.shape
    O, Ci, KH, KW = weight.shape
    if C != Ci:
        raise DimensionError(f"conv2d: channels axis (axis 1) has {C}, kernel expects {Ci}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = conv_output_extent(H, KH, sh, ph)
    Wo = conv_output_extent(W, KW, sw, pw)
    if Ho < 1:
        raise DimensionError(f"conv2d: height axis (axis 2) of {H} too small for kernel {KH}")
    if Wo < 1:
        raise DimensionError(f"conv2d: width axis (axis 3) of {W} too small for kernel {KW}")

    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def windows(sl):
        v = sliding_window_view(xp[sl], (KH, KW), axis=(2, 3))
        return v[:, :, : sh * (Ho - 1) + 1 : sh, : sw * (Wo - 1) + 1 : sw]

    wd = weight.data
    out = np.empty((B, O, Ho, Wo), dtype=np.result_type(xp, wd))
    per_item = C * KH * KW * Ho * Wo
    for sl in _chunks(B, per_item):
        res = np.tensordot(windows(sl), wd, axes=([1, 4, 5], [1, 2, 3]))
        out[sl] = res.transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    def bw(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for sl in _chunks(B, per_item):
            gs = g[sl]
            if weight.requires_grad:
                gw += np.tensordot(gs, windows(sl), axes=([0, 2, 3], [0, 2, 3]))
            if gxp is not None:
                cols = np.tensordot(gs, wd, axes=([1], [0]))  # b, Ho, Wo, C, KH, KW
                target = gxp[sl]
                for i in range(KH):
                    for j in range(KW):
                        target[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += cols[
                            ..., i, j
                        ].transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv2d")


def conv1d_temporal(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 0,
) -> Tensor:
    """Convolution along axis 2 (time) of a ``batch x channels x T [x ...]`` input.

    Trailing axes (e.g. height and width) are treated independently, so the
    same temporal kernel runs at every spatial location.
    """
    if x.ndim < 3:
        raise DimensionError(
            f"conv1d-temporal: expected batch x channels x time [x ...] input, got shape {x.shape}"
        )
    C, T = x.shape[1], x.shape[2]
    O, Ci, K = weight.shape
    if C != Ci:
        raise DimensionError(f"conv1d-temporal: channels axis (axis 1) has {C}, kernel expects {Ci}")
    To = T + 2 * padding - K + 1
    if To < 1:
        raise DimensionError(
            f"conv1d-temporal: time axis (axis 2) of {T} too small for kernel {K} with padding {padding}"
        )
    pad = [(0, 0)] * x.ndim
    pad[2] = (padding, padding)
    xp = np.pad(x.data, pad) if padding else x.data
    wd = weight.data
    out = None
    for k in range(K):
        part = np.moveaxis(np.tensordot(wd[:, :, k], xp[:, :, k : k + To], axes=([1], [1])), 0, 1)
        out = part if out is None else out + part
    if bias is not None:
        out = out + bias.data.reshape((1, O) + (1,) * (x.ndim - 2))
    other = tuple(i for i in range(x.ndim) if i != 1)

    def bw(g):
        gw = np.zeros_like(wd)
        gxp = np.zeros_like(xp)
        for k in range(K):
            seg = xp[:, :, k : k + To]
            gw[:, :, k] = np.tensordot(g, seg, axes=(other, other))
            gxp[:, :, k : k + To] += np.moveaxis(np.tensordot(wd[:, :, k], g, axes=([0], [1])), 0, 1)
        gx = gxp[:, :, padding : padding + T]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=other))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, bw, "conv1d-temporal")


# ---------------------------------------------------------------- pooling


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 0) -> Tensor:
    _expect_rank(x, 4, "max_pool2d", ("batch", "channels", "height", "width"))
    B, C, H, W = x.shape
    Ho = conv_output_extent(H, kernel, stride, padding)
    Wo = conv_output_extent(W, kernel, stride, padding)
    if Ho < 1 or Wo < 1:
        axis = "height axis (axis 2)" if Ho < 1 else "width axis (axis 3)"
        raise DimensionError(f"max_pool2d: {axis} too small for a {kernel}x{kernel} window")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * (arg == idx)
        return (gxp[:, :, padding : padding + H, padding : padding + W],)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


# ---------------------------------------------------------------- normalization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over every axis except axis 1.

    In training mode the running statistics arrays are updated in place.
    """
    if x.ndim < 2:
        raise DimensionError(f"batchnorm: expected batch x channels [x ...] input, got {x.shape}")
    C = x.shape[1]
    if C != gamma.shape[0]:
        raise DimensionError(f"batchnorm: channels axis (axis 1) has {C}, layer expects {gamma.shape[0]}")
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        n = xd.size // C
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        n = None
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (dxhat - s1 / n - xhat * s2 / n) * inv_std.reshape(bshape)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor._from_op(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------- classification


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    Returns the scalar loss tensor and the probability matrix.
    """
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected batch x classes logits, got {logits.shape}")
    B, K = logits.shape
    t = np.atleast_1d(np.asarray(targets))
    if t.shape != (B,):
        raise DimensionError(f"softmax_cross_entropy: {t.shape[0]} targets for batch axis of {B}")
    if t.dtype.kind not in "iu" or np.any(t < 0) or np.any(t >= K):
        raise LabelError(f"target class indices must lie in [0, {K - 1}], got {t.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_z
    probs = np.exp(log_p)
    rows = np.arange(B)
    loss = -log_p[rows, t].mean()

    def bw(g):
        d = probs.copy()
        d[rows, t] -= 1.0
        return (d * (g / B),)

    out = Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")
    return out, check_finite(probs, "softmax")
