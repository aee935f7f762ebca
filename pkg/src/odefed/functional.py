"""Differentiable operators over :class:`~odefed.tensor.Tensor`.

All convolutions are NCHW cross-correlations. ``conv2d`` lowers to one
matrix product over im2col patches; ``pointwise_conv2d`` shares that exact
path so a 1x1 ``conv2d`` and a pointwise step agree bit for bit.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    pass


def _out_extent(op: str, dim: str, size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(
            f"{op}: kernel extent {k} exceeds padded input {dim}={size + 2 * padding}"
        )
    return span // stride + 1


def _check_conv_args(op: str, stride: int, padding: int) -> None:
    if stride < 1:
        raise ShapeError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"{op}: padding must be >= 0, got {padding}")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, Ho, Wo, k, k) strided view of a padded input."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _fold(dwin: np.ndarray, padded_shape, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: scatter-add patch gradients back onto the input."""
    _, _, ho, wo, _, _ = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += dwin[
                :, :, :, :, i, j
            ]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv(op: str, x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, padding: int) -> Tensor:
    _check_conv_args(op, stride, padding)
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: input must be 4-D [B,C,H,W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"{op}: weight must be 4-D [Cout,Cin,Kh,Kw], got shape {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"{op}: input channels (dim 1) = {cin} but weight expects {wcin}")
    if kh != kw:
        raise ShapeError(f"{op}: kernel must be square, got {kh}x{kw}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{op}: bias shape {b.shape} != ({cout},)")
    k = kh
    ho = _out_extent(op, "H", h, k, stride, padding)
    wo = _out_extent(op, "W", wd, k, stride, padding)

    xp = _pad(x.data, padding)
    cols = _windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
            dx = _fold(dcols, xp.shape, k, stride, padding)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(out, parents, backward_fn, op)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv("conv2d", x, weight, bias, stride, padding)


def pointwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 channel-mixing convolution, weight ``[M, C, 1, 1]``."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise_conv2d: weight must be [M,C,1,1], got shape {weight.shape}")
    return _conv("pointwise_conv2d", x, weight, None, 1, 0)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution, weight ``[C, 1, K, K]``."""
    op = "depthwise_conv2d"
    _check_conv_args(op, stride, padding)
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: input must be 4-D [B,C,H,W], got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"{op}: weight must be [C,1,K,K], got shape {weight.shape}")
    bsz, c, h, wd = x.shape
    if weight.shape[0] != c:
        raise ShapeError(f"{op}: input channels (dim 1) = {c} but weight has {weight.shape[0]}")
    k = weight.shape[2]
    if weight.shape[3] != k:
        raise ShapeError(f"{op}: kernel must be square, got {weight.shape[2]}x{weight.shape[3]}")
    ho = _out_extent(op, "H", h, k, stride, padding)
    wo = _out_extent(op, "W", wd, k, stride, padding)

    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, ho, wo)
    kern = weight.data[:, 0]
    out = np.einsum("bchwij,cij->bchw", win, kern)

    def backward_fn(g):
        dw = np.einsum("bchw,bchwij->cij", g, win)[:, None] if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dwin = g[:, :, :, :, None, None] * kern[None, :, None, None, :, :]
            dx = _fold(dwin, xp.shape, k, stride, padding)
        return dx, dw

    return make_result(out, (x, weight), backward_fn, op)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm: input must be 4-D, got shape {x.shape}")
    bsz, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: channels {c} not divisible by groups {groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine params must be ({c},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.data.reshape(bsz, groups, -1)
    n = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(bsz, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(bsz, groups, n)
            xh = xhat.reshape(bsz, groups, n)
            dx = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=2, keepdims=True) - xh * (dxhat * xh).sum(axis=2, keepdims=True))
            ).reshape(x.shape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward_fn, "group_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * mask,), "relu")


def avg_pool_global(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool_global: input must be 4-D, got shape {x.shape}")
    bsz, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward_fn, "avg_pool_global")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D [B,F], got shape {x.shape}")
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: input features (dim 1) = {x.shape[1]} but weight is {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward_fn, "linear")


def _same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("add", x, y)
    return make_result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape("mul", x, y)
    return make_result(x.data * y.data, (x, y), lambda g: (g * y.data, g * x.data), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    factor = x.dtype.type(s)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_result(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Plain-array softmax along the class axis (no tape)."""
    return np.exp(_log_softmax(z / temperature))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B,classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    bsz, classes = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({bsz},)")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {classes})")
    logp = _log_softmax(logits.data)
    rows = np.arange(bsz)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / bsz),)

    return make_result(out, (logits,), backward_fn, "softmax_cross_entropy")


def softmax_kl(student_logits: Tensor, teacher_probs: np.ndarray, temperature: float = 1.0) -> Tensor:
    """Batch-mean ``KL(teacher || softmax(student_logits / T))``; the teacher is a constant."""
    z = student_logits.data
    p = np.asarray(teacher_probs, dtype=z.dtype)
    if p.shape != z.shape:
        raise ShapeError(f"softmax_kl: teacher shape {p.shape} != student shape {z.shape}")
    bsz = z.shape[0]
    logq = _log_softmax(z / temperature)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0)
    out = np.asarray((plogp - p * logq).sum() / bsz, dtype=z.dtype)

    def backward_fn(g):
        return ((np.exp(logq) - p) * (g / (temperature * bsz)),)

    return make_result(out, (student_logits,), backward_fn, "softmax_kl")
