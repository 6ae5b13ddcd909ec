"""Differentiable neural-network primitives on :class:`Tensor`."""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from esdnet.errors import ConfigError, DimensionError, UsageError
from esdnet.tensor.tensor import Tensor, mean, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require_4d(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected N x C x H x W input, got shape {x.shape}")


def _out_size(op: str, size: int, k: int, stride: int, padding: int, axis: str) -> int:
    n = (size + 2 * padding - k) // stride + 1
    if n < 1:
        raise DimensionError(f"{op}: axis {axis} of size {size} too small for kernel {k} with padding {padding}")
    return n


def _pad(x: np.ndarray, padding: int, value=0.0) -> np.ndarray:
    if not padding:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]


def _scatter_windows(gwin: np.ndarray, padded_shape: tuple, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: fold (N, C, Ho, Wo, kh, kw) back onto the padded input."""
    _, _, ho, wo, kh, kw = gwin.shape
    out = np.zeros(padded_shape, dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gwin[
                :, :, :, :, i, j
            ]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``weight`` shaped (C_out, C_in, kH, kW)."""
    _require_4d("conv2d", x)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, kH, kW), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input axis 1 (channels) has {c}, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias axis 0 has {bias.shape}, expected ({c_out},)")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be positive and padding non-negative, got {stride}, {padding}")
    ho = _out_size("conv2d", h, kh, stride, padding, "2 (height)")
    wo = _out_size("conv2d", w, kw, stride, padding, "3 (width)")

    wd = weight.data
    xp = _pad(x.data, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = wd.reshape(c_out, -1)
    out = cols @ wmat.T
    del cols
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    flops = 2 * c_out * c_in * kh * kw * ho * wo * n + (c_out * ho * wo * n if bias is not None else 0)
    record_op("conv2d", flops)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        # im2col is recomputed rather than kept alive between passes
        cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
        gw = (g2.T @ cols).reshape(wd.shape)
        del cols
        gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = _scatter_windows(gcols, xp.shape, stride)
        if padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "conv2d")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics over N*H*W are used and the running
    buffers are updated in place (``running_var`` with the unbiased estimate).
    """
    _require_4d("batch_norm2d", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d: input axis 1 has {c} channels, gamma/beta have {gamma.shape}/{beta.shape}")
    xd = x.data
    if training:
        count = n * h * w
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None].astype(xd.dtype)) * inv[None, :, None, None]
    gd = gamma.data
    out = xhat * gd[None, :, None, None] + beta.data[None, :, None, None]
    record_op("batch_norm2d")

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gd[None, :, None, None]
        if training:
            m = n * h * w
            dx = (inv[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = gxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return Tensor._result(out, (x, gamma, beta), backward, "batch_norm2d")


def max_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    _require_4d("max_pool2d", x)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = _out_size("max_pool2d", h, kernel, stride, padding, "2 (height)")
    wo = _out_size("max_pool2d", w, kernel, stride, padding, "3 (width)")
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kernel, kernel, stride, ho, wo).reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    record_op("max_pool2d")

    def backward(g):
        gwin = np.zeros((n, c, ho, wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = _scatter_windows(gwin.reshape(n, c, ho, wo, kernel, kernel), xp.shape, stride)
        return (gx[:, :, padding : padding + h, padding : padding + w],)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    _require_4d("avg_pool2d", x)
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = _out_size("avg_pool2d", h, kernel, stride, 0, "2 (height)")
    wo = _out_size("avg_pool2d", w, kernel, stride, 0, "3 (width)")
    area = kernel * kernel
    out = _windows(x.data, kernel, kernel, stride, ho, wo).mean(axis=(-2, -1))
    record_op("avg_pool2d")

    def backward(g):
        gwin = np.broadcast_to((g / area)[..., None, None], (n, c, ho, wo, kernel, kernel))
        return (_scatter_windows(gwin, x.shape, stride),)

    return Tensor._result(np.ascontiguousarray(out, dtype=x.dtype), (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C."""
    _require_4d("global_avg_pool", x)
    record_op("global_avg_pool")
    return mean(x, axis=(2, 3))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: expected 2-d input and weight, got {x.shape} and {weight.shape}")
    n, fin = x.shape
    if weight.shape[0] != fin:
        raise DimensionError(f"linear: input axis 1 has {fin} features, weight axis 0 has {weight.shape[0]}")
    fout = weight.shape[1]
    if bias is not None and bias.shape != (fout,):
        raise DimensionError(f"linear: bias axis 0 has {bias.shape}, expected ({fout},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data
    record_op("linear", 2 * fin * fout * n + (fout * n if bias is not None else 0))

    def backward(g):
        grads = [g @ wd.T, xd.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, backward, "linear")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p) in training, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= p
    mask = keep.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    record_op("dropout")
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")
