"""Spatial primitives on NCHW tensors: padding, (transposed) convolution, upsampling."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _node


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv_transpose_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N,C,H,W) -> (N,Ho,Wo,C,k,k) contiguous patch array."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def _col2im(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Scatter-add (N,Ho,Wo,C,k,k) patches back into an (N,C,H,W) canvas."""
    n, ho, wo, c, k, _ = cols.shape
    out = np.zeros((n, c) + out_hw, dtype=cols.dtype)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)  # N,C,k,k,Ho,Wo
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    """Pad the two trailing axes; ``mode`` is ``zeros`` or ``edge`` (replicate)."""
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0),) * (x.ndim - 2) + ((pad, pad), (pad, pad)))

        def bw(g):
            return (g[..., pad:pad + h, pad:pad + w],)

    elif mode == "edge":
        out = np.pad(x.data, ((0, 0),) * (x.ndim - 2) + ((pad, pad), (pad, pad)), mode="edge")

        def bw(g):
            gx = g[..., pad:pad + h, :].copy()
            gx[..., 0, :] += g[..., :pad, :].sum(axis=-2)
            gx[..., -1, :] += g[..., pad + h:, :].sum(axis=-2)
            out_ = gx[..., pad:pad + w].copy()
            out_[..., 0] += gx[..., :pad].sum(axis=-1)
            out_[..., -1] += gx[..., pad + w:].sum(axis=-1)
            return (out_,)

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _node(out, (x,), bw, "pad2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           pad_mode: str = "zeros") -> Tensor:
    """Cross-correlation. ``x`` is (N,C,H,W), ``w`` is (O,C,k,k), ``b`` is (O,)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ValueError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output size is not positive")
    xp = pad2d(x, pad, pad_mode)
    cols = _im2col(xp.data, k, stride)
    flat = cols.reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, c * k * k)
    out = (flat @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[-2:]

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ flat).reshape(w.shape) if w.requires_grad else None
        gx = None
        if xp.requires_grad:
            gx = _col2im((gm @ wmat).reshape(n, ho, wo, c, k, k), (hp, wp), stride)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (xp, w, b) if b is not None else (xp, w)
    return _node(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``w`` is (C_in, C_out, k, k)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and weight")
    n, c, h, wd = x.shape
    cw, o, k, k2 = w.shape
    if cw != c or k != k2:
        raise ValueError(f"conv_transpose2d mismatch: input {x.shape}, weight {w.shape}")
    ho, wo = conv_transpose_out_size(h, k, stride, pad), conv_transpose_out_size(wd, k, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d output size is not positive")
    full_h, full_w = (h - 1) * stride + k, (wd - 1) * stride + k
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    wmat = w.data.reshape(c, o * k * k)
    cols = (xm @ wmat).reshape(n, h, wd, o, k, k)
    full = _col2im(cols, (full_h, full_w), stride)
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = np.zeros((n, o, full_h, full_w), dtype=g.dtype)
        gfull[:, :, pad:pad + ho, pad:pad + wo] = g
        gcols = _im2col(gfull, k, stride).reshape(n * h * wd, o * k * k)
        gx = gw = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = (xm.T @ gcols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, bw, "conv_transpose2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = x.shape[-2:]

    def bw(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample_nearest")
