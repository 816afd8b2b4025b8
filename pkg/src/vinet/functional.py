"""Differentiable array operations used by the saliency network.

Spatio-temporal tensors are channel-first, ``[C, T, H, W]``, optionally with
a leading batch axis ``[N, C, T, H, W]``. Every op accepts both layouts and
returns the same layout it was given.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, log_pattern

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _as_batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return x.reshape((1,) + x.shape), True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected a rank-{rank} or rank-{rank + 1} tensor, got shape {x.shape}")


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding=0) -> Tensor:
    """3-D cross-correlation of ``x`` with ``weight`` ``[C_out, C_in, kT, kH, kW]``."""
    x5, squeeze = _as_batched(x, 4)
    stride, padding = _triple(stride), _triple(padding)
    if min(stride) < 1:
        raise ValueError(f"strides must be >= 1, got {stride}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d weight must be rank 5, got shape {weight.shape}")
    n, c_in, t, h, w = x5.shape
    c_out, wc_in, kt, kh, kw = weight.shape
    if wc_in != c_in:
        raise ValueError(f"input has {c_in} channels but weight expects {wc_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")
    padded = tuple(d + 2 * p for d, p in zip((t, h, w), padding))
    if any(k > d for k, d in zip((kt, kh, kw), padded)):
        raise ValueError(f"kernel {(kt, kh, kw)} larger than padded input {padded}")

    st, sh, sw = stride
    pt, ph, pw = padding
    xp = np.pad(x5.data, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    to, ho, wo = cols.shape[2:5]
    out = np.tensordot(cols, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1, 1)
    wdata = weight.data

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gcols = np.tensordot(g, wdata, axes=([1], [0]))  # [N, To, Ho, Wo, C, kt, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    gxp[:, :, i:i + st * to:st, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                        gcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
        gx = gxp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x5, weight, bias) if bias is not None else (x5, weight)
    res = Tensor._from_op(out, parents, backward, "conv3d")
    return res.reshape(res.shape[1:]) if squeeze else res


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride=2) -> Tensor:
    """Transposed 3-D convolution with kernel size equal to the stride.

    ``weight`` is ``[C_in, C_out, sT, sH, sW]``; each input cell is expanded
    into a non-overlapping ``sT x sH x sW`` output block.
    """
    x5, squeeze = _as_batched(x, 4)
    n, c_in, t, h, w = x5.shape
    wc_in, c_out, kt, kh, kw = weight.shape
    if wc_in != c_in:
        raise ValueError(f"input has {c_in} channels but weight expects {wc_in}")
    if (kt, kh, kw) != _triple(stride):
        raise ValueError("conv_transpose3d supports kernel == stride only")
    xd, wd = x5.data, weight.data
    # out[n, o, t, a, h, b, w, c] = sum_i x[n, i, t, h, w] * W[i, o, a, b, c]
    blocks = np.einsum("nithw,ioabc->notahbwc", xd, wd, optimize=True)
    out = blocks.reshape(n, c_out, t * kt, h * kh, w * kw)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1, 1)

    def backward(g):
        gb = g.reshape(n, c_out, t, kt, h, kh, w, kw)
        gx = np.einsum("notahbwc,ioabc->nithw", gb, wd, optimize=True)
        gw = np.einsum("notahbwc,nithw->ioabc", gb, xd, optimize=True)
        return (gx, gw, g.sum(axis=(0, 2, 3, 4)) if bias is not None else None)

    parents = (x5, weight, bias) if bias is not None else (x5, weight)
    res = Tensor._from_op(np.ascontiguousarray(out), parents, backward, "conv_transpose3d")
    return res.reshape(res.shape[1:]) if squeeze else res


def sep_conv3d(x: Tensor, spatial_weight: Tensor, temporal_weight: Tensor,
               spatial_bias: Optional[Tensor] = None, temporal_bias: Optional[Tensor] = None,
               stride=1, padding: Optional[Sequence[int]] = None) -> Tensor:
    """Spatial ``1 x kH x kW`` convolution followed by temporal ``kT x 1 x 1`` convolution.

    ``padding`` is the padding of the equivalent full 3-D convolution
    ``(pT, pH, pW)``; it defaults to "same" padding for odd kernels.
    """
    kh, kw = spatial_weight.shape[3:]
    kt = temporal_weight.shape[2]
    if spatial_weight.shape[2] != 1 or temporal_weight.shape[3:] != (1, 1):
        raise ValueError("spatial kernel must be 1 x kH x kW and temporal kernel kT x 1 x 1")
    pt, ph, pw = _triple(padding) if padding is not None else (kt // 2, kh // 2, kw // 2)
    st, sh, sw = _triple(stride)
    y = conv3d(x, spatial_weight, spatial_bias, stride=(1, sh, sw), padding=(0, ph, pw))
    return conv3d(y, temporal_weight, temporal_bias, stride=(st, 1, 1), padding=(pt, 0, 0))


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation: ``x`` is ``[C, L]`` or ``[N, C, L]``, weight ``[C_out, C_in, k]``."""
    x3, squeeze = _as_batched(x, 2)
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be rank 3, got shape {weight.shape}")
    n, c, length = x3.shape
    c_out, c_in, k = weight.shape
    y = conv3d(x3.reshape(n, c, 1, 1, length), weight.reshape(c_out, c_in, 1, 1, k), bias,
               stride=(1, 1, stride), padding=(0, 0, padding))
    y = y.reshape(n, c_out, y.shape[-1])
    return y.reshape(y.shape[1:]) if squeeze else y


def maxpool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling without padding; gradient flows to the lowest-index maximum."""
    x5, squeeze = _as_batched(x, 4)
    kernel = _triple(kernel)
    stride = _triple(stride) if stride is not None else kernel
    n, c, t, h, w = x5.shape
    if any(k > d for k, d in zip(kernel, (t, h, w))):
        raise ValueError(f"pool kernel {kernel} larger than input {(t, h, w)}")
    kt, kh, kw = kernel
    st, sh, sw = stride
    win = sliding_window_view(x5.data, kernel, axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
    to, ho, wo = win.shape[2:5]
    flat = win.reshape(n, c, to, ho, wo, kt * kh * kw)
    arg = flat.argmax(axis=-1)  # first occurrence == lowest flat index in window
    log_pattern(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    a, b, cc = np.unravel_index(arg, kernel)
    ti = np.arange(to).reshape(1, 1, to, 1, 1) * st + a
    hi = np.arange(ho).reshape(1, 1, 1, ho, 1) * sh + b
    wi = np.arange(wo).reshape(1, 1, 1, 1, wo) * sw + cc
    ni = np.arange(n).reshape(n, 1, 1, 1, 1)
    ci = np.arange(c).reshape(1, c, 1, 1, 1)
    shape, dtype = x5.shape, x5.data.dtype

    def backward(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, (ni, ci, ti, hi, wi), g)
        return (gx,)

    res = Tensor._from_op(np.ascontiguousarray(out), (x5,), backward, "maxpool3d")
    return res.reshape(res.shape[1:]) if squeeze else res


def maxpool1d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    x3, squeeze = _as_batched(x, 2)
    n, c, length = x3.shape
    y = maxpool3d(x3.reshape(n, c, 1, 1, length), (1, 1, kernel),
                  (1, 1, stride if stride is not None else kernel))
    y = y.reshape(n, c, y.shape[-1])
    return y.reshape(y.shape[1:]) if squeeze else y


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix ``[n_out, n_in]`` with half-pixel centers.

    Source coordinate ``s = (d + 0.5) * n_in / n_out - 0.5`` clamped to
    ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("sizes must be >= 1")
    d = np.arange(n_out, dtype=np.float64)
    s = np.clip((d + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = s - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m.astype(dtype)


def _apply_axis(a: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, a, axes=([1], [axis])), 0, axis)


def trilinear_upsample(x: Tensor, out_size) -> Tensor:
    """Resize the last three axes to ``out_size`` by trilinear interpolation."""
    out_size = _triple(out_size)
    if min(out_size) < 1:
        raise ValueError(f"output size must be >= 1, got {out_size}")
    if x.ndim < 3:
        raise ValueError(f"need at least 3 axes, got shape {x.shape}")
    axes = (x.ndim - 3, x.ndim - 2, x.ndim - 1)
    mats = [interp_matrix(n, m, x.data.dtype) for n, m in zip(x.shape[-3:], out_size)]
    out = x.data
    for m, ax in zip(mats, axes):
        out = _apply_axis(out, m, ax)

    def backward(g):
        for m, ax in zip(mats, axes):
            g = _apply_axis(g, m.T, ax)
        return (g,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "trilinear_upsample")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise np.exceptions.AxisError(f"axis {axis} out of range for {ndim}-d tensors")
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape))
                                 if i != axis):
            raise ValueError(f"cannot concat shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tuple(tensors), backward, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + s)
        out.append(x[tuple(index)])
        start += s
    return out


def normalize_to_distribution(x: Tensor) -> Tensor:
    """Scale a non-negative map over its last two axes so it sums to one."""
    if x.ndim < 2:
        raise ValueError("need at least a 2-d map")
    if np.any(x.data < 0):
        raise ValueError("cannot normalize a map with negative entries")
    total = x.sum(axis=(-2, -1), keepdims=True)
    if np.any(total.data <= 0):
        raise ValueError("cannot normalize an all-zero map")
    return x / total
