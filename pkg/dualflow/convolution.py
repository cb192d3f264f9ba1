"""Convolution and resampling operators for :mod:`dualflow.tensor_core`.

All convolutions are cross-correlations (the kernel is not flipped). Small
kernels gather windows with ``sliding_window_view`` and contract them with
``einsum``; large spatial kernels go through ``scipy.signal.fftconvolve``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

from dualflow.errors import ShapeError
from dualflow.tensor_core import Tensor

# kernels with at least this many taps are correlated through the FFT
FFT_MIN_TAPS = 25


def _pair(padding: int | tuple[int, int]) -> tuple[int, int]:
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    return int(ph), int(pw)


def conv2d(x: Tensor, kernel: Tensor, padding: int | tuple[int, int] = 0) -> Tensor:
    """2D convolution of ``x`` [C,H,W] (or a batch [B,C,H,W]) with ``kernel`` [K,C,kh,kw].

    Output spatial size is ``H + 2*padding - kh + 1``.
    """
    if x.ndim not in (3, 4) or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d: expected input [C,H,W] or [B,C,H,W] and kernel [K,C,kh,kw], "
            f"got {x.shape} and {kernel.shape}"
        )
    batched = x.ndim == 4
    n_out, n_in, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    ph, pw = _pair(padding)
    xd = x.data if batched else x.data[None]
    _, c, h, w = xd.shape
    if c != n_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {n_in}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {ph},{pw}")

    kd = kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    if kh * kw >= FFT_MIN_TAPS:
        return _conv2d_fft(x, kernel, xp, (ph, pw), batched)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,kcij->bkhw", windows, kd, optimize=True)

    def back(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        g4 = g if batched else g[None]
        gk = np.einsum("bchwij,bkhw->kcij", windows, g4, optimize=True) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gpad = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gpad, (kh, kw), axis=(2, 3))
            gxp = np.einsum("bkhwij,kcij->bchw", gwin, kd[:, :, ::-1, ::-1], optimize=True)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
            gx = gx if batched else gx[0]
        return gx, gk

    return Tensor._from_op(out if batched else out[0], (x, kernel), back, "conv2d")


def _correlate_valid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid cross-correlation over the last two axes; leading axes broadcast."""
    return signal.fftconvolve(a, b[..., ::-1, ::-1], mode="valid", axes=(-2, -1))


def _conv2d_fft(x: Tensor, kernel: Tensor, xp: np.ndarray, padding: tuple[int, int], batched: bool) -> Tensor:
    kd = kernel.data
    h, w = xp.shape[2] - 2 * padding[0], xp.shape[3] - 2 * padding[1]
    dtype = xp.dtype
    out = _correlate_valid(xp[:, None], kd[None]).sum(axis=2).astype(dtype, copy=False)

    def back(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        g4 = g if batched else g[None]
        gk = None
        if kernel.requires_grad:
            gk = _correlate_valid(xp[:, None], g4[:, :, None]).sum(axis=0).astype(dtype, copy=False)
        gx = None
        if x.requires_grad:
            full = signal.fftconvolve(g4[:, :, None], kd[None], mode="full", axes=(-2, -1)).sum(axis=1)
            gx = full[:, :, padding[0] : padding[0] + h, padding[1] : padding[1] + w].astype(dtype, copy=False)
            gx = gx if batched else gx[0]
        return gx, gk

    return Tensor._from_op(out if batched else out[0], (x, kernel), back, "conv2d")


def conv3d(x: Tensor, kernel: Tensor, padding: int | tuple[int, int, int] = 0) -> Tensor:
    """3D convolution of ``x`` [C,T,H,W] with ``kernel`` [K,C,kt,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(
            f"conv3d: expected input [C,T,H,W] and kernel [K,C,kt,kh,kw], got {x.shape} and {kernel.shape}"
        )
    pads = (padding,) * 3 if isinstance(padding, int) else tuple(padding)
    if any(p < 0 for p in pads):
        raise ShapeError(f"padding must be >= 0, got {padding}")
    n_out, n_in, kt, kh, kw = kernel.shape
    c, t, h, w = x.shape
    if c != n_in:
        raise ShapeError(f"conv3d: input has {c} channels, kernel expects {n_in}")
    pt, ph, pw = pads
    sizes = (t + 2 * pt - kt + 1, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1)
    if min(sizes) <= 0:
        raise ShapeError(f"conv3d: kernel {kernel.shape[2:]} does not fit input {x.shape[1:]}")

    kd = kernel.data
    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    windows = sliding_window_view(xp, (kt, kh, kw), axis=(1, 2, 3))
    out = np.einsum("cthwijk,ocijk->othw", windows, kd, optimize=True)

    def back(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        gk = np.einsum("cthwijk,othw->ocijk", windows, g, optimize=True) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gpad = np.pad(g, ((0, 0), (kt - 1, kt - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gpad, (kt, kh, kw), axis=(1, 2, 3))
            gxp = np.einsum("othwijk,ocijk->cthw", gwin, kd[:, :, ::-1, ::-1, ::-1], optimize=True)
            gx = gxp[:, pt : pt + t, ph : ph + h, pw : pw + w]
        return gx, gk

    return Tensor._from_op(out, (x, kernel), back, "conv3d")


def conv_temporal(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal temporal filter evaluated at the last frame.

    ``x`` is [T,C,H,W] and ``kernel`` is [C,kt]; kernel entry ``l`` weights
    frame ``T-1-l``. Returns [C,H,W].
    """
    if x.ndim != 4 or kernel.ndim != 2:
        raise ShapeError(f"conv_temporal: expected [T,C,H,W] and [C,kt], got {x.shape} and {kernel.shape}")
    t, c = x.shape[:2]
    kc, kt = kernel.shape
    if kc != c:
        raise ShapeError(f"conv_temporal: input has {c} channels, kernel has {kc}")
    if kt > t:
        raise ShapeError(f"conv_temporal: kernel length {kt} exceeds {t} frames")

    kd = kernel.data
    recent = x.data[t - kt :][::-1]
    out = np.einsum("lchw,cl->chw", recent, kd, optimize=True)

    def back(g: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        gk = np.einsum("lchw,chw->cl", recent, g, optimize=True) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[t - kt :] = np.einsum("chw,cl->lchw", g, kd, optimize=True)[::-1]
        return gx, gk

    return Tensor._from_op(out, (x, kernel), back, "conv_temporal")


@lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int, antialias: bool, dtype: str) -> np.ndarray:
    scale = n_in / n_out
    support = max(scale, 1.0) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.arange(n_in)
    weights = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centers[:, None]) / support)
    weights /= weights.sum(axis=1, keepdims=True)
    weights = weights.astype(dtype)
    weights.setflags(write=False)
    return weights


def bilinear_matrix(n_in: int, n_out: int, antialias: bool = True, dtype: str = "float64") -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix on half-pixel centres.

    Downscaling widens the triangle kernel by the scale factor when
    ``antialias`` is set; equal sizes give the identity.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"cannot resample {n_in} samples to {n_out}")
    return _bilinear_matrix(n_in, n_out, antialias, np.dtype(dtype).name)


def resize_bilinear(x: Tensor, size: tuple[int, int], antialias: bool = True) -> Tensor:
    """Resize every channel of ``x`` [C,H,W] to ``size`` = (h, w)."""
    if x.ndim != 3:
        raise ShapeError(f"resize_bilinear: expected [C,H,W], got {x.shape}")
    _, h_in, w_in = x.shape
    h_out, w_out = size
    if (h_in, w_in) == (h_out, w_out):
        return x
    ry = bilinear_matrix(h_in, h_out, antialias, x.dtype.name)
    rx = bilinear_matrix(w_in, w_out, antialias, x.dtype.name)
    out = np.einsum("oh,chw,pw->cop", ry, x.data, rx, optimize=True)

    def back(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.einsum("oh,cop,pw->chw", ry, g, rx, optimize=True),)

    return Tensor._from_op(out, (x,), back, "resize")
