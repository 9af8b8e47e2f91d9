"""Hot loops for convolution: im2col / col2im.

Two interchangeable implementations are provided. The numba path is used
when numba imports and ``ANODFD_NUMBA`` is not ``0``; otherwise the pure
numpy path runs. Both produce identical layouts:

    cols[(b*Ho + oy)*Wo + ox, (c*kh + i)*kw + j] = xpad[b, c, oy*s + i, ox*s + j]
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def im2col_numpy(x, kh, kw, stride, pad):
    B, C, H, W = x.shape
    Ho, Wo = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # B, C, Ho, Wo, kh, kw -> B, Ho, Wo, C, kh, kw
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    B, C, H, W = x_shape
    Ho, Wo = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
    c6 = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c6[:, :, i, j]
    return out[:, :, pad : pad + H, pad : pad + W]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, Ho, Wo):
        B, C, H, W = x.shape
        cols = np.zeros((B * Ho * Wo, C * kh * kw), dtype=x.dtype)
        for b in range(B):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (b * Ho + oy) * Wo + ox
                    for c in range(C):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= H:
                                continue
                            base = (c * kh + i) * kw
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= xx < W:
                                    cols[row, base + j] = x[b, c, y, xx]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, B, C, H, W, kh, kw, stride, pad, Ho, Wo):
        out = np.zeros((B, C, H, W), dtype=cols.dtype)
        for b in range(B):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (b * Ho + oy) * Wo + ox
                    for c in range(C):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= H:
                                continue
                            base = (c * kh + i) * kw
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= xx < W:
                                    out[b, c, y, xx] += cols[row, base + j]
        return out

    def im2col_numba(x, kh, kw, stride, pad):
        B, C, H, W = x.shape
        Ho, Wo = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
        return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, Ho, Wo)

    def col2im_numba(cols, x_shape, kh, kw, stride, pad):
        B, C, H, W = x_shape
        Ho, Wo = out_size(H, kh, stride, pad), out_size(W, kw, stride, pad)
        return _col2im_nb(np.ascontiguousarray(cols), B, C, H, W, kh, kw, stride, pad, Ho, Wo)

else:  # pragma: no cover
    im2col_numba = im2col_numpy
    col2im_numba = col2im_numpy


_BACKENDS = {
    "numpy": (im2col_numpy, col2im_numpy),
    "numba": (im2col_numba, col2im_numba),
}


def _default_backend():
    if os.environ.get("ANODFD_NUMBA", "1").strip() in ("0", "false", "no", "off"):
        return "numpy"
    return "numba" if HAS_NUMBA else "numpy"


_active = _default_backend()


def backend():
    """Name of the kernel backend currently in use."""
    return _active


def set_backend(name):
    """Switch kernels at runtime (benchmarks and backend-parity tests)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; expected one of {sorted(_BACKENDS)}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _active = name


def im2col(x, kh, kw, stride, pad):
    return _BACKENDS[_active][0](x, kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    return _BACKENDS[_active][1](cols, x_shape, kh, kw, stride, pad)
