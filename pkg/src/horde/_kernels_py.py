"""Pure numpy layout kernels for NHWC convolution.

Fallback for the compiled ``_ckernels`` extension; both expose the same
two functions with identical semantics.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (B, H, W, C) into patches (B, Ho, Wo, kh*kw*C).

    Patch entries are ordered (kh, kw, C) to match an HWIO weight reshaped
    to (kh*kw*C, Cout).
    """
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, ho, wo, kh * kw * c)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to (B, H, W, C)."""
    b, h, w, c = x_shape
    ho, wo = cols.shape[1], cols.shape[2]
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return np.ascontiguousarray(out)
