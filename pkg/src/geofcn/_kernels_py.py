"""Pure-numpy reference implementations of the hot kernels.

These are used when the compiled ``_kernels`` extension is unavailable, and
serve as the cross-check for it. Accumulation order in :func:`col2im` matches
the compiled version so both backends produce bit-identical results.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` of shape (B, L, H, W) into a (B*Ho*Wo, L*kh*kw) matrix."""
    b, l, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, L, Ho, Wo, kh, kw) -> (B, Ho, Wo, L, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5), dtype=np.float64)
    return cols.reshape(b * ho * wo, l * kh * kw)


def col2im(cols, shape, kh, kw, stride, pad):
    """Scatter-add the rows of ``cols`` back onto an image of ``shape``."""
    b, l, h, w = shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    c = cols.reshape(b, ho, wo, l, kh, kw)
    out = np.zeros((b, l, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for m in range(kh):
        for n in range(kw):
            out[:, :, m : m + (ho - 1) * stride + 1 : stride, n : n + (wo - 1) * stride + 1 : stride] += (
                c[:, :, :, :, m, n].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def median3x3(plane):
    """3x3 median of a 2-D array with edge replication at the borders."""
    p = np.pad(np.asarray(plane, dtype=np.float64), 1, mode="edge")
    win = sliding_window_view(p, (3, 3)).reshape(plane.shape[0], plane.shape[1], 9)
    return np.median(win, axis=2)


def confusion_counts(truth, pred, num_classes):
    """C x C counts, rows indexed by truth and columns by prediction."""
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)
