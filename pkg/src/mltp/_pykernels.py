"""Pure numpy implementations of the convolution and pooling kernels.

These are the reference fallback for the compiled ``_ckernels`` module and
share its signatures exactly.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            cols[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    ho, wo = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * ho
        for j in range(kw):
            j_end = j + stride * wo
            out[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def pool_argmax(x, window, stride):
    """Windowed max over the last two axes.

    Returns the maxima and the row-major flat index (within one H*W plane)
    of the first maximal element of each window.
    """
    n, c, h, w = x.shape
    ho, wo = _out_size(h, window, stride, 0), _out_size(w, window, stride, 0)
    best = None
    best_idx = None
    rows = np.arange(ho)[:, None] * stride
    cols = np.arange(wo)[None, :] * stride
    for i in range(window):
        for j in range(window):
            cand = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            flat = (rows + i) * w + (cols + j)
            if best is None:
                best = cand.copy()
                best_idx = np.broadcast_to(flat, cand.shape).astype(np.int64)
            else:
                # strict comparison keeps the earliest index on ties
                better = cand > best
                best = np.where(better, cand, best)
                best_idx = np.where(better, flat, best_idx)
    return np.ascontiguousarray(best), np.ascontiguousarray(best_idx)


def pool_scatter(g, idx, h, w):
    n, c = g.shape[:2]
    out = np.zeros((n * c, h * w), dtype=g.dtype)
    flat_g = g.reshape(n * c, -1)
    flat_idx = idx.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), flat_idx.shape[1])
    np.add.at(out, (rows, flat_idx.ravel()), flat_g.ravel())
    return out.reshape(n, c, h, w)
