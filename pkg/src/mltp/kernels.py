"""Backend selection for the convolution/pooling kernels.

The compiled extension is used when it imports; otherwise (or when the
``MLTP_PURE_PYTHON`` environment variable is set to a non-empty value other
than ``0``) the numpy fallback is used. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from . import _pykernels

_force_python = os.environ.get("MLTP_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def available_backends():
    names = {"python": _pykernels}
    try:
        from . import _ckernels
        names["cython"] = _ckernels
    except ImportError:
        pass
    return names


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    return _impl.col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad)


def pool_argmax(x, window, stride):
    return _impl.pool_argmax(np.ascontiguousarray(x), window, stride)


def pool_scatter(g, idx, h, w):
    return _impl.pool_scatter(np.ascontiguousarray(g), np.ascontiguousarray(idx), h, w)


def pool_gather(h, idx):
    n, c = idx.shape[:2]
    flat = h.reshape(n, c, -1)
    return np.take_along_axis(flat, idx.reshape(n, c, -1), axis=2).reshape(idx.shape)
