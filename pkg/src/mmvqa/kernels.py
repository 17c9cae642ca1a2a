"""Backend selection for the hot loops.

The compiled Cython module is used when importable; otherwise (or when the
environment sets ``MMVQA_PURE_PYTHON=1``) the numpy versions are used.
``BACKEND`` names the active choice.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("MMVQA_PURE_PYTHON", "") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def im2col(x, k, stride, pad):
    """Unfold NHWC patches into rows of shape ``(k*k*C,)``."""
    return _impl.im2col(np.ascontiguousarray(x), int(k), int(stride), int(pad))


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an NHWC array."""
    return _impl.col2im(np.ascontiguousarray(cols), tuple(int(s) for s in shape), int(k), int(stride), int(pad))


def bilinear_sample(img, ys, xs):
    """Bilinear lookup of an HWC image at float coordinates, edges clamped."""
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    return _impl.bilinear_sample(np.ascontiguousarray(img), ys, xs)
