"""Differentiable operations on :class:`~mmvqa.numerics.tensor.Tensor`.

Every op computes its forward value eagerly and, when a tape is active and
some input requires gradients, records a backward rule. Binary elementwise
ops require identical shapes; the only broadcasting is the trailing-axis
affine of :func:`add_bias`, :func:`linear` and :func:`layer_norm`.
"""
from __future__ import annotations

import math

import numpy as np

from .. import kernels
from ..errors import ConfigError, EmptyLossError, ShapeError
from .tensor import Tensor, active_tape, check_finite

IGNORE_INDEX = -100
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _emit(data, inputs, backward, op):
    check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward, op)
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _constant(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    b = _constant(b, a)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    b = _constant(b, a)
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c):
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x, b):
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


def relu(x):
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x, approximate=True):
    """Gaussian error linear unit; tanh approximation unless ``approximate=False``."""
    v = x.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (v + 0.044715 * v**3)
        th = np.tanh(inner)
        out = 0.5 * v * (1.0 + th)

        def backward(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * v**2)
            return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th**2) * dinner),)

    else:
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(v / math.sqrt(2.0)))
        out = v * cdf

        def backward(g):
            pdf = np.exp(-0.5 * v**2) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + v * pdf),)

    return _emit(out.astype(v.dtype), (x,), backward, "gelu")


def dropout(x, rate, rng, training=True):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- shape ------------------------------------------------------------------


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit(data, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis):
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_axis(x, axis, start, stop):
    """``x`` restricted to ``start:stop`` along ``axis``."""
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.data[idx]), (x,), backward, "slice")


def embedding(table, ids):
    """Gather rows of ``table`` (V×D) by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), backward, "embedding")


def take_rows(x, rows):
    """Rows of a 2-D tensor (e.g. masked positions of a flattened batch)."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D tensor, got {x.shape}")
    return embedding(x, rows)


# -- reductions -------------------------------------------------------------


def sum(x):  # noqa: A001 - mirrors numpy naming
    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g),), "sum")


def mean(x):
    n = x.data.size
    return _emit(
        np.asarray(x.data.sum() / n, dtype=x.dtype), (x,), lambda g: (np.full_like(x.data, g / n),), "mean"
    )


def masked_mean(x, mask):
    """Mean over axis 1 of a (B, T, D) tensor, counting only ``mask`` positions."""
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: mask {m.shape} vs tensor {x.shape}")
    counts = m.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ShapeError("masked_mean: a row has no unmasked positions")
    w = (m / counts)[:, :, None]
    out = (x.data * w).sum(axis=1)
    return _emit(out, (x,), lambda g: (g[:, None, :] * w,), "masked_mean")


def global_avg_pool(x):
    """Mean over the spatial axes of an NHWC tensor → (N, C)."""
    n, h, w, c = x.shape
    area = h * w
    return _emit(
        x.data.mean(axis=(1, 2)),
        (x,),
        lambda g: (np.broadcast_to(g[:, None, None, :] / x.dtype.type(area), x.shape).copy(),),
        "global_avg_pool",
    )


# -- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading (batch) axes must match exactly."""
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _emit(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x, w, b=None):
    """Affine map over the trailing axis: ``x @ w + b`` with ``w`` of shape (D_in, D_out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _emit(out.reshape(*lead, w.shape[1]), inputs, backward, "linear")


def conv2d(x, w, b, stride=1, pad=0):
    """2-D convolution of an NHWC tensor with a (k, k, C_in, C_out) kernel."""
    k, k2, cin, cout = w.shape
    if k != k2 or x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    n, h, wd, _ = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k} stride {stride}")
    cols = kernels.im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        dcols = g2 @ wmat.T
        dx = kernels.col2im(dcols, x.shape, k, stride, pad)
        return dx, (cols.T @ g2).reshape(w.shape), g2.sum(axis=0)

    return _emit(out.reshape(n, oh, ow, cout), (x, w, b), backward, "conv2d")


# -- normalisation and probabilities ----------------------------------------


def softmax(x, axis=-1, mask=None):
    """Max-subtracted softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) marks entries that may receive
    probability; masked entries get exactly zero, as if their logits were
    minus infinity.
    """
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True) if mask is None else None
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shifted = np.where(mask, x.data, -np.inf)
        z = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), backward, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    if eps <= 0:
        raise ConfigError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs trailing axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(out, (x, gamma, beta), backward, "layer_norm")


def cross_entropy(logits, targets, ignore_index=IGNORE_INDEX):
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, c) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, c = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    keep = targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy: every row is ignored (empty loss)")
    if (targets[keep] < 0).any() or (targets[keep] >= c).any():
        raise ShapeError(f"cross_entropy: target outside [0, {c})")
    rows = np.nonzero(keep)[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[rows, targets[rows]].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~keep] = 0.0
        return (grad * (g / count),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
