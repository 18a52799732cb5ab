"""Differentiable primitives on :class:`~mae_ast.nn.tensor.Tensor`.

Each op computes its forward value with numpy, checks it is finite, and
returns a Tensor whose backward closure maps the output gradient to one
gradient per parent. Fused ops (layer norm, softmax, cross entropy) keep
their own saved state rather than composing smaller ops.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, check_finite

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _out(data: np.ndarray, parents, backward, op: str, saved=()) -> Tensor:
    check_finite(data, op)
    return Tensor(data, _parents=parents, _backward=backward, _op=op, _saved=saved)


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _out(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _out(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _out(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = x.dtype.type(s)

    def backward(g):
        return (g * s,)

    return _out(x.data * s, (x,), backward, "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    cdf = cdf.astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT_2PI)
        return (g * (cdf + xd * pdf),)

    return _out(xd * cdf, (x,), backward, "gelu", saved=(cdf,))


# linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy broadcasting over leading dims."""
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _out(ad @ bd, (a, b), backward, "matmul")


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [..., d_in], ``w`` [d_in, d_out], ``b`` [d_out]."""
    x = _t(x, w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y += b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _out(y, parents, backward, "linear")


# shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return _out(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _out(x.data.transpose(axes), (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _out(x.data[index], (x,), backward, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2 per batch item: x [B, N, d], idx [B, K] -> [B, K, d]."""
    x = _t(x)
    idx = np.asarray(idx)
    src_shape, dtype = x.shape, x.dtype
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        # row indices are unique per batch item
        np.put_along_axis(full, idx[..., None], g, axis=-2)
        return (full,)

    return _out(out, (x,), backward, "gather_rows")


def assemble_rows(values: Tensor, fill: Tensor, value_idx: np.ndarray, fill_idx: np.ndarray) -> Tensor:
    """Interleave ``values`` [B, K, d] at ``value_idx`` with the shared vector ``fill`` [d]
    broadcast to ``fill_idx``; the two index sets must partition 0..N-1 per batch item."""
    value_idx = np.asarray(value_idx)
    fill_idx = np.asarray(fill_idx)
    B, K, d = values.shape
    N = K + fill_idx.shape[-1]
    out = np.empty((B, N, d), dtype=values.dtype)
    np.put_along_axis(out, value_idx[..., None], values.data, axis=-2)
    np.put_along_axis(out, fill_idx[..., None], np.broadcast_to(fill.data, (B, fill_idx.shape[-1], d)), axis=-2)

    def backward(g):
        gv = np.take_along_axis(g, value_idx[..., None], axis=-2)
        gf = np.take_along_axis(g, fill_idx[..., None], axis=-2).sum(axis=(0, 1))
        return gv, gf

    return _out(out, (values, fill), backward, "assemble_rows")


# reductions --------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        return (np.broadcast_to(g, shape).astype(dtype),)

    return _out(np.asarray(x.data.sum(), dtype=dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    shape, dtype = x.shape, x.dtype
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / dtype.type(count), shape).astype(dtype),)

    return _out(np.asarray(x.data.mean(axis=axis), dtype=dtype), (x,), backward, "mean")


# normalization and activations ------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    del xc
    gd = gamma.data
    y = xhat * gd + beta.data

    def backward(g):
        d = xhat.shape[-1]
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, ggamma, gbeta

    return _out(y, (x, gamma, beta), backward, "layer_norm", saved=(xhat, rstd))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    probs = z

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _out(probs, (x,), backward, "softmax")


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# losses ---------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over every element of ``(pred - target)**2``; ``target`` is a constant."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        return (diff * (2.0 * g / n),)

    return _out(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred,), backward, "mse", saved=(diff,))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``) over the last axis."""
    labels = np.asarray(labels)
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    n = picked.size

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, labels[..., None], np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1
        )
        return (grad * (g / n),)

    return _out(np.asarray(-picked.mean(), dtype=logits.dtype), (logits,), backward, "cross_entropy", saved=(logp,))
