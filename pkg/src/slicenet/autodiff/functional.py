"""Differentiable layer kernels: convolution, pooling, normalization, LSTM, losses."""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from ..errors import ConfigurationError, EmptySetError
from .tensor import Tensor, as_tensor, canonical_sum, make_node, matmul, sigmoid, tanh


def _tuple(v, n):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * n


# -- convolution -------------------------------------------------------------

def _shifted(offs, stride, out_sp):
    return tuple(slice(o, o + st * (m - 1) + 1, st) for o, st, m in zip(offs, stride, out_sp))


def conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None, stride=1, padding=0) -> Tensor:
    """N-dimensional cross-correlation lowered to a single matrix product.

    ``x`` is ``[N, C_in, *spatial]`` and ``weight`` is ``[C_out, C_in, *kernel]``.
    The column matrix is laid out ``[kernel offset, C_in, N, *out]`` so each
    offset is one strided copy.
    """
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise ConfigurationError(f"expected {nd + 2}-d input, got shape {x.shape}")
    n, c_in = x.shape[:2]
    c_out, w_in = weight.shape[:2]
    if c_in != w_in:
        raise ConfigurationError(f"input has {c_in} channels but weight expects {w_in}")
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    if min(stride) < 1:
        raise ConfigurationError("stride must be >= 1")
    kernel = weight.shape[2:]

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    padded = xp.shape[2:]
    if any(k > s for k, s in zip(kernel, padded)):
        raise ConfigurationError(f"kernel {kernel} larger than padded input {padded}")
    out_sp = tuple((s - k) // st + 1 for s, k, st in zip(padded, kernel, stride))
    offsets = list(product(*(range(k) for k in kernel)))
    n_k = len(offsets)
    all_ = (slice(None), slice(None))

    xt = xp.swapaxes(0, 1)                                    # [C_in, N, *padded] view
    cols = np.empty((n_k, c_in, n) + out_sp, dtype=xp.dtype)
    for j, offs in enumerate(offsets):
        cols[j] = xt[all_ + _shifted(offs, stride, out_sp)]
    cols = cols.reshape(n_k * c_in, -1)
    # weight [C_out, C_in, *k] -> [C_out, k, C_in] to match the column order
    wmat = np.moveaxis(weight.data.reshape(c_out, c_in, n_k), 2, 1).reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape((c_out, n) + out_sp).swapaxes(0, 1))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(c_out, -1)
        gw = None
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(c_out, n_k, c_in)
            gw = np.moveaxis(gw, 1, 2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape((n_k, c_in, n) + out_sp)
            gxp = np.zeros((c_in, n) + padded, dtype=xp.dtype)
            for j, offs in enumerate(offsets):
                gxp[all_ + _shifted(offs, stride, out_sp)] += gcols[j]
            crop = tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
            gx = gxp[all_ + crop].swapaxes(0, 1)
        grads = (gx, gw)
        if bias is not None:
            grads += (gmat.sum(axis=1),)
        return grads

    return make_node(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if weight.ndim != 4:
        raise ConfigurationError(f"conv2d weight must be 4-d, got {weight.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    if weight.ndim != 5:
        raise ConfigurationError(f"conv3d weight must be 5-d, got {weight.shape}")
    return conv_nd(x, weight, bias, stride, padding)


# -- pooling ---------------------------------------------------------------

def max_pool_nd(x: Tensor, nd: int, window, stride=None) -> Tensor:
    """Max pooling over the trailing ``nd`` axes; ties send the gradient to the first cell."""
    window = _tuple(window, nd)
    stride = window if stride is None else _tuple(stride, nd)
    spatial = x.shape[2:]
    if len(spatial) != nd:
        raise ConfigurationError(f"expected {nd} spatial dims, got shape {x.shape}")
    if any(w > s for w, s in zip(window, spatial)):
        raise ConfigurationError(f"pooling window {window} larger than input {spatial}")
    out_sp = tuple((s - w) // st + 1 for s, w, st in zip(spatial, window, stride))
    all_ = (slice(None), slice(None))
    views = [all_ + _shifted(offs, stride, out_sp)
             for offs in product(*(range(w) for w in window))]

    out = x.data[views[0]].copy()
    for v in views[1:]:
        np.maximum(out, x.data[v], out=out)

    overlapping = any(st < w for st, w in zip(stride, window))

    def backward(g):
        gx = np.zeros_like(x.data)
        pending = np.ones(out.shape, dtype=bool)
        for v in views:
            hit = x.data[v] == out
            hit &= pending
            pending ^= hit
            if overlapping:
                gx[v] += g * hit
            else:
                np.multiply(g, hit, out=gx[v])
        return (gx,)

    return make_node(out, (x,), backward)


def max_pool2d(x: Tensor, window=2, stride=None) -> Tensor:
    return max_pool_nd(x, 2, window, stride)


def max_pool3d(x: Tensor, window=2, stride=None) -> Tensor:
    return max_pool_nd(x, 3, window, stride)


# -- normalization -----------------------------------------------------------

def instance_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes, then affine."""
    if x.ndim < 3:
        raise ConfigurationError("instance_norm needs [N, C, *spatial] input")
    axes = tuple(range(2, x.ndim))
    m = math.prod(x.shape[2:])
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    xhat = x.data - x.data.mean(axis=axes, keepdims=True)
    flat = xhat.reshape(xhat.shape[:2] + (m,))
    var = np.einsum("ncs,ncs->nc", flat, flat).reshape(xhat.shape[:2] + (1,) * len(axes)) / m
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat *= inv
    gv = gain.data.reshape(bshape)
    out = xhat * gv
    out += shift.data.reshape(bshape)

    def backward(g):
        gxh = np.einsum("ncs,ncs->nc", g.reshape(flat.shape), xhat.reshape(flat.shape))
        gsum = g.sum(axis=axes)
        gg, gs = gxh.sum(axis=0), gsum.sum(axis=0)
        # d/dx of gain * xhat, written per (sample, channel)
        c1 = (gsum / m).reshape(var.shape)
        c2 = (gxh / m).reshape(var.shape)
        gx = g - c1
        gx -= xhat * c2
        gx *= inv * gv
        return gx, gg, gs

    return make_node(out.astype(x.dtype, copy=False), (x, gain, shift), backward)


# -- dense layers ------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[F_out, F_in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(
            f"linear: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    out = matmul(x, weight.T)
    return out + bias if bias is not None else out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax. The normalizer uses an order-independent sum."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / canonical_sum(e, axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), backward)


def lstm_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, w_ih: Tensor, w_hh: Tensor,
              bias: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update. Gate rows of the weights are ordered input, forget, cell, output."""
    hidden = h_prev.shape[-1]
    if w_ih.shape != (4 * hidden, x_t.shape[-1]) or w_hh.shape != (4 * hidden, hidden):
        raise ConfigurationError(
            f"lstm_step: weights {w_ih.shape}/{w_hh.shape} do not fit input {x_t.shape}, hidden {hidden}")
    if c_prev.shape != h_prev.shape:
        raise ConfigurationError("lstm_step: cell and hidden state shapes differ")
    gates = linear(x_t, w_ih) + linear(h_prev, w_hh) + bias
    i = sigmoid(gates[:, 0:hidden])
    f = sigmoid(gates[:, hidden:2 * hidden])
    g = tanh(gates[:, 2 * hidden:3 * hidden])
    o = sigmoid(gates[:, 3 * hidden:])
    c_t = f * c_prev + i * g
    h_t = o * tanh(c_t)
    return h_t, c_t


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, pred)
    if pred.size == 0:
        raise EmptySetError("mse_loss on an empty batch")
    if pred.shape != target.shape:
        raise ConfigurationError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


# -- set reductions (axis 0 is the set axis) ------------------------------------

def set_mean(x: Tensor) -> Tensor:
    """Mean over the rows of ``x``; bitwise invariant to row order."""
    p = x.shape[0]
    if p == 0:
        raise EmptySetError("cannot pool an empty set")
    out = canonical_sum(x.data, 0) / np.asarray(p, dtype=x.dtype)
    return make_node(out.astype(x.dtype, copy=False), (x,),
                     lambda g: (np.broadcast_to(g / p, x.shape).astype(x.dtype),))


def set_max(x: Tensor) -> Tensor:
    if x.shape[0] == 0:
        raise EmptySetError("cannot pool an empty set")
    return x.max(axis=0)


def set_weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[j] = sum_i weights[i, j] * values[i]`` for weights ``[p, m]`` and values ``[p, e]``."""
    w, v = weights.data, values.data
    out = canonical_sum(w[:, :, None] * v[:, None, :], 0)

    def backward(g):
        return v @ g.T, w @ g

    return make_node(out, (weights, values), backward)
