"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def naive_conv2d(x, w, b, stride=1, padding=0):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((n, c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, oh, ow))
    for i in range(n):
        for o in range(c_out):
            for y in range(oh):
                for z in range(ow):
                    acc = b[o]
                    for c in range(c_in):
                        for a in range(kh):
                            for e in range(kw):
                                acc += xp[i, c, y * stride + a, z * stride + e] * w[o, c, a, e]
                    out[i, o, y, z] = acc
    return out


def naive_conv3d(x, w, b, stride=1, padding=0):
    n, c_in = x.shape[:2]
    sp = x.shape[2:]
    c_out = w.shape[0]
    k = w.shape[2:]
    xp = np.zeros((n, c_in) + tuple(s + 2 * padding for s in sp))
    xp[:, :, padding:padding + sp[0], padding:padding + sp[1], padding:padding + sp[2]] = x
    osp = tuple((s + 2 * padding - kk) // stride + 1 for s, kk in zip(sp, k))
    out = np.zeros((n, c_out) + osp)
    for i in range(n):
        for o in range(c_out):
            for p in range(osp[0]):
                for q in range(osp[1]):
                    for r in range(osp[2]):
                        acc = b[o]
                        for c in range(c_in):
                            patch = xp[i, c, p * stride:p * stride + k[0],
                                       q * stride:q * stride + k[1],
                                       r * stride:r * stride + k[2]]
                            for a in range(k[0]):
                                for e in range(k[1]):
                                    for f in range(k[2]):
                                        acc += patch[a, e, f] * w[o, c, a, e, f]
                        out[i, o, p, q, r] = acc
    return out


def naive_max_pool2d(x, window, stride):
    n, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(n):
        for j in range(c):
            for y in range(oh):
                for z in range(ow):
                    best = -math.inf
                    for a in range(window):
                        for e in range(window):
                            best = max(best, x[i, j, y * stride + a, z * stride + e])
                    out[i, j, y, z] = best
    return out


def naive_max_pool3d(x, window, stride):
    n, c = x.shape[:2]
    osp = tuple((s - window) // stride + 1 for s in x.shape[2:])
    out = np.zeros((n, c) + osp)
    for idx in np.ndindex(*((n, c) + osp)):
        i, j, p, q, r = idx
        best = -math.inf
        for a in range(window):
            for e in range(window):
                for f in range(window):
                    best = max(best, x[i, j, p * stride + a, q * stride + e, r * stride + f])
        out[idx] = best
    return out


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def scalar_lstm(x, h, c, w_ih, w_hh, bias):
    """LSTM step evaluated one scalar at a time with math.exp / math.tanh."""
    hidden = len(h)

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    pre = []
    for r in range(4 * hidden):
        s = bias[r]
        for j in range(len(x)):
            s += w_ih[r][j] * x[j]
        for j in range(hidden):
            s += w_hh[r][j] * h[j]
        pre.append(s)
    h_new, c_new = [], []
    for u in range(hidden):
        i = sig(pre[u])
        f = sig(pre[hidden + u])
        g = math.tanh(pre[2 * hidden + u])
        o = sig(pre[3 * hidden + u])
        cu = f * c[u] + i * g
        c_new.append(cu)
        h_new.append(o * math.tanh(cu))
    return h_new, c_new


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
