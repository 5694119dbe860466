"""Numba kernels for the inference engine.

Every output element is produced by exactly one loop nest with a fixed
reduction order, so results do not depend on batch size or thread count.
Inputs are expected to be already padded; no fastmath (reassociation would
break bitwise reproducibility).
"""
import os

import numpy as np
from numba import config, njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # skip TBB: older system TBB builds make numba warn on first parallel call
    config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


@njit(parallel=True, cache=True)
def conv2d(x, w, b, stride):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.empty((n, o, oh, ow), dtype=x.dtype)
    zero = np.zeros(1, dtype=x.dtype)[0]
    for i in prange(n):
        for f in range(o):
            for y in range(oh):
                for z in range(ow):
                    acc = zero
                    y0 = y * stride
                    z0 = z * stride
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[i, ci, y0 + u, z0 + v] * w[f, ci, u, v]
                    out[i, f, y, z] = acc + b[f]
    return out


@njit(parallel=True, cache=True)
def conv2d_grad_input(g, w, h, wd, stride):
    n, o, oh, ow = g.shape
    _, c, kh, kw = w.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    for i in prange(n):
        for f in range(o):
            for y in range(oh):
                for z in range(ow):
                    gv = g[i, f, y, z]
                    y0 = y * stride
                    z0 = z * stride
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                gx[i, ci, y0 + u, z0 + v] += gv * w[f, ci, u, v]
    return gx


@njit(parallel=True, cache=True)
def conv2d_grad_weight(x, g, kh, kw, stride):
    n, c, _, _ = x.shape
    _, o, oh, ow = g.shape
    gw = np.zeros((o, c, kh, kw), dtype=g.dtype)
    for f in prange(o):
        for i in range(n):
            for y in range(oh):
                for z in range(ow):
                    gv = g[i, f, y, z]
                    y0 = y * stride
                    z0 = z * stride
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                gw[f, ci, u, v] += gv * x[i, ci, y0 + u, z0 + v]
    return gw


@njit(parallel=True, cache=True)
def maxpool2d(x, k, stride):
    n, c, h, wd = x.shape
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    idx = np.empty((n, c, oh, ow), dtype=np.int64)
    for i in prange(n):
        for ci in range(c):
            for y in range(oh):
                for z in range(ow):
                    y0 = y * stride
                    z0 = z * stride
                    best = x[i, ci, y0, z0]
                    arg = 0
                    for u in range(k):
                        for v in range(k):
                            val = x[i, ci, y0 + u, z0 + v]
                            if val > best:
                                best = val
                                arg = u * k + v
                    out[i, ci, y, z] = best
                    idx[i, ci, y, z] = arg
    return out, idx


@njit(parallel=True, cache=True)
def maxpool2d_grad(g, idx, h, wd, k, stride):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    for i in prange(n):
        for ci in range(c):
            for y in range(oh):
                for z in range(ow):
                    a = idx[i, ci, y, z]
                    gx[i, ci, y * stride + a // k, z * stride + a % k] += g[i, ci, y, z]
    return gx


@njit(parallel=True, cache=True)
def avgpool2d(x, k, stride):
    n, c, h, wd = x.shape
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    zero = np.zeros(1, dtype=x.dtype)[0]
    inv = np.full(1, 1.0 / (k * k), dtype=x.dtype)[0]
    for i in prange(n):
        for ci in range(c):
            for y in range(oh):
                for z in range(ow):
                    acc = zero
                    for u in range(k):
                        for v in range(k):
                            acc += x[i, ci, y * stride + u, z * stride + v]
                    out[i, ci, y, z] = acc * inv
    return out


@njit(parallel=True, cache=True)
def avgpool2d_grad(g, h, wd, k, stride):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    inv = np.full(1, 1.0 / (k * k), dtype=g.dtype)[0]
    for i in prange(n):
        for ci in range(c):
            for y in range(oh):
                for z in range(ow):
                    gv = g[i, ci, y, z] * inv
                    for u in range(k):
                        for v in range(k):
                            gx[i, ci, y * stride + u, z * stride + v] += gv
    return gx


@njit(parallel=True, cache=True)
def dense(x, w, b):
    n, k = x.shape
    o = w.shape[0]
    out = np.empty((n, o), dtype=x.dtype)
    zero = np.zeros(1, dtype=x.dtype)[0]
    for i in prange(n):
        for f in range(o):
            acc = zero
            for j in range(k):
                acc += x[i, j] * w[f, j]
            out[i, f] = acc + b[f]
    return out


@njit(parallel=True, cache=True)
def dense_grad_input(g, w):
    n, o = g.shape
    k = w.shape[1]
    gx = np.zeros((n, k), dtype=g.dtype)
    for i in prange(n):
        for f in range(o):
            gv = g[i, f]
            for j in range(k):
                gx[i, j] += gv * w[f, j]
    return gx


@njit(cache=True)
def dense_grad_weight(x, g):
    n, k = x.shape
    o = g.shape[1]
    gw = np.zeros((o, k), dtype=g.dtype)
    for i in range(n):
        for f in range(o):
            gv = g[i, f]
            for j in range(k):
                gw[f, j] += gv * x[i, j]
    return gw
