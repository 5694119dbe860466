"""Pure-numpy fallback kernels (same signatures as the numba path).

Forward contractions are written as an elementwise product followed by a sum
over a contiguous trailing axis instead of BLAS calls: BLAS picks gemv or gemm
(and different blockings) by batch size, which would make a sample's result
depend on what else is in the batch.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# caps the size of the broadcast product; chunking over samples only
_CHUNK_ELEMS = 1 << 22


def _windows(x, kh, kw, stride):
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)


def _chunks(n, per_sample):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    for lo in range(0, n, step):
        yield slice(lo, min(n, lo + step))


def conv2d(x, w, b, stride):
    n, c, _, _ = x.shape
    o, _, kh, kw = w.shape
    win = _windows(x, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    k = c * kh * kw
    wf = np.ascontiguousarray(w.reshape(o, k))
    out = np.empty((n, o, oh * ow), dtype=x.dtype)
    for sl in _chunks(n, o * oh * ow * k):
        cols = np.ascontiguousarray(win[sl].transpose(0, 2, 3, 1, 4, 5)).reshape(-1, oh * ow, k)
        out[sl] = (cols[:, None, :, :] * wf[None, :, None, :]).sum(axis=-1)
    out += b[None, :, None]
    return out.reshape(n, o, oh, ow)


def conv2d_grad_input(g, w, h, wd, stride):
    n, o, oh, ow = g.shape
    _, c, kh, kw = w.shape
    k = c * kh * kw
    wt = np.ascontiguousarray(w.reshape(o, k).T)  # (k, o)
    gt = np.ascontiguousarray(g.reshape(n, o, oh * ow).transpose(0, 2, 1))  # (n, p, o)
    gcols = (gt[:, :, None, :] * wt[None, None, :, :]).sum(axis=-1)  # (n, p, k)
    gcols = gcols.reshape(n, oh, ow, c, kh, kw)
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    for u in range(kh):
        for v in range(kw):
            gx[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride] += (
                gcols[:, :, :, :, u, v].transpose(0, 3, 1, 2))
    return gx


def conv2d_grad_weight(x, g, kh, kw, stride):
    win = _windows(x, kh, kw, stride)
    return np.einsum("nchwuv,nohw->ocuv", win, g).astype(g.dtype)


def maxpool2d(x, k, stride):
    n, c = x.shape[:2]
    win = _windows(x, k, k, stride)
    flat = win.reshape(n, c, win.shape[2], win.shape[3], k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int64)


def maxpool2d_grad(g, idx, h, wd, k, stride):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    ys = np.arange(oh)[:, None] * stride + idx // k
    zs = np.arange(ow)[None, :] * stride + idx % k
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(gx, (ni[:, :, None, None], ci[:, :, None, None], ys, zs), g)
    return gx


def avgpool2d(x, k, stride):
    n, c = x.shape[:2]
    win = _windows(x, k, k, stride)
    flat = np.ascontiguousarray(win).reshape(n, c, win.shape[2], win.shape[3], k * k)
    return flat.sum(axis=-1) * x.dtype.type(1.0 / (k * k))


def avgpool2d_grad(g, h, wd, k, stride):
    n, c, oh, ow = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    gs = g * g.dtype.type(1.0 / (k * k))
    for u in range(k):
        for v in range(k):
            gx[:, :, u:u + stride * (oh - 1) + 1:stride, v:v + stride * (ow - 1) + 1:stride] += gs
    return gx


def dense(x, w, b):
    n, k = x.shape
    o = w.shape[0]
    out = np.empty((n, o), dtype=x.dtype)
    for sl in _chunks(n, o * k):
        out[sl] = (x[sl, None, :] * w[None, :, :]).sum(axis=-1)
    return out + b[None, :]


def dense_grad_input(g, w):
    wt = np.ascontiguousarray(w.T)  # (k, o)
    return (g[:, None, :] * wt[None, :, :]).sum(axis=-1)


def dense_grad_weight(x, g):
    return (g.T @ x).astype(g.dtype)
