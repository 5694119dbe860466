import os
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fmapguard import kernels
from oracles import naive_conv2d, naive_pool


def rand(rng, *shape, dtype=np.float32):
    return rng.standard_normal(shape).astype(dtype)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_loops(backend, stride):
    rng = np.random.default_rng(1)
    x, w, b = rand(rng, 3, 2, 7, 6), rand(rng, 4, 2, 3, 2), rand(rng, 4)
    assert_allclose(kernels.conv2d(x, w, b, stride), naive_conv2d(x, w, b, stride), atol=1e-5)


def test_conv2d_grads_are_adjoint(backend):
    # <conv(x), g> is bilinear; check grad_input and grad_weight against loops
    rng = np.random.default_rng(2)
    x, w = rand(rng, 2, 3, 6, 5, dtype=np.float64), rand(rng, 4, 3, 2, 3, dtype=np.float64)
    b = np.zeros(4)
    for stride in (1, 2):
        y = kernels.conv2d(x, w, b, stride)
        g = rand(rng, *y.shape, dtype=np.float64)
        gx = kernels.conv2d_grad_input(g, w, 6, 5, stride)
        gw = kernels.conv2d_grad_weight(x, g, 2, 3, stride)
        ex = np.zeros_like(x)
        ew = np.zeros_like(w)
        for i in range(2):
            for f in range(4):
                for yy in range(y.shape[2]):
                    for zz in range(y.shape[3]):
                        ys, zs = yy * stride, zz * stride
                        ex[i, :, ys:ys + 2, zs:zs + 3] += g[i, f, yy, zz] * w[f]
                        ew[f] += g[i, f, yy, zz] * x[i, :, ys:ys + 2, zs:zs + 3]
        assert_allclose(gx, ex, atol=1e-10)
        assert_allclose(gw, ew, atol=1e-10)


def test_pooling_matches_loops(backend):
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 3, 7, 7)
    for k, s in ((2, 2), (3, 2), (2, 1)):
        out, idx = kernels.maxpool2d(x, k, s)
        assert_array_equal(out, naive_pool(x, k, s, np.max).astype(np.float32))
        assert idx.min() >= 0 and idx.max() < k * k
        assert_allclose(kernels.avgpool2d(x, k, s), naive_pool(x, k, s, np.mean), atol=1e-6)


def test_maxpool_ties_take_first(backend):
    x = np.zeros((1, 1, 2, 2), np.float32)
    out, idx = kernels.maxpool2d(x, 2, 2)
    assert out[0, 0, 0, 0] == 0 and idx[0, 0, 0, 0] == 0
    g = np.ones((1, 1, 1, 1), np.float32)
    gx = kernels.maxpool2d_grad(g, idx, 2, 2, 2, 2)
    assert_array_equal(gx[0, 0], [[1, 0], [0, 0]])


def test_pool_grads(backend):
    rng = np.random.default_rng(4)
    x = rand(rng, 1, 2, 6, 6, dtype=np.float64)
    g = rand(rng, 1, 2, 3, 3, dtype=np.float64)
    _, idx = kernels.maxpool2d(x, 2, 2)
    gx = kernels.maxpool2d_grad(g, idx, 6, 6, 2, 2)
    # max-pool routes each gradient to exactly one input
    assert_allclose(gx.sum(), g.sum())
    assert np.count_nonzero(gx) == np.count_nonzero(g)
    ga = kernels.avgpool2d_grad(g, 6, 6, 2, 2)
    assert_allclose(ga, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4)


def test_dense_kernels(backend):
    rng = np.random.default_rng(5)
    x, w, b = rand(rng, 5, 7, dtype=np.float64), rand(rng, 3, 7, dtype=np.float64), rand(rng, 3, dtype=np.float64)
    assert_allclose(kernels.dense(x, w, b), x @ w.T + b)
    g = rand(rng, 5, 3, dtype=np.float64)
    assert_allclose(kernels.dense_grad_input(g, w), g @ w)
    assert_allclose(kernels.dense_grad_weight(x, g), g.T @ x)


@pytest.mark.parametrize("n", [1, 3, 17, 64])
def test_batch_invariance(backend, n):
    # a sample's output never depends on what else is in the batch
    rng = np.random.default_rng(6)
    x, w, b = rand(rng, 64, 3, 8, 8), rand(rng, 5, 3, 3, 3), rand(rng, 5)
    full = kernels.conv2d(x, w, b, 1)
    assert_array_equal(kernels.conv2d(x[:n], w, b, 1), full[:n])
    assert_array_equal(kernels.conv2d(x[n - 1:n], w, b, 1), full[n - 1:n])
    flat = full.reshape(64, -1)
    dw, db = rand(rng, 10, flat.shape[1]), rand(rng, 10)
    d_full = kernels.dense(flat, dw, db)
    assert_array_equal(kernels.dense(np.ascontiguousarray(flat[:n]), dw, db), d_full[:n])
    assert_array_equal(kernels.avgpool2d(x[:n], 2, 2), kernels.avgpool2d(x, 2, 2)[:n])


@pytest.mark.skipif(len(kernels.available_backends()) < 2, reason="numba unavailable")
def test_backends_agree():
    rng = np.random.default_rng(7)
    x, w, b = rand(rng, 4, 3, 9, 9), rand(rng, 6, 3, 3, 3), rand(rng, 6)
    outs = {}
    for name in ("numba", "numpy"):
        kernels.set_backend(name)
        y = kernels.conv2d(x, w, b, 1)
        outs[name] = (y, kernels.maxpool2d(y, 2, 2)[0], kernels.conv2d_grad_input(y, w, 11, 11, 1))
    kernels.set_backend("numba")
    for a, c in zip(*outs.values()):
        assert_allclose(a, c, rtol=1e-5, atol=1e-5)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_env_flag_selects_numpy():
    env = dict(os.environ, FMAPGUARD_KERNELS="numpy")
    out = subprocess.run([sys.executable, "-c", "from fmapguard import kernels; print(kernels.get_backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
