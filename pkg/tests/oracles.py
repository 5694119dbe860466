"""Independent reference implementations used only by the tests.

Everything here is written as plain loops in float64 and shares no code with
the package kernels.
"""
import numpy as np

from fmapguard.nn import Network, cross_entropy


def naive_conv2d(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for y in range(oh):
                for z in range(ow):
                    acc = float(b[f])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(xp[i, ch, y * stride + u, z * stride + v]) * float(w[f, ch, u, v])
                    out[i, f, y, z] = acc
    return out


def naive_pool(x, size, stride, op):
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for i in range(n):
        for ch in range(c):
            for y in range(oh):
                for z in range(ow):
                    win = x[i, ch, y * stride:y * stride + size, z * stride:z * stride + size].astype(np.float64)
                    out[i, ch, y, z] = op(win)
    return out


def naive_forward(net: Network, x):
    """Logits and conv outputs via the naive loops above."""
    h = np.asarray(x, dtype=np.float64)
    fmaps = []
    for layer in net.layers:
        k = layer.kind
        if k == "conv2d":
            h = naive_conv2d(h, layer.weight, layer.bias, layer.stride, layer.padding)
            fmaps.append(h)
        elif k == "relu":
            h = np.maximum(h, 0.0)
        elif k == "maxpool2d":
            h = naive_pool(h, layer.size, layer.step, np.max)
        elif k == "avgpool2d":
            h = naive_pool(h, layer.size, layer.step, np.mean)
        elif k == "flatten":
            h = h.reshape(len(h), -1)
        elif k == "dense":
            h = np.array([[sum(float(layer.weight[o, j]) * float(r[j]) for j in range(len(r))) + float(layer.bias[o])
                           for o in range(layer.weight.shape[0])] for r in h])
    return h, fmaps


class CountingMacs:
    """Count MACs by instrumenting a naive execution: one tick per multiply-add."""

    def __init__(self, net: Network):
        self.net = net

    def run(self):
        per_fmap = {}
        total = 0
        shape = self.net.input_shape
        ordinal = 0
        for layer in self.net.layers:
            out = layer.output_shape(shape)
            if layer.kind == "conv2d":
                c, kh, kw = layer.in_channels, *layer.kernel
                for f in range(out[0]):
                    ticks = 0
                    for _y in range(out[1]):
                        for _z in range(out[2]):
                            for _ in range(c * kh * kw):
                                ticks += 1
                    per_fmap[(ordinal, f)] = ticks
                    total += ticks
                ordinal += 1
            elif layer.kind == "dense":
                for _o in range(out[0]):
                    for _j in range(shape[0]):
                        total += 1
            shape = out
        return per_fmap, total


def fd_fmap_grads(net: Network, x, objective_fn, h=1e-6, kink_tol=1e-4):
    """Central differences of objective_fn(logits) w.r.t. every conv output neuron.

    The neuron is perturbed in place through a hook and the rest of the
    network reruns in float64. Returns ({ordinal: grad}, {ordinal: kink mask}).
    A neuron is flagged as a kink when its forward and backward one-sided
    slopes disagree by more than ``kink_tol`` (relative, floor 1): the
    objective is not differentiable there (ReLU zero or max-pool tie).
    """
    from fmapguard.nn import propagate

    x = np.asarray(x, dtype=np.float64)[None]
    logits0, base_fmaps, _ = propagate(net, x)
    f0 = objective_fn(logits0[0])
    grads, kinks = {}, {}

    def at(o, idx, delta):
        def hook(ordinal, y):
            if ordinal == o:
                y = y.copy()
                y[(0,) + idx] += delta
            return y
        return objective_fn(propagate(net, x, fmap_hook=hook)[0][0])

    for o, a in base_fmaps.items():
        g = np.zeros(a.shape[1:])
        kink = np.zeros(a.shape[1:], bool)
        for idx in np.ndindex(*a.shape[1:]):
            fp, fm = at(o, idx, h), at(o, idx, -h)
            g[idx] = (fp - fm) / (2 * h)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            kink[idx] = abs(fwd - bwd) > kink_tol * max(1.0, abs(g[idx]))
        grads[o] = g
        kinks[o] = kink
    return grads, kinks


def loss_of(label):
    return lambda logits: float(cross_entropy(logits, label))


def logit_diff_of(cls, pred):
    return lambda logits: float(logits[cls] - logits[pred])


def fd_check(net, x, label, objective, objective_fn, rtol=1e-4, floor=1e-6):
    """Compare analytic fmap gradients to finite differences; returns the number of neurons checked.

    Tolerance per neuron is max(rtol * |fd|, floor); kinks are skipped.
    """
    from fmapguard.nn import backward, forward

    g = backward(net, forward(net, x, label), objective)
    fd, kinks = fd_fmap_grads(net, x, objective_fn)
    checked = 0
    for o in fd:
        ok = ~kinks[o]
        a, n = g.fmaps[o][ok], fd[o][ok]
        bad = np.abs(a - n) > np.maximum(rtol * np.abs(n), floor)
        assert not bad.any(), f"conv {o}: analytic {a[bad][:3]} vs fd {n[bad][:3]}"
        checked += int(ok.sum())
    return checked
