"""Seeded initialization and a small minibatch SGD trainer."""
from __future__ import annotations

import logging

import numpy as np

from .errors import DivergenceError, ShapeError
from .nn import AvgPool2d, Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, backprop_params, cross_entropy, propagate, softmax

log = logging.getLogger(__name__)


def init_network(input_shape, spec, class_count, seed, dtype=np.float32) -> Network:
    """Build a network from a compact layer spec with He-normal weights.

    ``spec`` items: ("conv", out_channels, kernel, stride, padding), ("relu",),
    ("maxpool", size), ("avgpool", size), ("flatten",), ("dense", out_features).
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers = []
    for item in spec:
        kind = item[0]
        if kind == "conv":
            out, k, stride, pad = item[1:]
            fan_in = shape[0] * k * k
            w = rng.standard_normal((out, shape[0], k, k)) * np.sqrt(2.0 / fan_in)
            layer = Conv2d(w.astype(dtype), np.zeros(out, dtype), stride, pad)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "maxpool":
            layer = MaxPool2d(item[1])
        elif kind == "avgpool":
            layer = AvgPool2d(item[1])
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "dense":
            fan_in = shape[0]
            w = rng.standard_normal((item[1], fan_in)) * np.sqrt(2.0 / fan_in)
            layer = Dense(w.astype(dtype), np.zeros(item[1], dtype))
        else:
            raise ShapeError(f"unknown layer kind {kind!r} in spec")
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Network(input_shape, layers, class_count)


# 3 conv layers, 24 fmaps, for 1x8x8 digit images
DESKNET_SPEC = (
    ("conv", 8, 3, 1, 1), ("relu",),
    ("conv", 8, 3, 1, 1), ("relu",), ("maxpool", 2),
    ("conv", 8, 3, 1, 1), ("relu",), ("maxpool", 2),
    ("flatten",), ("dense", 10),
)


def desknet(seed=0, input_shape=(1, 8, 8), class_count=10) -> Network:
    return init_network(input_shape, DESKNET_SPEC, class_count, seed)


def train_sgd(net: Network, images, labels, epochs, learning_rate, seed, *, batch_size=32, momentum=0.9,
              weight_decay=0.0) -> Network:
    """Minibatch SGD with momentum on mean cross-entropy; deterministic for a seed."""
    images = np.ascontiguousarray(images, dtype=net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if labels.min() < 0 or labels.max() >= net.class_count:
        raise ValueError("label out of range")
    rng = np.random.default_rng(seed)
    lr = net.dtype.type(learning_rate)
    mu = net.dtype.type(momentum)
    params = [tuple(p.copy() for p in pair) for pair in net.params()]
    velocity = [tuple(np.zeros_like(p) for p in pair) for pair in params]
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for lo in range(0, len(order), batch_size):
            idx = order[lo:lo + batch_size]
            cur = net.with_params(params)
            logits, _, inputs = propagate(cur, images[idx], keep_inputs=True)
            losses = cross_entropy(logits, labels[idx])
            if not np.all(np.isfinite(losses)):
                raise DivergenceError(f"non-finite loss in epoch {epoch} at batch offset {lo}; lower the learning rate")
            total += float(losses.sum())
            seed_grad = softmax(logits)
            seed_grad[np.arange(len(idx)), labels[idx]] -= 1.0
            grads = backprop_params(cur, inputs, seed_grad / len(idx))
            new_params, new_vel = [], []
            for (w, b), (gw, gb), (vw, vb) in zip(params, grads, velocity):
                if weight_decay:
                    gw = gw + net.dtype.type(weight_decay) * w
                vw = mu * vw + gw
                vb = mu * vb + gb
                new_vel.append((vw, vb))
                new_params.append((w - lr * vw, b - lr * vb))
            params, velocity = new_params, new_vel
        log.info("epoch %d mean loss %.4f", epoch, total / len(images))
    return net.with_params(params)


def accuracy(net: Network, images, labels, batch_size=512) -> float:
    labels = np.asarray(labels)
    hits = 0
    for lo in range(0, len(labels), batch_size):
        logits, _, _ = propagate(net, np.ascontiguousarray(images[lo:lo + batch_size], dtype=net.dtype))
        hits += int((logits.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return hits / len(labels)
