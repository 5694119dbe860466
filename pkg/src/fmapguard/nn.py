"""Minimal sequential CNN engine.

Layers act on batches in N,C,H,W order. Convolution outputs are the feature
maps (fmaps) of the network; ReLU is a separate layer, so anything that
rewrites a conv output (fake quantization, an injected fault, a duplicate
compare) sees the raw MAC result before the activation function.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .errors import NonFiniteError, ShapeError


class FmapId(NamedTuple):
    """One conv output channel: (ordinal of the conv layer, channel)."""

    layer: int
    channel: int

    def __str__(self):
        return f"L{self.layer}C{self.channel}"


# ---------------------------------------------------------------- layers

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    kind = "conv2d"
    has_params = True

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv2d: weight {self.weight.shape} / bias {self.bias.shape} inconsistent")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError(f"conv2d: invalid stride {self.stride} / padding {self.padding}")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def output_shape(self, shape):
        c, h, w = shape
        kh, kw = self.kernel
        if c != self.in_channels:
            raise ShapeError(f"conv2d expects {self.in_channels} input channels, got {c}")
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w}")
        return (self.out_channels, oh, ow)

    def forward(self, x):
        return kernels.conv2d(_pad(x, self.padding), self.weight, self.bias, self.stride)

    def backward(self, x, g):
        p = self.padding
        h, w = x.shape[2] + 2 * p, x.shape[3] + 2 * p
        gx = kernels.conv2d_grad_input(np.ascontiguousarray(g), self.weight, h, w, self.stride)
        return gx[:, :, p:h - p, p:w - p] if p else gx

    def param_grads(self, x, g):
        kh, kw = self.kernel
        gw = kernels.conv2d_grad_weight(_pad(x, self.padding), np.ascontiguousarray(g), kh, kw, self.stride)
        return gw, g.sum(axis=(0, 2, 3), dtype=g.dtype)

    def params(self):
        return (self.weight, self.bias)

    def with_params(self, weight, bias):
        return Conv2d(weight, bias, self.stride, self.padding)

    def macs(self, in_shape):
        """MACs per output channel for one input."""
        _, oh, ow = self.output_shape(in_shape)
        kh, kw = self.kernel
        return oh * ow * self.in_channels * kh * kw


@dataclass(frozen=True, eq=False)
class ReLU:
    kind = "relu"
    has_params = False

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return np.maximum(x, x.dtype.type(0))

    def backward(self, x, g):
        return np.where(x > 0, g, g.dtype.type(0))


@dataclass(frozen=True, eq=False)
class MaxPool2d:
    size: int
    stride: int | None = None
    kind = "maxpool2d"
    has_params = False

    @property
    def step(self):
        return self.stride or self.size

    def output_shape(self, shape):
        c, h, w = shape
        oh = (h - self.size) // self.step + 1
        ow = (w - self.size) // self.step + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"maxpool2d window {self.size} does not fit input {h}x{w}")
        return (c, oh, ow)

    def forward(self, x):
        return kernels.maxpool2d(x, self.size, self.step)[0]

    def backward(self, x, g):
        _, idx = kernels.maxpool2d(x, self.size, self.step)
        return kernels.maxpool2d_grad(np.ascontiguousarray(g), idx, x.shape[2], x.shape[3], self.size, self.step)


@dataclass(frozen=True, eq=False)
class AvgPool2d:
    size: int
    stride: int | None = None
    kind = "avgpool2d"
    has_params = False

    @property
    def step(self):
        return self.stride or self.size

    def output_shape(self, shape):
        return MaxPool2d(self.size, self.stride).output_shape(shape)

    def forward(self, x):
        return kernels.avgpool2d(x, self.size, self.step)

    def backward(self, x, g):
        return kernels.avgpool2d_grad(np.ascontiguousarray(g), x.shape[2], x.shape[3], self.size, self.step)


@dataclass(frozen=True, eq=False)
class Flatten:
    kind = "flatten"
    has_params = False

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, g):
        return g.reshape(x.shape)


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    kind = "dense"
    has_params = True

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense: weight {self.weight.shape} / bias {self.bias.shape} inconsistent")

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.weight.shape[1]:
            raise ShapeError(f"dense expects a flat input of {self.weight.shape[1]}, got {tuple(shape)}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return kernels.dense(np.ascontiguousarray(x), self.weight, self.bias)

    def backward(self, x, g):
        return kernels.dense_grad_input(np.ascontiguousarray(g), self.weight)

    def param_grads(self, x, g):
        return kernels.dense_grad_weight(np.ascontiguousarray(x), np.ascontiguousarray(g)), g.sum(axis=0, dtype=g.dtype)

    def params(self):
        return (self.weight, self.bias)

    def with_params(self, weight, bias):
        return Dense(weight, bias)

    def macs(self, in_shape):
        return int(self.weight.shape[0] * self.weight.shape[1])


Layer = Conv2d | ReLU | MaxPool2d | AvgPool2d | Flatten | Dense


# ---------------------------------------------------------------- network

@dataclass(frozen=True, eq=False)
class Network:
    input_shape: tuple
    layers: tuple
    class_count: int
    shapes: tuple = field(init=False, repr=False)
    conv_layers: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = []
        shape = self.input_shape
        if len(shape) != 3:
            raise ShapeError(f"input shape must be (C, H, W), got {shape}")
        for i, layer in enumerate(self.layers):
            try:
                shape = tuple(layer.output_shape(shape))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            shapes.append(shape)
        object.__setattr__(self, "shapes", tuple(shapes))
        if self.class_count < 2:
            raise ShapeError("class_count must be at least 2")
        if not self.layers or self.layers[-1].kind != "dense" or shapes[-1] != (self.class_count,):
            raise ShapeError(f"final layer must be dense with {self.class_count} outputs")
        convs = tuple(i for i, layer in enumerate(self.layers) if layer.kind == "conv2d")
        if not convs:
            raise ShapeError("network has no conv2d layer")
        object.__setattr__(self, "conv_layers", convs)
        if len({layer.weight.dtype for layer in self.layers if layer.has_params}) != 1:
            raise ShapeError("all parameters must share one dtype")

    @property
    def dtype(self):
        return next(layer.weight.dtype for layer in self.layers if layer.has_params)

    @property
    def fmaps(self) -> list[FmapId]:
        return [FmapId(o, c) for o, i in enumerate(self.conv_layers) for c in range(self.layers[i].out_channels)]

    def input_shape_of(self, layer_index):
        return self.input_shape if layer_index == 0 else self.shapes[layer_index - 1]

    def fmap_shape(self, fmap) -> tuple[int, int]:
        """(H, W) of an fmap plane."""
        self.check_fmap(fmap)
        return self.shapes[self.conv_layers[fmap[0]]][1:]

    def conv(self, ordinal) -> Conv2d:
        return self.layers[self.conv_layers[ordinal]]

    def check_fmap(self, fmap):
        layer, channel = fmap
        if not 0 <= layer < len(self.conv_layers) or not 0 <= channel < self.conv(layer).out_channels:
            raise ShapeError(f"unknown fmap {tuple(fmap)}")

    def astype(self, dtype) -> Network:
        layers = [layer.with_params(*(p.astype(dtype) for p in layer.params())) if layer.has_params else layer
                  for layer in self.layers]
        return Network(self.input_shape, layers, self.class_count)

    def with_params(self, params) -> Network:
        """Copy with new parameters; ``params`` holds one (weight, bias) per parameterized layer."""
        it = iter(params)
        layers = [layer.with_params(*next(it)) if layer.has_params else layer for layer in self.layers]
        return Network(self.input_shape, layers, self.class_count)

    def params(self):
        return [layer.params() for layer in self.layers if layer.has_params]


# ---------------------------------------------------------------- forward

FmapHook = Callable[[int, np.ndarray], np.ndarray]


def propagate(net: Network, x, start=0, *, fmap_hook: FmapHook | None = None, keep_inputs=False):
    """Run ``net.layers[start:]`` on a batch.

    ``fmap_hook(conv_ordinal, y)`` sees every conv output before the next layer
    consumes it and returns the tensor to pass on. Returns (logits, fmaps,
    layer_inputs); ``fmaps`` maps conv ordinal to the tensor passed on, and
    ``layer_inputs`` is filled only when ``keep_inputs`` is set.
    """
    ordinal = {li: o for o, li in enumerate(net.conv_layers)}
    fmaps = {}
    inputs = [] if keep_inputs else None
    for i in range(start, len(net.layers)):
        if keep_inputs:
            inputs.append(x)
        x = net.layers[i].forward(x)
        if i in ordinal:
            if fmap_hook is not None:
                x = fmap_hook(ordinal[i], x)
            fmaps[ordinal[i]] = x
    return x, fmaps, inputs


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label):
    """-log softmax(logits)[label], evaluated with max subtraction. Works on batches."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ShapeError("cross entropy needs at least two classes")
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= z.shape[-1]):
        raise ValueError(f"label out of range for {z.shape[-1]} classes")
    m = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(z, label[..., None], axis=-1)[..., 0] if z.ndim > 1 else z[label]
    return np.maximum(lse - picked, 0.0)


@dataclass(frozen=True, eq=False)
class BatchTrace:
    fmaps: dict  # conv ordinal -> (N, C, H, W)
    logits: np.ndarray
    probs: np.ndarray
    preds: np.ndarray
    losses: np.ndarray
    labels: np.ndarray
    layer_inputs: list | None = None

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """Everything one inference produced."""

    fmaps: dict  # conv ordinal -> (C, H, W)
    logits: np.ndarray
    probs: np.ndarray
    pred: int
    loss: float
    label: int
    layer_inputs: list = field(repr=False, default=None)

    def fmap(self, fmap) -> np.ndarray:
        return self.fmaps[fmap[0]][fmap[1]]


def _check_labels(net, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= net.class_count):
        raise ValueError(f"labels must lie in [0, {net.class_count})")
    return labels


def _check_input(net, x):
    x = np.asarray(x)
    if x.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0].kind}): input shape {x.shape[1:]} does not match {net.input_shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input contains NaN or Inf")
    return np.ascontiguousarray(x, dtype=net.dtype)


def forward_batch(net: Network, x, labels, *, fmap_hook: FmapHook | None = None, keep_inputs=False) -> BatchTrace:
    x = _check_input(net, x)
    labels = _check_labels(net, labels)
    if len(labels) != len(x):
        raise ShapeError("labels and inputs differ in length")
    logits, fmaps, inputs = propagate(net, x, fmap_hook=fmap_hook, keep_inputs=keep_inputs)
    return BatchTrace(fmaps, logits, softmax(logits), logits.argmax(axis=1), cross_entropy(logits, labels),
                      labels, inputs)


@dataclass(frozen=True)
class TapPoint:
    """Replace one fmap plane with ``override`` before anything consumes it."""

    fmap: FmapId
    override: np.ndarray


def tap_hook(net, tap: TapPoint | None, transform: FmapHook | None = None) -> FmapHook | None:
    if tap is None:
        return transform
    layer, channel = tap.fmap
    net.check_fmap(tap.fmap)
    override = np.asarray(tap.override)
    if override.shape != net.fmap_shape(tap.fmap):
        raise ShapeError(f"tap override shape {override.shape} does not match fmap {tuple(tap.fmap)} "
                         f"of shape {net.fmap_shape(tap.fmap)}")

    def hook(ordinal, y):
        if transform is not None:
            y = transform(ordinal, y)
        if ordinal == layer:
            y = y.copy()
            y[:, channel] = override
        return y

    return hook


def forward(net: Network, x, label: int, tap: TapPoint | None = None, *, fmap_transform: FmapHook | None = None
            ) -> ActivationTrace:
    """Single-input inference with full activation capture.

    ``x`` has shape (C, H, W). ``fmap_transform`` is applied to every conv
    output (fake quantization uses it); the tap override is applied after it.
    """
    x = np.asarray(x)
    if x.shape != net.input_shape:
        raise ShapeError(f"layer 0 ({net.layers[0].kind}): input shape {x.shape} does not match {net.input_shape}")
    bt = forward_batch(net, x[None], [label], fmap_hook=tap_hook(net, tap, fmap_transform), keep_inputs=True)
    return ActivationTrace({o: f[0] for o, f in bt.fmaps.items()}, bt.logits[0], bt.probs[0], int(bt.preds[0]),
                           float(bt.losses[0]), int(label), [a[:1] for a in bt.layer_inputs])


# ---------------------------------------------------------------- backward

@dataclass(frozen=True)
class LossObjective:
    """Cross-entropy loss against ``label`` (the trace's own label when None)."""

    label: int | None = None


@dataclass(frozen=True)
class LogitDiffObjective:
    """z_cls - z_pred, where pred is the trace's argmax."""

    cls: int


@dataclass(frozen=True, eq=False)
class GradientTrace:
    fmaps: dict  # conv ordinal -> (C, H, W) d objective / d activation

    def fmap(self, fmap) -> np.ndarray:
        return self.fmaps[fmap[0]][fmap[1]]


def backprop_fmaps(net: Network, layer_inputs, grad_logits):
    """Gradients of a batch objective w.r.t. every conv output.

    ``layer_inputs`` is the list from ``propagate(..., keep_inputs=True)`` run
    from layer 0; ``grad_logits`` is d objective / d logits, shape (N, M).
    """
    ordinal = {li: o for o, li in enumerate(net.conv_layers)}
    g = np.ascontiguousarray(grad_logits, dtype=net.dtype)
    grads = {}
    for i in range(len(net.layers) - 1, net.conv_layers[0] - 1, -1):
        if i in ordinal:
            grads[ordinal[i]] = g
            if i == net.conv_layers[0]:
                break
        g = net.layers[i].backward(layer_inputs[i], g)
    return grads


def backprop_params(net: Network, layer_inputs, grad_logits):
    """Parameter gradients, one (d weight, d bias) per parameterized layer."""
    g = np.ascontiguousarray(grad_logits, dtype=net.dtype)
    out = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.has_params:
            out.append(layer.param_grads(layer_inputs[i], g))
        if i > 0:
            g = layer.backward(layer_inputs[i], g)
    return out[::-1]


def logit_grad(net, trace: ActivationTrace, objective):
    m = net.class_count
    if isinstance(objective, LossObjective):
        label = trace.label if objective.label is None else objective.label
        if not 0 <= label < m:
            raise ValueError(f"label {label} out of range")
        seed = trace.probs.copy()
        seed[label] -= 1.0
        return seed
    if isinstance(objective, LogitDiffObjective):
        if not 0 <= objective.cls < m:
            raise ValueError(f"class {objective.cls} out of range")
        if objective.cls == trace.pred:
            raise ValueError("logit-difference objective needs a class other than the predicted one")
        seed = np.zeros(m)
        seed[objective.cls] += 1.0
        seed[trace.pred] -= 1.0
        return seed
    raise TypeError(f"unknown objective {objective!r}")


def backward(net: Network, trace: ActivationTrace, objective=LossObjective()) -> GradientTrace:
    """d objective / d a for every neuron a of every fmap. Weights are untouched."""
    if trace.layer_inputs is None:
        raise ValueError("trace carries no layer inputs; produce it with forward()")
    seed = logit_grad(net, trace, objective)
    grads = backprop_fmaps(net, trace.layer_inputs, seed[None])
    return GradientTrace({o: g[0] for o, g in grads.items()})


# ---------------------------------------------------------------- MACs

@dataclass(frozen=True)
class MacCensus:
    fmap_macs: dict  # FmapId -> MACs per inference
    layer_macs: dict  # layer index -> MACs (conv and dense layers)
    total: int

    def conv_layer_macs(self, net: Network):
        return {o: self.layer_macs[i] for o, i in enumerate(net.conv_layers)}

    def orig_p(self, fmap) -> float:
        return self.fmap_macs[fmap] / self.total


def count_macs(net: Network) -> MacCensus:
    fmap_macs, layer_macs = {}, {}
    for i, layer in enumerate(net.layers):
        if layer.kind == "conv2d":
            per = layer.macs(net.input_shape_of(i))
            o = net.conv_layers.index(i)
            for c in range(layer.out_channels):
                fmap_macs[FmapId(o, c)] = per
            layer_macs[i] = per * layer.out_channels
        elif layer.kind == "dense":
            layer_macs[i] = layer.macs(net.input_shape_of(i))
    return MacCensus(fmap_macs, layer_macs, sum(layer_macs.values()))
