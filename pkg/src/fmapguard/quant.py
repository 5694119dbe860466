"""Calibration and symmetric INT8 fake quantization of fmap activations.

scale = max(|min|, |max|) / 127 per fmap; codes are clamp(round(x / scale),
-128, 127) with round-half-away-from-zero. Convolutions stay in float; only
conv outputs are snapped to the INT8 lattice, which is the value domain the
fixed-point error models act on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import ActivationTrace, FmapId, Network, TapPoint, forward, propagate

QMIN, QMAX = -128, 127


@dataclass(frozen=True, eq=False)
class RangeProfile:
    mins: tuple  # per conv ordinal: (C,) float64
    maxs: tuple
    sample_count: int

    def __post_init__(self):
        for lo, hi in zip(self.mins, self.maxs):
            if lo.shape != hi.shape or np.any(lo > hi):
                raise ValueError("range profile needs min <= max per fmap")

    def min_of(self, fmap) -> float:
        return float(self.mins[fmap[0]][fmap[1]])

    def max_of(self, fmap) -> float:
        return float(self.maxs[fmap[0]][fmap[1]])

    @property
    def fmaps(self):
        return [FmapId(o, c) for o, m in enumerate(self.mins) for c in range(len(m))]

    def covers(self, net: Network) -> bool:
        return [len(m) for m in self.mins] == [net.conv(o).out_channels for o in range(len(net.conv_layers))]

    def merge(self, other: RangeProfile) -> RangeProfile:
        return RangeProfile(tuple(np.minimum(a, b) for a, b in zip(self.mins, other.mins)),
                            tuple(np.maximum(a, b) for a, b in zip(self.maxs, other.maxs)),
                            self.sample_count + other.sample_count)


def calibrate(net: Network, images, batch_size=256) -> RangeProfile:
    """Running per-fmap min/max of conv outputs over a calibration set."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("calibration set is empty")
    profile = None
    for lo in range(0, len(images), batch_size):
        _, fmaps, _ = propagate(net, np.ascontiguousarray(images[lo:lo + batch_size], dtype=net.dtype))
        part = RangeProfile(
            tuple(fmaps[o].min(axis=(0, 2, 3)).astype(np.float64) for o in range(len(fmaps))),
            tuple(fmaps[o].max(axis=(0, 2, 3)).astype(np.float64) for o in range(len(fmaps))),
            min(batch_size, len(images) - lo))
        profile = part if profile is None else profile.merge(part)
    return profile


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(x, scale):
    """INT8 code(s) for real value(s) ``x`` at ``scale``; saturating."""
    v = np.asarray(x, dtype=np.float64) / np.asarray(scale, dtype=np.float64)
    return np.clip(round_half_away(v), QMIN, QMAX).astype(np.int8)


def dequantize(code, scale, dtype=np.float32):
    return (np.asarray(code, dtype=np.float64) * np.asarray(scale, dtype=np.float64)).astype(dtype)


def flip_bit(code, bit):
    """Flip one bit of a two's-complement INT8 code."""
    u = np.asarray(code, dtype=np.int8).view(np.uint8) ^ np.left_shift(np.uint8(1), np.asarray(bit, dtype=np.uint8))
    return u.astype(np.uint8).view(np.int8)


@dataclass(frozen=True, eq=False)
class QuantScheme:
    scales: tuple  # per conv ordinal: (C,) float64
    dtype: np.dtype = np.dtype(np.float32)
    bits = 8

    @classmethod
    def from_profile(cls, profile: RangeProfile, dtype=np.float32) -> QuantScheme:
        tiny = float(np.finfo(dtype).tiny)
        scales = []
        for lo, hi in zip(profile.mins, profile.maxs):
            s = np.maximum(np.abs(lo), np.abs(hi)) / QMAX
            scales.append(np.where(s > 0, s, tiny))
        return cls(tuple(scales), np.dtype(dtype))

    def scale_of(self, fmap) -> float:
        return float(self.scales[fmap[0]][fmap[1]])

    def fake_quant(self, ordinal, y):
        """quantize then dequantize a batch of conv outputs (N, C, H, W)."""
        s = self.scales[ordinal][None, :, None, None]
        return dequantize(quantize(y, s), s, y.dtype)


def fake_quant_forward(net: Network, x, label, profile: RangeProfile | QuantScheme, tap: TapPoint | None = None
                       ) -> ActivationTrace:
    """``forward`` with every conv output snapped to its INT8 lattice.

    A tap override is applied after quantization and is not re-quantized.
    """
    scheme = profile if isinstance(profile, QuantScheme) else QuantScheme.from_profile(profile, net.dtype)
    if len(scheme.scales) != len(net.conv_layers):
        raise ShapeError("quantization scheme does not cover the network")
    return forward(net, x, label, tap, fmap_transform=scheme.fake_quant)
