"""Per-fmap vulnerability scores and their composition.

V_fmap = OrigP x PropP, V_CNN = sum of V_fmap, RelV = V_fmap / V_CNN. OrigP
is the fmap's share of all network MACs (dense layers included in the
denominator). PropP comes from injection records (mismatch rate or mean
|delta loss|) or from one of six injection-free heuristics used as a
surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedMetricError
from .injector import InjectionRecords
from .nn import FmapId, MacCensus, Network, backprop_fmaps, propagate, softmax

INJECTION_METRICS = ("mismatch", "delta_loss")
FORWARD_HEURISTICS = ("max_neuron", "fmap_range", "average_l2")
BACKWARD_HEURISTICS = ("gradient", "gain", "mod_gain")
HEURISTICS = FORWARD_HEURISTICS + BACKWARD_HEURISTICS

GAP_EPS = 1e-12


# ---------------------------------------------------------------- injection based

def _single_fmap(records: InjectionRecords):
    if len(records) == 0:
        raise ValueError("no injection records")
    if len(records.fmaps) != 1:
        raise ValueError(f"records span {len(records.fmaps)} fmaps; pass one fmap's records")


def mismatch_propp(records: InjectionRecords) -> float:
    """Fraction of one fmap's injections that changed the Top-1 class."""
    _single_fmap(records)
    return float(records.mismatch.mean())


def delta_loss(records: InjectionRecords) -> float:
    """Mean |golden loss - injected loss| over one fmap's injections."""
    _single_fmap(records)
    return float(records.abs_delta_loss.mean())


def injection_propp(records: InjectionRecords, metric: str) -> dict[FmapId, float]:
    """PropP for every fmap present in ``records``."""
    if metric == "mismatch":
        values = records.mismatch.astype(np.float64)
    elif metric == "delta_loss":
        values = records.abs_delta_loss
    else:
        raise ValueError(f"unknown injection metric {metric!r}")
    if len(records) == 0:
        raise ValueError("no injection records")
    key = records.layer * (int(records.channel.max()) + 1) + records.channel
    uniq, inv = np.unique(key, return_inverse=True)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    out = {}
    for u, s, c in zip(uniq, sums, counts):
        idx = np.flatnonzero(key == u)[0]
        out[FmapId(int(records.layer[idx]), int(records.channel[idx]))] = float(s / c)
    return dict(sorted(out.items()))


# ---------------------------------------------------------------- heuristics

@dataclass(frozen=True, eq=False)
class HeuristicProfile:
    scores: dict  # heuristic name -> {FmapId: score}
    sample_count: int
    diagnostics: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.scores[name]


def _fmap_dict(net, per_layer):
    return {f: float(per_layer[f.layer][f.channel]) for f in net.fmaps}


def _require(images):
    if len(images) == 0:
        raise ValueError("sample set is empty")


def heuristic_forward(net: Network, images, batch=256) -> HeuristicProfile:
    """MaxNeuron, FmapRange and AverageL2 over conv outputs of a sample set."""
    _require(images)
    nconv = len(net.conv_layers)
    mx = [None] * nconv
    mn = [None] * nconv
    l2 = [0.0] * nconv
    for lo in range(0, len(images), batch):
        _, fmaps, _ = propagate(net, np.ascontiguousarray(images[lo:lo + batch], dtype=net.dtype))
        for o, a in fmaps.items():
            a = a.astype(np.float64)
            bmx, bmn = a.max(axis=(0, 2, 3)), a.min(axis=(0, 2, 3))
            mx[o] = bmx if mx[o] is None else np.maximum(mx[o], bmx)
            mn[o] = bmn if mn[o] is None else np.minimum(mn[o], bmn)
            l2[o] = l2[o] + np.sqrt((a * a).sum(axis=(2, 3))).sum(axis=0)
    n = len(images)
    return HeuristicProfile({
        "max_neuron": _fmap_dict(net, mx),
        "fmap_range": _fmap_dict(net, [a - b for a, b in zip(mx, mn)]),
        "average_l2": _fmap_dict(net, [s / n for s in l2]),
    }, n)


def heuristic_gradient(net: Network, images, labels, batch=256) -> dict[FmapId, float]:
    """Mean over samples of the mean |d loss / d a| over an fmap's neurons."""
    _require(images)
    labels = np.asarray(labels)
    acc = [0.0] * len(net.conv_layers)
    for lo in range(0, len(images), batch):
        x = np.ascontiguousarray(images[lo:lo + batch], dtype=net.dtype)
        y = labels[lo:lo + batch]
        logits, _, inputs = propagate(net, x, keep_inputs=True)
        seed = softmax(logits)
        seed[np.arange(len(y)), y] -= 1.0
        grads = backprop_fmaps(net, inputs, seed)
        for o, g in grads.items():
            acc[o] = acc[o] + np.abs(g.astype(np.float64)).mean(axis=(2, 3)).sum(axis=0)
    return _fmap_dict(net, [a / len(images) for a in acc])


def _gain_terms(net: Network, images, batch=32):
    """Accumulate noise-gain sums for Gain and Mod-Gain.

    For every sample and every class i other than the predicted class p, the
    gradient of z_i - z_p w.r.t. each neuron is obtained with one backward
    pass; logits are pre-softmax.
    """
    m = net.class_count
    nconv = len(net.conv_layers)
    gain = [0.0] * nconv
    mod = [0.0] * nconv
    skipped = 0
    for lo in range(0, len(images), batch):
        x = np.ascontiguousarray(images[lo:lo + batch], dtype=net.dtype)
        logits, fmaps, inputs = propagate(net, x, keep_inputs=True)
        b = len(x)
        pred = logits.argmax(axis=1)
        others = np.array([[i for i in range(m) if i != p] for p in pred])  # (b, m-1)
        rows = np.repeat(np.arange(b), m - 1)
        cls = others.reshape(-1)
        seed = np.zeros((b * (m - 1), m))
        seed[np.arange(len(rows)), cls] = 1.0
        seed[np.arange(len(rows)), pred[rows]] -= 1.0
        z = logits.astype(np.float64)
        gap = z[rows, cls] - z[rows, pred[rows]]
        ok = np.abs(gap) >= GAP_EPS
        skipped += int((~ok).sum())
        grads = backprop_fmaps(net, [a[rows] for a in inputs], seed)
        inv = np.where(ok, 1.0 / np.where(ok, gap, 1.0) ** 2, 0.0)
        for o, g in grads.items():
            g2 = g.astype(np.float64) ** 2
            a2 = fmaps[o].astype(np.float64)[rows] ** 2
            gain[o] = gain[o] + (g2.sum(axis=(2, 3)) * inv[:, None]).sum(axis=0)
            mod[o] = mod[o] + ((a2 * g2).sum(axis=(2, 3)) * inv[:, None]).sum(axis=0)
    n = len(images)
    return [g / n for g in gain], [g / n for g in mod], skipped


def heuristic_gain(net: Network, images, variant="gain", diagnostics: dict | None = None) -> dict[FmapId, float]:
    """Noise gain per fmap (``variant`` "gain"), or the activation-weighted
    form for neuron replacement (``variant`` "mod_gain").

    Terms whose logit gap is below 1e-12 are skipped; their count is stored in
    ``diagnostics["skipped_gain_terms"]`` when a dict is passed.
    """
    _require(images)
    if variant not in ("gain", "mod_gain"):
        raise ValueError(f"unknown gain variant {variant!r}")
    gain, mod, skipped = _gain_terms(net, images)
    if diagnostics is not None:
        diagnostics["skipped_gain_terms"] = skipped
    return _fmap_dict(net, gain if variant == "gain" else mod)


def heuristic_profile(net: Network, images, labels) -> HeuristicProfile:
    """All six heuristics on one sample set."""
    fwd = heuristic_forward(net, images)
    gain, mod, skipped = _gain_terms(net, images)
    scores = dict(fwd.scores)
    scores["gradient"] = heuristic_gradient(net, images, labels)
    scores["gain"] = _fmap_dict(net, gain)
    scores["mod_gain"] = _fmap_dict(net, mod)
    return HeuristicProfile(scores, len(images), {"skipped_gain_terms": skipped})


# ---------------------------------------------------------------- composition

@dataclass(frozen=True, eq=False)
class VulnerabilityTable:
    fmaps: tuple
    orig_p: np.ndarray
    prop_p: dict  # metric name -> array aligned with fmaps
    metric: str
    v_fmap: np.ndarray
    v_cnn: float
    rel_v: np.ndarray  # NaN everywhere when v_cnn == 0
    dense_orig_p: float = 0.0

    @property
    def defined(self) -> bool:
        return self.v_cnn > 0

    def rel_v_map(self) -> dict[FmapId, float]:
        if not self.defined:
            raise UndefinedMetricError(f"V_CNN is zero for metric {self.metric!r}; relative vulnerability undefined")
        return dict(zip(self.fmaps, self.rel_v.tolist()))

    def index(self, fmap) -> int:
        return self.fmaps.index(FmapId(*fmap))


def compose_vulnerability(census: MacCensus, prop_p, metric: str = "propp") -> VulnerabilityTable:
    """Build the per-fmap table from a MAC census and a PropP map.

    ``prop_p`` maps FmapId to a nonnegative score, or metric name to such a
    map (then ``metric`` picks the one that drives V_fmap).
    """
    fmaps = tuple(sorted(census.fmap_macs))
    first = next(iter(prop_p.values()), None)
    sources = prop_p if isinstance(first, dict) else {metric: prop_p}
    if metric not in sources:
        raise ValueError(f"metric {metric!r} not among {sorted(sources)}")
    arrays = {}
    for name, values in sources.items():
        missing = [f for f in fmaps if f not in values]
        if missing:
            raise ShapeError(f"PropP for {name!r} misses fmaps {missing[:3]}")
        arr = np.array([float(values[f]) for f in fmaps])
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError(f"PropP for {name!r} must be finite and nonnegative")
        arrays[name] = arr
    orig = np.array([census.fmap_macs[f] for f in fmaps], dtype=np.float64) / census.total
    v = orig * arrays[metric]
    v_cnn = float(v.sum())
    rel = v / v_cnn if v_cnn > 0 else np.full(len(fmaps), np.nan)
    return VulnerabilityTable(fmaps, orig, arrays, metric, v, v_cnn, rel, float(1.0 - orig.sum()))


@dataclass(frozen=True)
class LayerVulnerability:
    layers: tuple  # conv ordinals
    v_layer: np.ndarray
    rel_v: np.ndarray
    orig_p: np.ndarray
    v_cnn: float


def aggregate_to_layers(table: VulnerabilityTable) -> LayerVulnerability:
    layers = tuple(sorted({f.layer for f in table.fmaps}))
    idx = np.array([layers.index(f.layer) for f in table.fmaps])
    v = np.bincount(idx, weights=table.v_fmap, minlength=len(layers))
    rel = np.bincount(idx, weights=table.rel_v, minlength=len(layers)) if table.defined \
        else np.full(len(layers), np.nan)
    orig = np.bincount(idx, weights=table.orig_p, minlength=len(layers))
    return LayerVulnerability(layers, v, rel, orig, table.v_cnn)
