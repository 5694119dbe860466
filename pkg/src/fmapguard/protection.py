"""Selective filter duplication with duplicate-compare error detection.

A protected fmap gets a shadow output channel with the same filter and bias,
appended after the layer's original channels (shadow ids C, C+1, ... in
FmapId order). Both copies are computed by the same kernel, so error-free
they agree bit for bit. After the layer runs, each pair is compared, the
shadows are dropped and only primaries feed the next layer; the comparison
never blocks inference.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .analysis import CoveragePlan, record_weights
from .errors import ShapeError
from .injector import (CampaignConfig, ErrorModel, GoldenCache, InjectionRecords, _plan_sites, _scheme_for,
                       fmap_context, golden_cache, injection_rng, run_campaign)
from .nn import ActivationTrace, Conv2d, FmapId, Network, count_macs, cross_entropy, softmax
from .quant import QuantScheme, RangeProfile, dequantize, quantize
from .seeding import derive_seed

log = logging.getLogger(__name__)

PRIMARY, SHADOW = 0, 1


@dataclass(frozen=True, eq=False)
class HardenedNetwork:
    base: Network
    duplication: dict  # FmapId -> shadow channel id in the expanded conv layer
    epsilon: float = 0.0
    notes: tuple = ()
    _protected: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("detection tolerance must be nonnegative")
        dup = {FmapId(*f): int(s) for f, s in self.duplication.items()}
        per = [[] for _ in self.base.conv_layers]
        for f in sorted(dup):
            self.base.check_fmap(f)
            per[f.layer].append(f.channel)
        for o, chans in enumerate(per):
            c = self.base.conv(o).out_channels
            want = {FmapId(o, ch): c + k for k, ch in enumerate(chans)}
            if any(dup[f] != s for f, s in want.items()):
                raise ShapeError(f"conv {o}: shadow channels must be numbered {c}.. in fmap order")
        object.__setattr__(self, "duplication", dict(sorted(dup.items())))
        object.__setattr__(self, "_protected", tuple(np.array(p, dtype=np.int64) for p in per))

    @property
    def protected_fmaps(self) -> tuple:
        return tuple(self.duplication)

    def protected(self, ordinal) -> np.ndarray:
        """Primary channels of conv ``ordinal`` that have shadows, in shadow order."""
        return self._protected[ordinal]

    def expanded_conv(self, ordinal) -> Conv2d:
        conv = self.base.conv(ordinal)
        p = self.protected(ordinal)
        if len(p) == 0:
            return conv
        return Conv2d(np.concatenate([conv.weight, conv.weight[p]]), np.concatenate([conv.bias, conv.bias[p]]),
                      conv.stride, conv.padding)

    def channel_counts(self) -> list[int]:
        return [self.base.conv(o).out_channels + len(self.protected(o)) for o in range(len(self.base.conv_layers))]

    def protected_mask(self, layer, channel) -> np.ndarray:
        """Elementwise: does (layer, channel) name a protected fmap."""
        layer, channel = np.asarray(layer), np.asarray(channel)
        out = np.zeros(layer.shape, bool)
        for f in self.duplication:
            out |= (layer == f.layer) & (channel == f.channel)
        return out


def harden(net: Network, plan, epsilon=0.0) -> HardenedNetwork:
    """Duplicate the filters of the plan's fmaps (a CoveragePlan or an iterable of FmapIds)."""
    fmaps = [FmapId(*f) for f in (plan.selected_fmaps if isinstance(plan, CoveragePlan) else plan)]
    notes = ()
    if len(set(fmaps)) != len(fmaps):
        dups = sorted({f for f in fmaps if fmaps.count(f) > 1})
        notes = (f"duplicate fmaps dropped from plan: {', '.join(map(str, dups))}",)
        log.info(notes[0])
    for f in fmaps:
        net.check_fmap(f)
    dup = {}
    for f in sorted(set(fmaps)):
        dup[f] = net.conv(f.layer).out_channels + sum(1 for g in dup if g.layer == f.layer)
    return HardenedNetwork(net, dup, float(epsilon), notes)


# ---------------------------------------------------------------- execution

@dataclass(frozen=True)
class DetectionReport:
    detected: bool
    first_divergent_fmap: FmapId | None
    max_abs_divergence: float


@dataclass(frozen=True, eq=False)
class DetectionBatch:
    detected: np.ndarray  # (N,) bool
    first_layer: np.ndarray  # (N,) conv ordinal of first divergent fmap, -1 if none
    first_channel: np.ndarray
    max_abs_divergence: np.ndarray  # (N,) over all protected pairs

    def report(self, i) -> DetectionReport:
        f = FmapId(int(self.first_layer[i]), int(self.first_channel[i])) if self.first_layer[i] >= 0 else None
        return DetectionReport(bool(self.detected[i]), f, float(self.max_abs_divergence[i]))


@dataclass(frozen=True)
class Injection:
    """Overwrite one neuron of one copy of an fmap."""

    fmap: FmapId
    h: int
    w: int
    value: float
    copy: int = PRIMARY  # SHADOW is only valid for protected fmaps


def _quantize_ext(hnet, scheme, ordinal, y):
    if scheme is None:
        return y
    s = scheme.scales[ordinal]
    s = np.concatenate([s, s[hnet.protected(ordinal)]])[None, :, None, None]
    return dequantize(quantize(y, s), s, y.dtype)


def _layer_range(net, ordinal):
    """Layer indices strictly between conv ``ordinal`` and the next conv (or the end)."""
    lo = net.conv_layers[ordinal] + 1
    hi = net.conv_layers[ordinal + 1] if ordinal + 1 < len(net.conv_layers) else len(net.layers)
    return range(lo, hi)


def _inject(hnet, ordinal, y_ext, rows, chans, hs, ws, vals, copies):
    c = hnet.base.conv(ordinal).out_channels
    col = np.array(chans, dtype=np.int64)
    if np.any(copies == SHADOW):
        lookup = {int(p): c + k for k, p in enumerate(hnet.protected(ordinal))}
        for i in np.flatnonzero(copies == SHADOW):
            if int(chans[i]) not in lookup:
                raise ValueError(f"fmap {ordinal}:{int(chans[i])} is not protected; it has no shadow copy")
            col[i] = lookup[int(chans[i])]
    y_ext[rows, col, hs, ws] = vals


def _new_det(n):
    return {"detected": np.zeros(n, bool), "first_layer": np.full(n, -1, np.int64),
            "first_channel": np.full(n, -1, np.int64), "max": np.zeros(n)}


def _advance(hnet, o, y_ext, scheme, det):
    """Compare pairs of conv ``o``, drop shadows, run up to the next conv's expanded
    output. Returns (next tensor or logits, primary fmaps of conv ``o``)."""
    net = hnet.base
    c = net.conv(o).out_channels
    p = hnet.protected(o)
    if len(p):
        d = np.abs(y_ext[:, p].astype(np.float64) - y_ext[:, c:].astype(np.float64)).max(axis=(2, 3))
        over = d > hnet.epsilon
        hit = over.any(axis=1) & (det["first_layer"] < 0)
        det["first_layer"][hit] = o
        det["first_channel"][hit] = p[over[hit].argmax(axis=1)]
        det["max"] = np.maximum(det["max"], d.max(axis=1))
        det["detected"] |= over.any(axis=1)
    prim = np.ascontiguousarray(y_ext[:, :c])
    h = prim
    for i in _layer_range(net, o):
        h = net.layers[i].forward(h)
    if o + 1 == len(net.conv_layers):
        return h, prim
    return _quantize_ext(hnet, scheme, o + 1, hnet.expanded_conv(o + 1).forward(h)), prim


def _batch(det):
    return DetectionBatch(det["detected"], det["first_layer"], det["first_channel"], det["max"])


def _scheme(hnet, profile):
    if profile is None or isinstance(profile, QuantScheme):
        return profile
    return QuantScheme.from_profile(profile, hnet.base.dtype)


def _expanded_from_input(hnet, o, h, scheme):
    return _quantize_ext(hnet, scheme, o, hnet.expanded_conv(o).forward(h))


def hardened_forward_batch(hnet: HardenedNetwork, x, profile: RangeProfile | QuantScheme | None = None,
                           injections=None):
    """Batched hardened inference.

    ``injections`` is an optional per-sample sequence of Injection or None.
    With a profile, every conv output (both copies) is INT8 fake-quantized.
    Returns (logits, primary fmaps by conv ordinal, DetectionBatch).
    """
    net = hnet.base
    h = np.ascontiguousarray(x, dtype=net.dtype)
    scheme = _scheme(hnet, profile)
    by_layer = {}
    for row, inj in enumerate(injections or []):
        if inj is not None:
            net.check_fmap(inj.fmap)
            by_layer.setdefault(inj.fmap[0], []).append((row, inj))
    for i in range(net.conv_layers[0]):
        h = net.layers[i].forward(h)
    det = _new_det(len(h))
    y = _expanded_from_input(hnet, 0, h, scheme)
    fmaps = {}
    for o in range(len(net.conv_layers)):
        todo = by_layer.get(o, [])
        if todo:
            y = y.copy()
            _inject(hnet, o, y, [r for r, _ in todo], [j.fmap[1] for _, j in todo], [j.h for _, j in todo],
                    [j.w for _, j in todo], np.array([j.value for _, j in todo], dtype=y.dtype),
                    np.array([j.copy for _, j in todo]))
        y, fmaps[o] = _advance(hnet, o, y, scheme, det)
    return y, fmaps, _batch(det)


def detect_forward(hnet: HardenedNetwork, x, label: int, injection: Injection | None = None,
                   profile: RangeProfile | QuantScheme | None = None) -> tuple[ActivationTrace, DetectionReport]:
    """Single-input hardened inference with an optional single-copy injection.

    Inference always completes; the report is assembled at the end from the
    pairwise comparisons. Primary copies are what the trace shows.
    """
    x = np.asarray(x)
    if x.shape != hnet.base.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match {hnet.base.input_shape}")
    logits, fmaps, det = hardened_forward_batch(hnet, x[None], profile, [injection])
    trace = ActivationTrace({o: f[0] for o, f in fmaps.items()}, logits[0], softmax(logits)[0],
                            int(logits[0].argmax()), float(cross_entropy(logits, [label])[0]), int(label))
    return trace, det.report(0)


# ---------------------------------------------------------------- campaigns

@dataclass(eq=False)
class ProtectedRecords:
    """Injection records of a hardened-network campaign plus detection outcome."""

    records: InjectionRecords
    copy: np.ndarray  # PRIMARY / SHADOW
    protected: np.ndarray  # bool
    detected: np.ndarray  # bool
    max_abs_divergence: np.ndarray

    def __len__(self):
        return len(self.records)


def _conv_input(net, images, golden: GoldenCache, o, pos):
    if o == 0:
        h = np.ascontiguousarray(images[golden.image_ids[pos]], dtype=net.dtype)
        rng = range(net.conv_layers[0])
    else:
        h = golden.fmaps[o - 1][pos]
        rng = _layer_range(net, o - 1)
    for i in rng:
        h = net.layers[i].forward(h)
    return h


def _copy_draws(hnet, f, k, master_seed):
    if f not in hnet.duplication:
        return np.full(k, PRIMARY, np.int64)
    seed = derive_seed(master_seed, "copy")
    return np.array([injection_rng(seed, f, j).integers(2) for j in range(k)], np.int64)


def run_protected_campaign(hnet: HardenedNetwork, images, labels, split_ids, config: CampaignConfig,
                           profile: RangeProfile, golden: GoldenCache | None = None) -> ProtectedRecords:
    """The campaign ``run_campaign`` would run on the base network, replayed on
    the hardened one. Sites and values come from the same streams; protected
    fmaps additionally draw which copy is hit."""
    net = hnet.base
    model = config.error_model
    if config.exhaustive:
        raise ValueError("protected campaigns are sampled, not exhaustive")
    scheme = _scheme_for(net, profile, model)
    fmaps = list(config.fmaps) if config.fmaps is not None else net.fmaps
    for f in fmaps:
        net.check_fmap(f)
    if golden is None:
        golden = golden_cache(net, images, labels, split_ids, scheme)
    if np.any(golden.preds != golden.labels):
        raise ValueError("split contains misclassified images; build splits with split_dataset")
    n = len(golden.image_ids)
    cols = {c: [] for c in InjectionRecords.COLUMNS}
    extra = {"copy": [], "protected": [], "detected": [], "max": []}
    chunk = 512
    for f in fmaps:
        ctx = fmap_context(f, profile, scheme)
        plane = golden.fmaps[f.layer][:, f.channel]
        pos, hs, ws, bits, vals = _plan_sites(f, config.inj_per_fmap, n, net.fmap_shape(f), model, ctx, plane,
                                              config.master_seed, net.dtype)
        copies = _copy_draws(hnet, f, config.inj_per_fmap, config.master_seed)
        for lo in range(0, len(pos), chunk):
            sl = slice(lo, lo + chunk)
            p = pos[sl]
            m = len(p)
            y = _expanded_from_input(hnet, f.layer, _conv_input(net, images, golden, f.layer, p), scheme)
            orig = y[np.arange(m), f.channel, hs[sl], ws[sl]].astype(np.float64)
            _inject(hnet, f.layer, y, np.arange(m), np.full(m, f.channel), hs[sl], ws[sl],
                    vals[sl].astype(net.dtype), copies[sl])
            det = _new_det(m)
            o = f.layer
            while True:
                y, _ = _advance(hnet, o, y, scheme, det)
                if y.ndim == 2:
                    break
                o += 1
            cols["layer"].append(np.full(m, f.layer, np.int64))
            cols["channel"].append(np.full(m, f.channel, np.int64))
            cols["ordinal"].append(np.arange(lo, lo + m, dtype=np.int64))
            cols["image"].append(golden.image_ids[p])
            cols["h"].append(hs[sl])
            cols["w"].append(ws[sl])
            cols["bit"].append(bits[sl])
            cols["original"].append(orig)
            cols["corrupted"].append(vals[sl].astype(net.dtype).astype(np.float64))
            cols["golden_loss"].append(golden.losses[p])
            cols["injected_loss"].append(cross_entropy(y, golden.labels[p]))
            cols["golden_top1"].append(golden.preds[p].astype(np.int64))
            cols["injected_top1"].append(y.argmax(axis=1).astype(np.int64))
            extra["copy"].append(copies[sl])
            extra["protected"].append(np.full(m, f in hnet.duplication))
            extra["detected"].append(det["detected"])
            extra["max"].append(det["max"])
    data = [np.concatenate(cols[c]) for c in InjectionRecords.COLUMNS]
    meta = {"split": config.split, "campaign_seed": config.master_seed, "inj_per_fmap": config.inj_per_fmap,
            "exhaustive": False, "protected_fmaps": len(hnet.duplication)}
    recs = InjectionRecords(model, *data, meta=meta)
    order = np.lexsort((recs.ordinal, recs.channel, recs.layer))
    return ProtectedRecords(recs.select(order), *(np.concatenate(extra[k])[order]
                                                  for k in ("copy", "protected", "detected", "max")))


@dataclass(frozen=True)
class ProtectionEfficacy:
    detected_fraction: float  # among injections into protected fmaps; NaN when there are none
    residual_mismatch_fraction: float  # error-weighted share of injections that mismatch undetected
    baseline_mismatch_fraction: float  # same weighting, unhardened network
    improvement_factor: float
    protected_injections: int
    total_injections: int
    undetected_mismatches: int

    @property
    def detection_defined(self) -> bool:
        return self.protected_injections > 0


def efficacy_from_records(base: InjectionRecords, hardened: ProtectedRecords, census) -> ProtectionEfficacy:
    """Compare a base campaign with its hardened replay.

    Records are weighted by origP_f / n_f so rates are error-weighted like
    coverage; the improvement factor is baseline / residual (1.0 when they
    agree, inf when no mismatch survives).
    """
    if len(base) == 0 or len(hardened) == 0:
        raise ValueError("no injection records")
    w_base = record_weights(base, census)
    w_h = record_weights(hardened.records, census)
    baseline = float(w_base[base.mismatch].sum() / w_base.sum())
    bad = hardened.records.mismatch & ~hardened.detected
    residual = float(w_h[bad].sum() / w_h.sum())
    n_prot = int(hardened.protected.sum())
    det = float(hardened.detected[hardened.protected].mean()) if n_prot else float("nan")
    if residual == baseline:
        factor = 1.0
    elif residual == 0:
        factor = float("inf")
    else:
        factor = baseline / residual
    return ProtectionEfficacy(det, residual, baseline, factor, n_prot, len(hardened), int(bad.sum()))


def measure_protection_efficacy(hnet: HardenedNetwork, images, labels, split_ids, config: CampaignConfig,
                                profile: RangeProfile, base_records: InjectionRecords | None = None):
    """Run (or reuse) the base campaign and its hardened replay; returns
    (ProtectionEfficacy, base records, protected records)."""
    net = hnet.base
    model = ErrorModel.parse(config.error_model)
    scheme = _scheme_for(net, profile, model)
    golden = golden_cache(net, images, labels, split_ids, scheme)
    if base_records is None:
        base_records = run_campaign(net, images, labels, split_ids, config, profile, golden)
    prot = run_protected_campaign(hnet, images, labels, split_ids, config, profile, golden)
    return efficacy_from_records(base_records, prot, count_macs(net)), base_records, prot
