"""Statistical single-neuron error injection.

Each injection picks an image from the split and a neuron of one fmap,
corrupts that neuron's conv output under an error model and reruns the rest
of the network. Randomness for injection ``k`` of fmap ``f`` comes from a
Philox stream keyed by (master seed, f) with ``k`` in the counter, so any
injection can be regenerated on its own and the first ``k`` records of a
larger campaign are exactly the ``k``-injection campaign.

Injected inferences resume from the cached golden conv output of the
injected layer. The engine kernels are batch-invariant, so a no-op injection
reproduces the golden logits bit for bit.
"""
from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ShapeError
from .nn import FmapId, Network, TapPoint, cross_entropy, forward_batch, propagate
from .quant import QMAX, QMIN, QuantScheme, RangeProfile, dequantize, flip_bit, quantize

log = logging.getLogger(__name__)

CHUNK = 512  # fixed so that results never depend on the worker count


class ErrorModel(str, enum.Enum):
    FP_RAND = "fp-rand"
    FXP_RAND = "fxp-rand"
    FXP_FLIP = "fxp-flip"

    @property
    def quantized(self):
        return self is not ErrorModel.FP_RAND

    @classmethod
    def parse(cls, value) -> ErrorModel:
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("_", "-")
        for m in cls:
            if text in (m.value, m.name.lower().replace("_", "-")):
                return m
        raise ValueError(f"unknown error model {value!r}; choose from {[m.value for m in cls]}")


class Outcome(str, enum.Enum):
    MASKED = "masked"
    MISMATCH = "mismatch"


@dataclass(frozen=True)
class FmapContext:
    """Per-fmap facts an error model needs."""

    max_value: float | None = None  # FP_RAND bound
    scale: float | None = None  # FXP_* lattice step


def fmap_context(fmap, profile: RangeProfile | None, scheme: QuantScheme | None) -> FmapContext:
    mx = None
    if profile is not None:
        mx = profile.max_of(fmap)
        if mx <= 0:  # an fmap that never went positive still needs a nonempty range
            mx = max(abs(profile.min_of(fmap)), abs(mx))
    return FmapContext(mx, scheme.scale_of(fmap) if scheme is not None else None)


def corrupt_value(original, model: ErrorModel, ctx: FmapContext, rng, dtype=np.float32):
    """Draw a corrupted neuron value. Returns (value, bit), bit is None unless FXP_FLIP."""
    model = ErrorModel.parse(model)
    if model is ErrorModel.FP_RAND:
        if ctx.max_value is None:
            raise ValueError("FP_RAND needs a range profile")
        return float(np.asarray(rng.uniform(-ctx.max_value, ctx.max_value), dtype=dtype)), None
    if ctx.scale is None:
        raise ValueError(f"{model.value} needs a quantization scheme")
    if model is ErrorModel.FXP_RAND:
        code = rng.integers(QMIN, QMAX + 1)
        return float(dequantize(code, ctx.scale, dtype)), None
    bit = int(rng.integers(0, 8))
    return flip_value(original, bit, ctx.scale, dtype), bit


def flip_value(original, bit, scale, dtype=np.float32) -> float:
    return float(dequantize(flip_bit(quantize(original, scale), bit), scale, dtype))


_KEYS: dict = {}


def injection_rng(master_seed: int, fmap, ordinal: int) -> np.random.Generator:
    """Counter-based stream for one injection; independent of execution order."""
    key = _KEYS.get((master_seed, fmap[0], fmap[1]))
    if key is None:
        key = np.random.SeedSequence([master_seed & (2**64 - 1), int(fmap[0]), int(fmap[1])]).generate_state(
            2, np.uint64)
        _KEYS[(master_seed, fmap[0], fmap[1])] = key
    return np.random.Generator(np.random.Philox(key=key, counter=[0, int(ordinal), 0, 0]))


# ---------------------------------------------------------------- records

@dataclass(frozen=True)
class InjectionSite:
    image_id: int
    fmap: FmapId
    h: int
    w: int
    bit: int | None = None
    code: int | None = None  # FXP_RAND exhaustive mode only


@dataclass(frozen=True)
class InjectionRecord:
    site: InjectionSite
    error_model: ErrorModel
    ordinal: int
    original_value: float
    corrupted_value: float
    golden_loss: float
    injected_loss: float
    golden_top1: int
    injected_top1: int

    @property
    def outcome(self) -> Outcome:
        return Outcome.MISMATCH if self.injected_top1 != self.golden_top1 else Outcome.MASKED


@dataclass(eq=False)
class InjectionRecords:
    """Column store of injection outcomes, sorted by (layer, channel, ordinal)."""

    error_model: ErrorModel
    layer: np.ndarray
    channel: np.ndarray
    ordinal: np.ndarray
    image: np.ndarray
    h: np.ndarray
    w: np.ndarray
    bit: np.ndarray  # -1 where not applicable
    original: np.ndarray
    corrupted: np.ndarray
    golden_loss: np.ndarray
    injected_loss: np.ndarray
    golden_top1: np.ndarray
    injected_top1: np.ndarray
    meta: dict = field(default_factory=dict)

    COLUMNS = ("layer", "channel", "ordinal", "image", "h", "w", "bit", "original", "corrupted",
               "golden_loss", "injected_loss", "golden_top1", "injected_top1")

    def __len__(self):
        return len(self.layer)

    @property
    def mismatch(self) -> np.ndarray:
        return self.injected_top1 != self.golden_top1

    @property
    def abs_delta_loss(self) -> np.ndarray:
        return np.abs(self.golden_loss - self.injected_loss)

    @property
    def fmaps(self) -> list[FmapId]:
        pairs = np.unique(np.stack([self.layer, self.channel], axis=1), axis=0) if len(self) else []
        return [FmapId(int(a), int(b)) for a, b in pairs]

    def select(self, mask) -> InjectionRecords:
        return InjectionRecords(self.error_model, *(getattr(self, c)[mask] for c in self.COLUMNS), meta=dict(self.meta))

    def for_fmap(self, fmap) -> InjectionRecords:
        return self.select((self.layer == fmap[0]) & (self.channel == fmap[1]))

    def prefix(self, k: int) -> InjectionRecords:
        """The first ``k`` injections of every fmap."""
        return self.select(self.ordinal < k)

    def sorted(self) -> InjectionRecords:
        return self.select(np.lexsort((self.ordinal, self.channel, self.layer)))

    @classmethod
    def concat(cls, parts) -> InjectionRecords:
        parts = list(parts)
        return cls(parts[0].error_model, *(np.concatenate([getattr(p, c) for p in parts]) for c in cls.COLUMNS),
                   meta=dict(parts[0].meta))

    def __iter__(self):
        for i in range(len(self)):
            bit = int(self.bit[i])
            site = InjectionSite(int(self.image[i]), FmapId(int(self.layer[i]), int(self.channel[i])),
                                 int(self.h[i]), int(self.w[i]), None if bit < 0 else bit)
            yield InjectionRecord(site, self.error_model, int(self.ordinal[i]), float(self.original[i]),
                                  float(self.corrupted[i]), float(self.golden_loss[i]), float(self.injected_loss[i]),
                                  int(self.golden_top1[i]), int(self.injected_top1[i]))

    def equals(self, other) -> bool:
        return (self.error_model == other.error_model and len(self) == len(other)
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in self.COLUMNS))


# ---------------------------------------------------------------- campaign

@dataclass(frozen=True)
class CampaignConfig:
    error_model: ErrorModel
    inj_per_fmap: int
    split: str = "TS"
    master_seed: int = 0
    fmaps: tuple | None = None  # None = every fmap
    exhaustive: bool = False
    threads: int | None = None  # execution detail; never changes results

    def __post_init__(self):
        object.__setattr__(self, "error_model", ErrorModel.parse(self.error_model))
        if not self.exhaustive and self.inj_per_fmap < 1:
            raise ValueError("inj_per_fmap must be at least 1")
        if self.fmaps is not None:
            object.__setattr__(self, "fmaps", tuple(FmapId(*f) for f in self.fmaps))


@dataclass(frozen=True, eq=False)
class GoldenCache:
    """Error-free conv outputs and results for the split, computed once."""

    image_ids: np.ndarray
    fmaps: dict  # conv ordinal -> (N, C, H, W), post fake-quant when quantized
    losses: np.ndarray
    preds: np.ndarray
    labels: np.ndarray


def golden_cache(net, images, labels, image_ids, scheme: QuantScheme | None = None, batch=512) -> GoldenCache:
    image_ids = np.asarray(image_ids, dtype=np.int64)
    if len(image_ids) == 0:
        raise ValueError("dataset split is empty")
    hook = scheme.fake_quant if scheme is not None else None
    parts = []
    for lo in range(0, len(image_ids), batch):
        ids = image_ids[lo:lo + batch]
        parts.append(forward_batch(net, images[ids], labels[ids], fmap_hook=hook))
    fmaps = {o: np.concatenate([p.fmaps[o] for p in parts]) for o in range(len(net.conv_layers))}
    return GoldenCache(image_ids, fmaps, np.concatenate([p.losses for p in parts]),
                       np.concatenate([p.preds for p in parts]), np.asarray(labels)[image_ids])


def _plan_sites(fmap, k, n_images, hw, model, ctx, golden_plane, master_seed, dtype):
    """Sample k injection sites for one fmap; golden_plane is (N, H, W)."""
    pos = np.empty(k, np.int64)
    hs = np.empty(k, np.int64)
    ws = np.empty(k, np.int64)
    bits = np.full(k, -1, np.int64)
    vals = np.empty(k, np.float64)
    for j in range(k):
        rng = injection_rng(master_seed, fmap, j)
        p = rng.integers(n_images)
        y = rng.integers(hw[0])
        x = rng.integers(hw[1])
        v, bit = corrupt_value(golden_plane[p, y, x], model, ctx, rng, dtype)
        pos[j], hs[j], ws[j], vals[j] = p, y, x, v
        if bit is not None:
            bits[j] = bit
    return pos, hs, ws, bits, vals


def enumerate_all_sites(net: Network, fmap, image_ids, model, max_sites=100_000) -> list[InjectionSite]:
    """Every (image, neuron[, bit | code]) combination for one fmap, in a fixed order."""
    model = ErrorModel.parse(model)
    if model is ErrorModel.FP_RAND:
        raise ValueError("FP_RAND has a continuous value space; its sites cannot be enumerated")
    net.check_fmap(fmap)
    fmap = FmapId(*fmap)
    h, w = net.fmap_shape(fmap)
    values = range(8) if model is ErrorModel.FXP_FLIP else range(QMIN, QMAX + 1)
    count = len(image_ids) * h * w * len(values)
    if count > max_sites:
        raise ValueError(f"{count} sites exceed the enumeration bound {max_sites}")
    sites = []
    for img in image_ids:
        for y in range(h):
            for x in range(w):
                for v in values:
                    if model is ErrorModel.FXP_FLIP:
                        sites.append(InjectionSite(int(img), fmap, y, x, bit=v))
                    else:
                        sites.append(InjectionSite(int(img), fmap, y, x, code=v))
    return sites


def _evaluate(net, golden: GoldenCache, hook, ordinal, pos, ch, hs, ws, vals):
    x = golden.fmaps[ordinal][pos].copy()
    x[np.arange(len(pos)), ch, hs, ws] = vals
    logits, _, _ = propagate(net, x, net.conv_layers[ordinal] + 1, fmap_hook=hook)
    return logits


def _run_chunks(net, golden, hook, jobs, threads):
    """jobs: list of (ordinal, pos, ch, h, w, values); returns logits per job in job order."""
    if threads and threads > 1 and kernels.get_backend() == "numpy":
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda j: _evaluate(net, golden, hook, *j), jobs))
    kernels.set_threads(threads)
    return [_evaluate(net, golden, hook, *j) for j in jobs]


def _scheme_for(net, profile, model):
    if profile is None:
        raise ValueError(f"{model.value} needs a range profile")
    if isinstance(profile, QuantScheme):
        raise ValueError("pass the RangeProfile; the quantization scheme is derived from it")
    if not profile.covers(net):
        raise ShapeError("range profile does not cover the network")
    return QuantScheme.from_profile(profile, net.dtype) if model.quantized else None


def run_campaign(net: Network, images, labels, split_ids, config: CampaignConfig, profile: RangeProfile,
                 golden: GoldenCache | None = None) -> InjectionRecords:
    """Run ``config.inj_per_fmap`` injections into every selected fmap.

    FP_RAND runs the float network; FXP_* run it with INT8 fake quantization.
    With ``config.exhaustive`` every enumerable site of each fmap is injected
    once instead of sampling.
    """
    model = config.error_model
    scheme = _scheme_for(net, profile, model)
    hook = scheme.fake_quant if scheme is not None else None
    fmaps = list(config.fmaps) if config.fmaps is not None else net.fmaps
    for f in fmaps:
        net.check_fmap(f)
    if golden is None:
        golden = golden_cache(net, images, labels, split_ids, scheme)
    wrong = np.flatnonzero(golden.preds != golden.labels)
    if len(wrong):
        raise ValueError(f"split contains {len(wrong)} images the error-free network misclassifies "
                         f"(first id {int(golden.image_ids[wrong[0]])}); build splits with split_dataset")
    n = len(golden.image_ids)
    dtype = net.dtype
    plans = []
    for f in fmaps:
        plane = golden.fmaps[f.layer][:, f.channel]
        if config.exhaustive:
            sites = enumerate_all_sites(net, f, range(n), model)
            pos = np.array([s.image_id for s in sites], np.int64)
            hs = np.array([s.h for s in sites], np.int64)
            ws = np.array([s.w for s in sites], np.int64)
            orig = plane[pos, hs, ws]
            scale = scheme.scale_of(f)
            if model is ErrorModel.FXP_FLIP:
                bits = np.array([s.bit for s in sites], np.int64)
                vals = dequantize(flip_bit(quantize(orig, scale), bits), scale, dtype).astype(np.float64)
            else:
                bits = np.full(len(sites), -1, np.int64)
                vals = dequantize(np.array([s.code for s in sites]), scale, dtype).astype(np.float64)
        else:
            ctx = fmap_context(f, profile, scheme)
            pos, hs, ws, bits, vals = _plan_sites(f, config.inj_per_fmap, n, net.fmap_shape(f), model, ctx,
                                                  plane, config.master_seed, dtype)
        plans.append((f, pos, hs, ws, bits, vals))
    return _execute(net, golden, hook, plans, model, config)


def _execute(net, golden, hook, plans, model, config) -> InjectionRecords:
    jobs, meta = [], []
    for f, pos, hs, ws, bits, vals in plans:
        for lo in range(0, len(pos), CHUNK):
            sl = slice(lo, lo + CHUNK)
            ch = np.full(len(pos[sl]), f.channel, np.int64)
            jobs.append((f.layer, pos[sl], ch, hs[sl], ws[sl], vals[sl].astype(net.dtype)))
            meta.append((f, np.arange(len(pos))[sl], bits[sl]))
    logits = _run_chunks(net, golden, hook, jobs, config.threads)
    cols = {c: [] for c in InjectionRecords.COLUMNS}
    for (ordinal, pos, ch, hs, ws, vals), lg, (f, ords, bits) in zip(jobs, logits, meta):
        cols["layer"].append(np.full(len(pos), f.layer, np.int64))
        cols["channel"].append(ch)
        cols["ordinal"].append(ords.astype(np.int64))
        cols["image"].append(golden.image_ids[pos])
        cols["h"].append(hs)
        cols["w"].append(ws)
        cols["bit"].append(bits)
        cols["original"].append(golden.fmaps[ordinal][pos, ch, hs, ws].astype(np.float64))
        cols["corrupted"].append(vals.astype(np.float64))
        cols["golden_loss"].append(golden.losses[pos])
        cols["injected_loss"].append(cross_entropy(lg, golden.labels[pos]))
        cols["golden_top1"].append(golden.preds[pos].astype(np.int64))
        cols["injected_top1"].append(lg.argmax(axis=1).astype(np.int64))
    empty = {"original", "corrupted", "golden_loss", "injected_loss"}
    data = [np.concatenate(cols[c]) if cols[c] else np.empty(0, np.float64 if c in empty else np.int64)
            for c in InjectionRecords.COLUMNS]
    meta_info = {"split": config.split, "campaign_seed": config.master_seed, "inj_per_fmap": config.inj_per_fmap,
                 "exhaustive": config.exhaustive}
    return InjectionRecords(model, *data, meta=meta_info).sorted()


def brute_force_mismatch(net: Network, images, labels, image_ids, fmap, model, profile: RangeProfile) -> float:
    """Reference: enumerate every site and run a separate single-image inference per site."""
    from .quant import fake_quant_forward

    model = ErrorModel.parse(model)
    scheme = QuantScheme.from_profile(profile, net.dtype)
    fmap = FmapId(*fmap)
    sites = enumerate_all_sites(net, fmap, image_ids, model)
    goldens = {}
    mismatches = 0
    for s in sites:
        if s.image_id not in goldens:
            goldens[s.image_id] = fake_quant_forward(net, images[s.image_id], int(labels[s.image_id]), scheme)
        g = goldens[s.image_id]
        plane = g.fmap(fmap).copy()
        orig = plane[s.h, s.w]
        scale = scheme.scale_of(fmap)
        if model is ErrorModel.FXP_FLIP:
            plane[s.h, s.w] = flip_value(orig, s.bit, scale, net.dtype)
        else:
            plane[s.h, s.w] = dequantize(s.code, scale, net.dtype)
        t = fake_quant_forward(net, images[s.image_id], int(labels[s.image_id]), scheme, TapPoint(fmap, plane))
        mismatches += t.pred != g.pred
    return mismatches / len(sites)
