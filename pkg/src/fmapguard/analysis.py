"""Evaluation protocol: splits, cumulative curves, convergence, coverage selection."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError
from .injector import CampaignConfig, ErrorModel, InjectionRecords, run_campaign
from .metrics import compose_vulnerability, injection_propp
from .nn import FmapId, MacCensus, Network, backprop_fmaps, count_macs, forward_batch, propagate, softmax
from .seeding import derive_seed

SPLIT_RATIO = 0.8
MIN_CORRECT = 10
COVERAGE_TOL = 1e-9


# ---------------------------------------------------------------- split

@dataclass(frozen=True, eq=False)
class SplitSpec:
    es_image_ids: np.ndarray
    ts_image_ids: np.ndarray
    seed: int
    split_ratio: float = SPLIT_RATIO

    def ids(self, split: str) -> np.ndarray:
        split = split.upper()
        if split not in ("ES", "TS"):
            raise ValueError(f"split must be ES or TS, got {split!r}")
        return self.es_image_ids if split == "ES" else self.ts_image_ids


def correctly_classified(net: Network, images, labels, batch=512) -> np.ndarray:
    keep = []
    for lo in range(0, len(images), batch):
        t = forward_batch(net, images[lo:lo + batch], labels[lo:lo + batch])
        keep.append(np.flatnonzero(t.preds == t.labels) + lo)
    return np.concatenate(keep) if keep else np.empty(0, np.int64)


def split_dataset(net: Network, images, labels, seed: int, ratio=SPLIT_RATIO) -> SplitSpec:
    """Keep correctly classified images, shuffle by seed, cut into ES and TS."""
    if len(images) == 0:
        raise ValueError("dataset is empty")
    good = correctly_classified(net, images, labels)
    if len(good) < MIN_CORRECT:
        raise ValueError(f"only {len(good)} correctly classified images; need at least {MIN_CORRECT}")
    order = np.random.default_rng(derive_seed(seed, "split")).permutation(good)
    cut = int(np.floor(ratio * len(order)))
    return SplitSpec(np.sort(order[:cut]), np.sort(order[cut:]), seed, ratio)


# ---------------------------------------------------------------- curves

@dataclass(frozen=True, eq=False)
class VulnCurve:
    fmap_order: tuple
    cumulative: np.ndarray

    def __len__(self):
        return len(self.fmap_order)


def rank_fmaps(scores: dict) -> list[FmapId]:
    """Descending by score; ties broken by ascending FmapId."""
    return sorted(scores, key=lambda f: (-scores[f], tuple(f)))


def build_curve(ordering_scores: dict, baseline_rel_v: dict) -> VulnCurve:
    """Accumulate baseline relV in the order the scores rank the fmaps."""
    if set(ordering_scores) != set(baseline_rel_v):
        raise ValueError("ordering scores and baseline cover different fmaps")
    order = rank_fmaps(ordering_scores)
    cum = np.cumsum([baseline_rel_v[f] for f in order])
    return VulnCurve(tuple(order), cum)


def manhattan_distance(a: VulnCurve, b: VulnCurve) -> float:
    """Mean absolute pointwise difference of two cumulative curves."""
    ca, cb = np.asarray(getattr(a, "cumulative", a)), np.asarray(getattr(b, "cumulative", b))
    if ca.shape != cb.shape:
        raise ValueError(f"curve lengths differ: {len(ca)} vs {len(cb)}")
    return float(np.mean(np.abs(ca - cb)))


def scores_v(census: MacCensus, prop_p: dict) -> dict:
    """V_fmap per fmap; ranks like relV and stays defined when everything is zero."""
    return {f: census.orig_p(f) * float(prop_p[f]) for f in census.fmap_macs}


def metric_distance(census: MacCensus, prop_p: dict, baseline_rel_v: dict) -> float:
    """Distance between a metric's curve and the baseline's self-ordered curve."""
    return manhattan_distance(build_curve(scores_v(census, prop_p), baseline_rel_v),
                              build_curve(baseline_rel_v, baseline_rel_v))


# ---------------------------------------------------------------- convergence

@dataclass(frozen=True)
class ConvergenceRow:
    metric: str
    inj_per_fmap: int
    distance: float


def convergence_study(census: MacCensus, records: InjectionRecords, oracle: InjectionRecords, sweep,
                      metrics=("mismatch", "delta_loss")) -> list[ConvergenceRow]:
    """Distance to the oracle curve for every sweep point and metric.

    Sweep point k uses the first k records of every fmap in ``records``; the
    oracle's mismatch relV is the baseline.
    """
    sweep = sorted(set(int(k) for k in sweep))
    if not sweep:
        raise ValueError("sweep is empty")
    n_oracle = int(oracle.ordinal.max()) + 1
    if sweep[-1] >= n_oracle:
        raise ValueError(f"oracle ({n_oracle} inj/fmap) must exceed every sweep point (max {sweep[-1]})")
    if sweep[-1] > int(records.ordinal.max()) + 1:
        raise ValueError("records hold fewer injections than the largest sweep point")
    base = compose_vulnerability(census, injection_propp(oracle, "mismatch"), "mismatch")
    base_rel = base.rel_v_map()
    rows = []
    for k in sweep:
        part = records.prefix(k)
        for m in metrics:
            rows.append(ConvergenceRow(m, k, metric_distance(census, injection_propp(part, m), base_rel)))
    return rows


def run_convergence(net: Network, images, labels, split_ids, profile, sweep, oracle_inj, error_model, seed,
                    threads=None, metrics=("mismatch", "delta_loss")) -> list[ConvergenceRow]:
    """Campaign-driving wrapper: one sweep campaign at max(sweep), one independent oracle campaign."""
    model = ErrorModel.parse(error_model)
    sweep = sorted(set(int(k) for k in sweep))
    if not sweep:
        raise ValueError("sweep is empty")
    runs = run_campaign(net, images, labels, split_ids,
                        CampaignConfig(model, sweep[-1], master_seed=derive_seed(seed, "sweep"), threads=threads),
                        profile)
    oracle = run_campaign(net, images, labels, split_ids,
                          CampaignConfig(model, oracle_inj, master_seed=derive_seed(seed, "oracle"), threads=threads),
                          profile)
    return convergence_study(count_macs(net), runs, oracle, sweep, metrics)


# ---------------------------------------------------------------- coverage

@dataclass(frozen=True)
class CoveragePlan:
    selected_fmaps: tuple
    predicted_coverage: float
    mac_overhead_fraction: float
    target: float = 1.0
    metric: str = ""


def _ordered(table):
    if not table.defined:
        raise UndefinedMetricError(f"relative vulnerability undefined for metric {table.metric!r} (V_CNN = 0)")
    rel = table.rel_v_map()
    return rank_fmaps(rel), rel


def greedy_select(table, census: MacCensus, target_coverage: float) -> CoveragePlan:
    """Shortest prefix of the descending-relV order whose relV reaches the target."""
    if not 0 < target_coverage <= 1:
        raise ValueError(f"target coverage must be in (0, 1], got {target_coverage}")
    order, rel = _ordered(table)
    cum, macs, chosen = 0.0, 0, []
    for f in order:
        if cum >= target_coverage - COVERAGE_TOL:
            break
        chosen.append(f)
        cum += rel[f]
        macs += census.fmap_macs[f]
    return CoveragePlan(tuple(chosen), min(cum, 1.0), macs / census.total, float(target_coverage), table.metric)


def empty_plan() -> CoveragePlan:
    return CoveragePlan((), 0.0, 0.0, 0.0)


def coverage_curve(table, census: MacCensus):
    """(overhead, coverage) after each greedy prefix, starting from the empty prefix."""
    order, rel = _ordered(table)
    cov = np.concatenate([[0.0], np.cumsum([rel[f] for f in order])])
    over = np.concatenate([[0.0], np.cumsum([census.fmap_macs[f] for f in order]) / census.total])
    return over, cov


@dataclass(frozen=True)
class CoverageValidation:
    predicted: float
    actual: float  # NaN when undefined
    defined: bool
    mismatches: int


def record_weights(records: InjectionRecords, census: MacCensus) -> np.ndarray:
    """Per-record weight origP_f / n_f, so that each fmap's records carry its error share."""
    key = [FmapId(int(a), int(b)) for a, b in zip(records.layer, records.channel)]
    counts = {}
    for f in key:
        counts[f] = counts.get(f, 0) + 1
    return np.array([census.orig_p(f) / counts[f] for f in key])


def validate_coverage(plan: CoveragePlan, records: InjectionRecords, census: MacCensus) -> CoverageValidation:
    """Actual coverage: error-weighted share of TS mismatches that land in selected fmaps."""
    if len(records) == 0:
        raise ValueError("no injection records")
    mism = records.mismatch
    if not mism.any():
        return CoverageValidation(plan.predicted_coverage, float("nan"), False, 0)
    w = record_weights(records, census)
    sel = set(plan.selected_fmaps)
    inside = np.array([FmapId(int(a), int(b)) in sel for a, b in zip(records.layer, records.channel)], bool)
    actual = float(w[mism & inside].sum() / w[mism].sum())
    return CoverageValidation(plan.predicted_coverage, actual, True, int(mism.sum()))


# ---------------------------------------------------------------- runtime model

FORWARD_ONLY = ("max_neuron", "fmap_range", "average_l2")


def predict_runtime(technique, sample_count, fwd_time, bwd_time=0.0, inj_per_fmap=0, fmap_count=0, m=2) -> float:
    """Coarse analytic cost in the units of ``fwd_time``/``bwd_time`` (per-sample pass times)."""
    if technique in FORWARD_ONLY:
        return sample_count * fwd_time
    if technique == "gradient":
        return sample_count * (fwd_time + bwd_time)
    if technique in ("gain", "mod_gain"):
        return sample_count * (fwd_time + (m - 1) * bwd_time)
    if technique in ("mismatch", "delta_loss", "injection"):
        return sample_count * fwd_time + fmap_count * inj_per_fmap * fwd_time
    raise ValueError(f"unknown technique {technique!r}")


def measure_pass_times(net: Network, images, labels, repeats=3, batch=256):
    """Best-of-``repeats`` per-sample forward and backward times in seconds."""
    x = np.ascontiguousarray(images[:batch], dtype=net.dtype)
    y = np.asarray(labels[:batch])
    fwd = bwd = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        logits, _, inputs = propagate(net, x, keep_inputs=True)
        t1 = time.perf_counter()
        seed = softmax(logits)
        seed[np.arange(len(y)), y] -= 1.0
        backprop_fmaps(net, inputs, seed)
        t2 = time.perf_counter()
        fwd, bwd = min(fwd, (t1 - t0) / len(x)), min(bwd, (t2 - t1) / len(x))
    return fwd, bwd
