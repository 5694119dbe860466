import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_tiny
from fmapguard.errors import ShapeError, UndefinedMetricError
from fmapguard.injector import CampaignConfig, ErrorModel, InjectionRecords, run_campaign
from fmapguard.metrics import (HEURISTICS, aggregate_to_layers, compose_vulnerability, delta_loss,
                               heuristic_forward, heuristic_gain, heuristic_gradient, heuristic_profile,
                               injection_propp, mismatch_propp)
from fmapguard.nn import FmapId, LogitDiffObjective, LossObjective, backward, count_macs, forward
from oracles import naive_forward


def fake_records(layers, channels, mism, dl):
    n = len(layers)
    z = np.zeros(n, np.int64)
    golden = np.full(n, 0.5)
    return InjectionRecords(ErrorModel.FXP_FLIP, np.array(layers), np.array(channels), np.arange(n), z, z, z, z,
                            np.zeros(n), np.ones(n), golden, golden + np.array(dl), z,
                            np.array(mism, np.int64))


def test_single_fmap_metrics():
    r = fake_records([0] * 4, [1] * 4, [1, 0, 0, 1], [0.2, -0.4, 0.0, 1.0])
    assert mismatch_propp(r) == 0.5
    assert delta_loss(r) == pytest.approx(0.4)
    both = InjectionRecords.concat([r, fake_records([1], [0], [0], [0.0])])
    with pytest.raises(ValueError):
        mismatch_propp(both)
    with pytest.raises(ValueError):
        delta_loss(r.select(np.zeros(4, bool)))


def test_injection_propp_groups_by_fmap():
    r = fake_records([0, 0, 1, 1, 1], [0, 0, 0, 2, 2], [1, 0, 1, 0, 0], [0.1, 0.3, 0.5, 0.0, 0.2])
    mm = injection_propp(r, "mismatch")
    assert mm == {FmapId(0, 0): 0.5, FmapId(1, 0): 1.0, FmapId(1, 2): 0.0}
    dl = injection_propp(r, "delta_loss")
    assert dl[FmapId(0, 0)] == pytest.approx(0.2) and dl[FmapId(1, 2)] == pytest.approx(0.1)
    with pytest.raises(ValueError):
        injection_propp(r, "accuracy")


def test_forward_heuristics_match_naive(tiny, tiny_data):
    x, _ = tiny_data
    prof = heuristic_forward(tiny, x, batch=5)
    _, fmaps = naive_forward(tiny, x)
    for f in tiny.fmaps:
        a = fmaps[f.layer][:, f.channel]
        assert prof["max_neuron"][f] == pytest.approx(a.max(), abs=1e-5)
        assert prof["fmap_range"][f] == pytest.approx(a.max() - a.min(), abs=1e-5)
        assert prof["average_l2"][f] == pytest.approx(np.mean([np.linalg.norm(p) for p in a]), rel=1e-5)
    assert prof.sample_count == len(x)


def test_gradient_heuristic_matches_per_image_loop(tiny, tiny_data):
    x, y = tiny_data
    got = heuristic_gradient(tiny, x, y, batch=5)
    ref = {f: 0.0 for f in tiny.fmaps}
    for xi, yi in zip(x, y):
        g = backward(tiny, forward(tiny, xi, int(yi)), LossObjective())
        for f in tiny.fmaps:
            ref[f] += np.abs(g.fmap(f)).mean() / len(x)
    for f in tiny.fmaps:
        assert got[f] == pytest.approx(ref[f], rel=1e-5)


def _gain_reference(net, x):
    gain = {f: 0.0 for f in net.fmaps}
    mod = {f: 0.0 for f in net.fmaps}
    for xi in x:
        t = forward(net, xi, 0)
        z = t.logits.astype(np.float64)
        for i in range(net.class_count):
            if i == t.pred:
                continue
            gap = z[i] - z[t.pred]
            g = backward(net, t, LogitDiffObjective(i))
            for f in net.fmaps:
                gf = g.fmap(f).astype(np.float64)
                af = t.fmap(f).astype(np.float64)
                gain[f] += (gf ** 2).sum() / gap ** 2 / len(x)
                mod[f] += (af ** 2 * gf ** 2).sum() / gap ** 2 / len(x)
    return gain, mod


def test_gain_matches_per_class_loop(tiny, tiny_data):
    x, _ = tiny_data
    gain_ref, mod_ref = _gain_reference(tiny, x)
    diag = {}
    gain = heuristic_gain(tiny, x, "gain", diag)
    mod = heuristic_gain(tiny, x, "mod_gain")
    assert diag["skipped_gain_terms"] == 0
    for f in tiny.fmaps:
        assert gain[f] == pytest.approx(gain_ref[f], rel=1e-4)
        assert mod[f] == pytest.approx(mod_ref[f], rel=1e-4)
    with pytest.raises(ValueError):
        heuristic_gain(tiny, x, "max_gain")


def test_gain_skips_tied_logits():
    # a net whose dense layer is zero has all-equal logits: every term is skipped
    net = make_tiny(0)
    params = net.params()
    params[-1] = (np.zeros_like(params[-1][0]), np.zeros_like(params[-1][1]))
    net = net.with_params(params)
    diag = {}
    x = np.random.default_rng(0).random((4, 1, 6, 6)).astype(np.float32)
    scores = heuristic_gain(net, x, "gain", diag)
    assert diag["skipped_gain_terms"] == 4 * 2
    assert all(v == 0.0 for v in scores.values())


def test_heuristic_profile_has_all(tiny, tiny_data):
    x, y = tiny_data
    hp = heuristic_profile(tiny, x, y)
    assert set(hp.scores) == set(HEURISTICS)
    for name in HEURISTICS:
        assert set(hp[name]) == set(tiny.fmaps)
        assert all(np.isfinite(v) for v in hp[name].values())
    with pytest.raises(ValueError):
        heuristic_forward(tiny, x[:0])


def test_compose_normalization(desk, desk_census):
    rng = np.random.default_rng(0)
    prop = {f: float(rng.random()) for f in desk.fmaps}
    t = compose_vulnerability(desk_census, prop, "mismatch")
    assert abs(t.rel_v.sum() - 1.0) < 1e-9
    assert abs(t.orig_p.sum() + t.dense_orig_p - 1.0) < 1e-9
    assert t.dense_orig_p > 0
    i = t.index((1, 3))
    assert t.v_fmap[i] == pytest.approx(desk_census.orig_p(FmapId(1, 3)) * prop[FmapId(1, 3)])
    assert t.v_cnn == pytest.approx(t.v_fmap.sum())
    lay = aggregate_to_layers(t)
    assert lay.layers == (0, 1, 2)
    assert abs(lay.rel_v.sum() - 1.0) < 1e-9
    assert lay.v_layer.sum() == pytest.approx(t.v_cnn)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=5, max_size=5))
def test_rel_v_sums_to_one(values):
    net = make_tiny()
    census = count_macs(net)
    t = compose_vulnerability(census, dict(zip(net.fmaps, values)))
    if sum(values) == 0:
        assert not t.defined and np.all(np.isnan(t.rel_v))
        with pytest.raises(UndefinedMetricError):
            t.rel_v_map()
    else:
        assert abs(sum(t.rel_v_map().values()) - 1.0) < 1e-9


def test_compose_multi_metric_and_errors(tiny):
    census = count_macs(tiny)
    a = {f: 1.0 for f in tiny.fmaps}
    b = {f: float(i) for i, f in enumerate(tiny.fmaps)}
    t = compose_vulnerability(census, {"a": a, "b": b}, "b")
    assert t.metric == "b" and set(t.prop_p) == {"a", "b"}
    with pytest.raises(ValueError):
        compose_vulnerability(census, {"a": a}, "b")
    with pytest.raises(ShapeError):
        compose_vulnerability(census, {FmapId(0, 0): 1.0})
    with pytest.raises(ValueError):
        compose_vulnerability(census, {f: -1.0 for f in tiny.fmaps})


def test_campaign_metrics_are_normalized(desk, digits, desk_profile, desk_split, desk_census):
    # exercised on a real campaign for every error model
    for model in ErrorModel:
        r = run_campaign(desk, digits.test_images, digits.test_labels, desk_split.es_image_ids,
                         CampaignConfig(model, 32, master_seed=3), desk_profile)
        mm = injection_propp(r, "mismatch")
        dl = injection_propp(r, "delta_loss")
        assert all(0.0 <= v <= 1.0 for v in mm.values())
        assert all(v >= 0.0 for v in dl.values())
        for prop in (mm, dl):
            t = compose_vulnerability(desk_census, prop)
            assert abs(t.rel_v.sum() - 1.0) < 1e-9
