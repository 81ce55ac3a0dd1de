import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appcast.core import ClickEvent, ContextSnapshot, GeoPoint, Timestamp
from appcast.predictors import (
    NORM_CAP,
    AucPAPredictor,
    FrecencyPredictor,
    KMFUPredictor,
    NegativeContext,
    NegativeStore,
    compute_tau,
    frecency_predict,
    hinge_loss,
    joint_scale,
    kmfu_predict,
    predict_top_k,
    predictor_from_dict,
)
from appcast.simulator import generate_population

from . import oracles

TUESDAY = 1422921600


def click(app, t, slot="app_tray", geo=None, **kw):
    return ClickEvent("d", ContextSnapshot(Timestamp(t), geo, **kw), app, slot)


# --- ranking helpers -------------------------------------------------------------


def test_kmfu_example():
    got = kmfu_predict({"A": 10, "B": 5, "C": 3, "D": 2, "E": 1}, 4)
    assert got.app_ids == ["A", "B", "C", "D"]
    assert kmfu_predict({}, 4).app_ids == []


def test_frecency_prefers_recent_on_equal_counts():
    day = 86400
    got = frecency_predict({"old": [0, day], "new": [40 * day, 41 * day]}, 41 * day, 2)
    assert got.app_ids == ["new", "old"]
    assert frecency_predict({"x": [5]}, 5, 4).app_ids == ["x"]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 14).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([-1.0, 0.0, 0.25, 0.5, 2.0]), min_size=n, max_size=n),
    st.lists(st.sampled_from([0.0, 0.1, 1.0, 3.0]), min_size=n, max_size=n),
    st.sets(st.integers(0, n - 1)),
    st.integers(1, 6),
)))
def test_top_k_matches_full_sort(args):
    scores, frec, cand, k = args
    names = [f"app{i:02d}" for i in range(len(scores))]
    cand = sorted(cand)
    got = predict_top_k(scores, frec, names, cand, k).app_ids
    assert got == oracles.top_k(scores, frec, names, cand, k)


def test_hinge_and_tau():
    assert hinge_loss(1.0, 0.0) == 0.0
    assert hinge_loss(0.2, 0.1) == pytest.approx(0.9)
    assert compute_tau(0.5, 1.0, 50.0) == 0.02
    assert compute_tau(0.005, 1.0, 50.0) == 0.005
    assert compute_tau(0.0, 0.0, 50.0) == 0.0
    assert compute_tau(0.3, 0.0, 50.0) == 0.02


def test_joint_scale_caps_norm():
    phi = np.array([[3.0, 4.0], [0.1, 0.0]])
    psi = np.zeros(3)
    s = joint_scale(phi, psi)
    assert s[0] == pytest.approx(NORM_CAP / 5.0)
    assert s[1] == 1.0


# --- baselines ----------------------------------------------------------------------


def test_home_clicks_excluded_from_candidates():
    for p in (KMFUPredictor(), FrecencyPredictor()):
        for i in range(5):
            p.observe(click("dock.app", 100 + i, slot="app_dock"))
        p.observe(click("tray.app", 200))
        assert p.predict(ContextSnapshot(Timestamp(300)), 4).app_ids == ["tray.app"]


def test_baseline_snapshots_round_trip():
    for p in (KMFUPredictor(), FrecencyPredictor(0.2, 10)):
        for i in range(30):
            p.observe(click(f"a{i % 7}", 1000 * i))
        clone = predictor_from_dict(json.loads(json.dumps(p.to_dict())))
        ctx = ContextSnapshot(Timestamp(40_000))
        assert clone.predict(ctx, 4) == p.predict(ctx, 4)


# --- negative reservoirs --------------------------------------------------------------


def test_first_click_seeds_other_reservoirs():
    p = AucPAPredictor()
    p.observe(click("A", TUESDAY))
    p.observe(click("B", TUESDAY + 60))
    a, b = p.registry.index["A"], p.registry.index["B"]
    assert p.negatives.size(a) == 1
    assert p.negatives.size(b) == 0


def test_single_app_device_never_gets_negatives():
    p = AucPAPredictor()
    for i in range(20):
        rep = p.observe(click("only", TUESDAY + 60 * i))
        assert rep.skipped and rep.reason == "no-negatives"
    assert p.negatives.size(0) == 0


def test_reservoir_is_uniform():
    # every one of 1000 apps is an independent reservoir over the same 10k offers
    n_apps, offers, cap = 1000, 10_000, 64
    store = NegativeStore(cap, np.random.default_rng(123))
    dummy = NegativeContext(np.zeros(1), np.zeros((0, 9)))
    for _ in range(offers):
        store.offer(store.add(dummy), n_apps)
    assert np.all(store.sizes[:n_apps] == cap)
    kept = np.bincount(store.slots[:n_apps].ravel(), minlength=offers)
    expected = n_apps * cap / offers
    chi2 = float(np.sum((kept - expected) ** 2 / expected))
    dof = offers - 1
    assert abs(chi2 - dof) < 5 * math.sqrt(2 * dof)
    # early and late offers are kept equally often
    assert abs(kept[: offers // 2].sum() - kept[offers // 2:].sum()) < 5 * math.sqrt(n_apps * cap)


# --- AUC-PA -------------------------------------------------------------------------------


def test_score_of_fresh_click_is_hand_computable():
    p = AucPAPredictor()
    t = TUESDAY + 9 * 3600
    p.observe(click("a", t))
    p.w[:] = 0.0
    p.w[0] = 1.0
    p.W[:] = 0.0
    # phi = six ones (recency, time of day), psi = hour, weekday, part of day, top frecency 1.0
    assert p.score(ContextSnapshot(Timestamp(t)), "a") == pytest.approx(NORM_CAP / math.sqrt(10.0), abs=1e-12)


def test_update_is_tau_times_difference():
    ps, streams = generate_population(1, 6, seed=5)
    p = AucPAPredictor(lam=1.0, store_pairs=True)
    seen = 0
    for ev in streams[0]:
        w0, W0 = p.w.copy(), p.W.copy()
        rep = p.observe(ev)
        if rep.pair is None or rep.tau == 0.0:
            continue
        pair = rep.pair
        a, b = pair.app, p.registry.index[rep.negative_app]
        phi_b = pair.negative.phi_for(pair.n_apps)[b]
        s_pos = joint_scale(pair.phi_pos[None, :], pair.psi_pos)[0]
        s_neg = joint_scale(phi_b[None, :], pair.negative.psi)[0]
        expect_w = w0 + rep.tau * (s_pos * pair.phi_pos - s_neg * phi_b)
        expect_W = np.zeros_like(p.W)
        expect_W[: len(W0)] = W0
        expect_W[a] += rep.tau * s_pos * pair.psi_pos
        expect_W[b] -= rep.tau * s_neg * pair.negative.psi
        np.testing.assert_allclose(p.w, expect_w, rtol=0, atol=1e-15)
        np.testing.assert_allclose(p.W, expect_W, rtol=0, atol=1e-15)
        seen += 1
    assert seen > 50


def test_tau_never_exceeds_cap():
    _, streams = generate_population(1, 10, seed=8)
    p = AucPAPredictor()
    taus = [p.observe(ev).tau for ev in streams[0]]
    assert max(taus) <= 0.02 + 1e-15
    assert min(taus) >= 0.0
    assert sum(t == 0.02 for t in taus) > 0


def test_c_and_lambda_are_exclusive():
    with pytest.raises(ValueError):
        AucPAPredictor(C=0.1, lam=10)
    assert AucPAPredictor(C=0.5).lam == 2.0
    assert AucPAPredictor().lam == 50.0


def test_home_click_updates_history_only():
    p = AucPAPredictor()
    p.observe(click("x", TUESDAY))
    p.observe(click("y", TUESDAY + 10))
    w, W = p.theta
    rep = p.observe(click("x", TUESDAY + 20, slot="home_screen"))
    assert rep.skipped and rep.reason == "home"
    assert np.array_equal(p.theta[0], w) and np.array_equal(p.theta[1], W)
    assert p.history.total(p.registry.index["x"]) == 2
    assert p.predict(ContextSnapshot(Timestamp(TUESDAY + 30)), 4).app_ids == ["y"]


def test_aucpa_snapshot_reproduces_predictions():
    _, streams = generate_population(1, 8, seed=11)
    evs = streams[0]
    half = len(evs) // 2
    p = AucPAPredictor(seed=4)
    for ev in evs[:half]:
        p.observe(ev)
    clone = AucPAPredictor.from_dict(json.loads(json.dumps(p.to_dict())))
    for ev in evs[half:]:
        assert clone.predict(ev.ctx, 4) == p.predict(ev.ctx, 4)
        a, b = p.observe(ev), clone.observe(ev)
        assert (a.loss, a.tau, a.negative_app) == (b.loss, b.tau, b.negative_app)
    assert json.dumps(clone.to_dict()) == json.dumps(p.to_dict())


def test_predict_fills_with_frecency_when_few_positive():
    p = AucPAPredictor()
    for i, app in enumerate("abcab"):
        p.observe(click(app, TUESDAY + 60 * i, geo=GeoPoint(1.0, 1.0)))
    got = p.predict(ContextSnapshot(Timestamp(TUESDAY + 400)), 3)
    assert sorted(got.app_ids) == ["a", "b", "c"]
    assert len(set(got.app_ids)) == 3
