import csv
import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appcast.core import ClickEvent, ContextSnapshot, Timestamp
from appcast.evaluation import (
    MissingPairsError,
    OutOfOrderError,
    RoundRecord,
    attach_pairs,
    comparators,
    compute_report,
    cumulative_auc,
    macro,
    mean_series,
    metrics_csv,
    pair_loss,
    pairs_to_arrays,
    per_app_precision,
    precision,
    ranks_csv,
    record_from_dict,
    record_to_dict,
    regret_bound_check,
    replay,
    sliding_window,
    usage_rank_curve,
    windows_csv,
)
from appcast.predictors import AucPAPredictor, FrecencyPredictor, KMFUPredictor
from appcast.simulator import GroundTruthPredictor, generate_population

from . import oracles

DAY = 86400


def rec(dev, app, hit, day=0, auc=None, skipped=False):
    return RoundRecord(dev, day * DAY, day, 0, app, (), hit, auc_indicator=auc, skipped=skipped)


round_lists = st.lists(
    st.tuples(st.sampled_from(["d1", "d2", "d3"]), st.sampled_from("abcdefg"), st.booleans(),
              st.one_of(st.none(), st.integers(0, 1))),
    min_size=1, max_size=200,
)


@settings(max_examples=200, deadline=None)
@given(round_lists)
def test_metrics_match_brute_force(rounds):
    records = [rec(d, a, h, auc=x) for d, a, h, x in rounds]
    assert precision(records) == pytest.approx(oracles.precision(rounds), abs=1e-12)
    assert per_app_precision(records) == pytest.approx(oracles.per_app_precision(rounds), abs=1e-12)
    if any(x is not None for *_, x in rounds):
        assert cumulative_auc(records) == pytest.approx(oracles.cumulative_auc(rounds), abs=1e-12)
    else:
        assert cumulative_auc(records) is None
    curve = usage_rank_curve(records)
    expect = oracles.usage_rank_curve(rounds)
    assert set(curve) == set(expect)
    for r, (p, n) in expect.items():
        assert curve[r].support == n
        assert curve[r].precision == pytest.approx(p, abs=1e-12)
    supports = [curve[r].support for r in sorted(curve)]
    assert supports == sorted(supports, reverse=True)


def test_macro_averages_devices_not_rounds():
    records = [rec("a", "x", True)] * 9 + [rec("b", "x", False)]
    assert precision(records) == 0.9
    assert macro(records, precision) == 0.5


def test_auc_ignores_skipped_rounds():
    assert cumulative_auc([rec("d", "x", True, auc=1), rec("d", "x", True, auc=0, skipped=True)]) == 1.0
    assert cumulative_auc([rec("d", "x", True)]) is None


def test_untrained_model_scores_zero_auc():
    _, streams = generate_population(1, 3, seed=2)
    trace = replay(streams[0], AucPAPredictor(), 4)
    first = next(r for r in trace.records if r.auc_indicator is not None and not r.skipped)
    # weights are still all zero, so both scores are 0 and the strict comparison fails
    assert first.auc_indicator == 0 and first.loss == 1.0


# --- sliding windows --------------------------------------------------------------


def test_constant_hits_give_flat_series():
    records = [rec("d", "x", True, day=d) for d in range(20) for _ in range(3)]
    series = sliding_window(records, precision)
    assert [p.value for p in series] == [1.0] * 20


def test_step_in_hits_spreads_over_a_week():
    records = [rec("d", "x", d >= 10, day=d) for d in range(21)]
    values = {p.center: p.value for p in sliding_window(records, precision)}
    assert values[6] == 0.0 and values[14] == 1.0
    assert [values[c] for c in range(7, 14)] == pytest.approx([k / 7 for k in range(1, 8)])


def test_disjoint_windows_resum_to_totals():
    rng = np.random.default_rng(0)
    records = [rec("d", "x", bool(rng.random() < 0.3), day=int(rng.integers(0, 28))) for _ in range(500)]
    series = sliding_window(records, lambda rs: sum(r.hit for r in rs), window_days=7, step_days=7,
                            first_center=3)
    assert sum(p.value for p in series) == sum(r.hit for r in records)
    assert sum(p.n_rounds for p in series) == len(records)


def test_mean_series_skips_thin_windows():
    thin = [rec("a", "x", False, day=0)]
    thick = [rec("b", "x", True, day=0) for _ in range(20)]
    s = [sliding_window(thin, precision), sliding_window(thick, precision)]
    assert mean_series(s) == {0: 1.0}
    assert mean_series(s, skip_low_support=False) == {0: 0.5}


# --- replay -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_stream():
    personas, streams = generate_population(3, 40, seed=13)
    events = sorted((e for s in streams for e in s), key=lambda e: (e.ctx.ts.seconds, e.device_id))
    return personas, events


def test_home_clicks_are_not_rounds(small_stream):
    _, events = small_stream
    trace = replay(events, KMFUPredictor, 4)
    assert len(trace.records) == sum(not e.is_home for e in events)
    assert all(r.hit == (r.app in r.predicted) for r in trace.records)
    assert trace.devices == ["dev0000", "dev0001", "dev0002"]


def test_out_of_order_is_rejected():
    a = ClickEvent("d", ContextSnapshot(Timestamp(10)), "x")
    b = ClickEvent("d", ContextSnapshot(Timestamp(5)), "x")
    with pytest.raises(OutOfOrderError) as err:
        replay([a, b], KMFUPredictor, 4)
    assert err.value.index == 1


def test_kmfu_precision_tracks_top_four_share():
    personas, streams = generate_population(1, 120, seed=21)
    events = streams[0]
    tray = Counter(e.app for e in events if not e.is_home)
    q = sum(n for _, n in tray.most_common(4)) / sum(tray.values())
    trace = replay(events, KMFUPredictor(), 4)
    late = [r for r in trace.records if r.day >= 30]
    assert precision(late) == pytest.approx(q, abs=0.03)


def test_ground_truth_beats_learners(small_stream):
    personas, events = small_stream
    oracle = precision(replay(events, lambda: GroundTruthPredictor(personas), 4).records)
    for factory in (KMFUPredictor, FrecencyPredictor, AucPAPredictor):
        assert oracle > precision(replay(events, factory, 4).records)


def test_resume_matches_uninterrupted(small_stream):
    _, events = small_stream
    full = replay(events, lambda: AucPAPredictor(seed=1), 4)
    part = replay(events, lambda: AucPAPredictor(seed=1), 4, stop_after=1500)
    state = part.resume
    state = {**state, "predictors": {d: AucPAPredictor.from_dict(p.to_dict()) for d, p in state["predictors"].items()}}
    rest = replay(events, lambda: AucPAPredictor(seed=1), 4, start=state)
    assert [record_to_dict(r) for r in rest.records] == [record_to_dict(r) for r in full.records]


def test_report_and_csv(small_stream):
    _, events = small_stream
    trace = replay(events, FrecencyPredictor, 4)
    report = compute_report(trace)
    assert report.cumulative_auc is None
    assert report.precision == pytest.approx(np.mean([d["precision"] for d in report.per_device.values()]))
    rows = list(csv.DictReader(io.StringIO(metrics_csv({"frecency": report}))))
    assert {r["device"] for r in rows} == {"ALL", "dev0000", "dev0001", "dev0002"}
    assert len(list(csv.reader(io.StringIO(windows_csv({"f": report}))))) > 40
    ranks = list(csv.DictReader(io.StringIO(ranks_csv({"f": report}))))
    assert [int(r["rank"]) for r in ranks] == sorted(int(r["rank"]) for r in ranks)


def test_record_dict_round_trip():
    r = RoundRecord("d", 5, 0, 3, "x", ("x", "y"), True, 0.5, 0.02, 1, False)
    assert record_from_dict(record_to_dict(r)) == r


# --- regret bound ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def lambda_one_run():
    _, streams = generate_population(1, 25, seed=17)
    return replay(streams[0], AucPAPredictor(lam=1.0, store_pairs=True), 4)


def test_zero_comparator_gives_two(lambda_one_run):
    trace = lambda_one_run
    final = next(iter(trace.final.values())).theta
    (_, w, W), = comparators("zero", final)
    rep = regret_bound_check(trace.records, w, W, 1.0, "zero")
    assert rep.rhs == pytest.approx(2.0, abs=1e-12)
    assert rep.holds and rep.in_hypothesis


def test_final_and_random_comparators_hold(lambda_one_run):
    trace = lambda_one_run
    final = next(iter(trace.final.values())).theta
    labels = []
    for label, w, W in list(comparators("final", final)) + list(comparators("random:5", final, seed=3)):
        if label.startswith("random"):
            assert float(w @ w + np.sum(W * W)) == pytest.approx(1.0)
        assert regret_bound_check(trace.records, w, W, 1.0, label).holds
        labels.append(label)
    assert labels == ["final"] + [f"random:{i}" for i in range(5)]


def test_bound_flags_out_of_hypothesis_lambda(lambda_one_run):
    final = next(iter(lambda_one_run.final.values())).theta
    rep = regret_bound_check(lambda_one_run.records, *final, lam=50.0)
    assert not rep.in_hypothesis


def test_bound_needs_pairs(small_stream):
    _, events = small_stream
    trace = replay(events[:400], AucPAPredictor, 4)
    with pytest.raises(MissingPairsError):
        regret_bound_check(trace.records, np.zeros(9), np.zeros((200, 151)), 1.0)


def test_pairs_survive_array_round_trip(lambda_one_run):
    trace = lambda_one_run
    arrays = pairs_to_arrays(trace.records)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    buf.seek(0)
    copies = [record_from_dict(record_to_dict(r)) for r in trace.records]
    with np.load(buf) as loaded:
        attach_pairs(copies, loaded)
    w, W = next(iter(trace.final.values())).theta
    for a, b in zip(trace.records, copies):
        assert (a.pair is None) == (b.pair is None)
        if a.pair is not None:
            assert pair_loss(a.pair, w, W) == pair_loss(b.pair, w, W)
