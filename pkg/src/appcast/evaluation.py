"""Replay harness, metrics and the regret-bound check."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .core import SECONDS_PER_DAY, ClickEvent, EventLogError
from .predictors import PSI_DIM, PHI_DIM, NegativeContext, Predictor, RoundPair, pair_loss

WARMUP_DAYS = 3
LOW_SUPPORT = 10


class OutOfOrderError(EventLogError):
    def __init__(self, index: int, device_id: str):
        self.index = index
        super().__init__(f"event {index} for device {device_id!r} is earlier than the previous one")


@dataclass
class RoundRecord:
    device_id: str
    t: int
    day: int
    event_index: int
    app: str
    predicted: tuple[str, ...]
    hit: bool
    loss: float = 0.0
    tau: float = 0.0
    auc_indicator: Optional[int] = None
    skipped: bool = False
    pair: Optional[RoundPair] = None


@dataclass
class RunTrace:
    records: list[RoundRecord] = field(default_factory=list)
    k: int = 4
    algo: str = ""
    lam: Optional[float] = None
    final: dict = field(default_factory=dict)  # device -> predictor
    resume: dict = field(default_factory=dict)

    def for_device(self, device_id: str) -> list[RoundRecord]:
        return [r for r in self.records if r.device_id == device_id]

    @property
    def devices(self) -> list[str]:
        return sorted({r.device_id for r in self.records})


# --- metrics over plain round lists ---------------------------------------------


def precision(records: Sequence[RoundRecord]) -> Optional[float]:
    if not records:
        return None
    return sum(r.hit for r in records) / len(records)


def per_app_precision(records: Sequence[RoundRecord]) -> Optional[float]:
    if not records:
        return None
    hits: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        h = hits[r.app]
        h[0] += r.hit
        h[1] += 1
    return float(np.mean([h / n for h, n in hits.values()]))


def cumulative_auc(records: Sequence[RoundRecord]) -> Optional[float]:
    vals = [r.auc_indicator for r in records if not r.skipped and r.auc_indicator is not None]
    if not vals:
        return None
    return sum(vals) / len(vals)


def macro(records: Sequence[RoundRecord], metric: Callable) -> Optional[float]:
    """Mean of ``metric`` over devices (devices with no rounds are left out)."""
    by_dev: dict[str, list[RoundRecord]] = defaultdict(list)
    for r in records:
        by_dev[r.device_id].append(r)
    vals = [v for v in (metric(rs) for rs in by_dev.values()) if v is not None]
    return float(np.mean(vals)) if vals else None


def usage_ranks(records: Sequence[RoundRecord]) -> dict[str, dict[str, int]]:
    """device -> app -> rank, 0 for the most clicked app (ties broken by app id)."""
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for r in records:
        counts[r.device_id][r.app] += 1
    out = {}
    for dev, c in counts.items():
        order = sorted(c, key=lambda a: (-c[a], a))
        out[dev] = {a: i for i, a in enumerate(order)}
    return out


@dataclass
class RankPoint:
    rank: int
    precision: float
    support: int


def usage_rank_curve(records: Sequence[RoundRecord],
                     ranks: Optional[dict[str, dict[str, int]]] = None) -> dict[int, RankPoint]:
    """Precision of rounds whose clicked app has rank r, averaged over devices."""
    ranks = usage_ranks(records) if ranks is None else ranks
    cells: dict[tuple[str, int], list[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        c = cells[(r.device_id, ranks[r.device_id][r.app])]
        c[0] += r.hit
        c[1] += 1
    per_rank: dict[int, list[float]] = defaultdict(list)
    for (dev, rank), (h, n) in cells.items():
        per_rank[rank].append(h / n)
    return {rank: RankPoint(rank, float(np.mean(v)), len(v)) for rank, v in sorted(per_rank.items())}


def rank_band(curve: dict[int, RankPoint], lo: int, hi: Optional[int] = None) -> Optional[float]:
    """Unweighted mean of curve precision over ranks lo..hi (inclusive)."""
    vals = [p.precision for r, p in curve.items() if r >= lo and (hi is None or r <= hi)]
    return float(np.mean(vals)) if vals else None


def pooled_rank_precision(records: Sequence[RoundRecord], ranks: dict[str, dict[str, int]], lo: int) -> Optional[float]:
    """Per-device precision over all rounds with rank >= lo, averaged over devices."""
    sel = [r for r in records if ranks[r.device_id][r.app] >= lo]
    return macro(sel, precision)


@dataclass
class WindowPoint:
    center: int
    value: Optional[float]
    n_rounds: int

    @property
    def low_support(self) -> bool:
        return self.n_rounds < LOW_SUPPORT


def sliding_window(records: Sequence[RoundRecord], metric: Callable = per_app_precision,
                   window_days: int = 7, step_days: int = 1, first_center: int = 0,
                   last_day: Optional[int] = None) -> list[WindowPoint]:
    """Metric over centered windows ``[c - window//2, c + window - 1 - window//2]`` of stream days."""
    if window_days < 1 or step_days < 1:
        raise ValueError("window and step must be >= 1 day")
    by_day: dict[int, list[RoundRecord]] = defaultdict(list)
    for r in records:
        by_day[r.day].append(r)
    if last_day is None:
        last_day = max(by_day) if by_day else -1
    half = window_days // 2
    out = []
    for c in range(first_center, last_day + 1, step_days):
        sel = [r for d in range(c - half, c - half + window_days) for r in by_day.get(d, ())]
        out.append(WindowPoint(c, metric(sel), len(sel)))
    return out


def mean_series(series: Iterable[list[WindowPoint]], skip_low_support: bool = True) -> dict[int, float]:
    """Average per-device window series by center day."""
    acc: dict[int, list[float]] = defaultdict(list)
    for s in series:
        for p in s:
            if p.value is None or (skip_low_support and p.low_support):
                continue
            acc[p.center].append(p.value)
    return {c: float(np.mean(v)) for c, v in sorted(acc.items())}


# --- regret bound ------------------------------------------------------------------


@dataclass
class BoundReport:
    comparator: str
    lam: float
    T: int
    auc: float
    lhs: float
    rhs: float
    norm_sq: float
    loss_sum: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs

    @property
    def in_hypothesis(self) -> bool:
        return self.lam <= 1.0

    def to_dict(self) -> dict:
        return {
            "comparator": self.comparator, "lambda": self.lam, "T": self.T, "auc": self.auc,
            "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "norm_sq": self.norm_sq,
            "loss_sum": self.loss_sum, "holds": self.holds, "in_hypothesis": self.in_hypothesis,
        }


class MissingPairsError(ValueError):
    pass


def learning_rounds(records: Sequence[RoundRecord]) -> list[RoundRecord]:
    rounds = [r for r in records if not r.skipped and r.auc_indicator is not None]
    if rounds and any(r.pair is None for r in rounds):
        raise MissingPairsError("trace has no stored pairs; rerun with pair storage enabled")
    return rounds


def regret_bound_check(records: Sequence[RoundRecord], w: np.ndarray, W: np.ndarray, lam: float,
                       comparator: str = "custom") -> BoundReport:
    """Evaluate both sides of the cumulative-AUC bound for comparator ``(w, W)``."""
    rounds = learning_rounds(records)
    if not rounds:
        raise MissingPairsError("no learning rounds in trace")
    T = len(rounds)
    auc = sum(r.auc_indicator for r in rounds) / T
    loss_sum = math.fsum(pair_loss(r.pair, w, W) for r in rounds)
    norm_sq = float(w @ w + np.sum(W * W))
    rhs = lam * norm_sq / T + 2.0 * loss_sum / T
    return BoundReport(comparator, lam, T, auc, 1.0 - auc, rhs, norm_sq, loss_sum)


def comparators(kind: str, final: tuple[np.ndarray, np.ndarray], seed: int = 0):
    """Yield ``(label, w, W)`` for 'zero', 'final' or 'random:N' (unit norm)."""
    w_final, W_final = final
    n = len(W_final)
    if kind == "zero":
        yield "zero", np.zeros(PHI_DIM), np.zeros((n, PSI_DIM))
    elif kind == "final":
        yield "final", w_final, W_final
    elif kind.startswith("random:"):
        count = int(kind.split(":", 1)[1])
        if count < 1:
            raise ValueError("random:N needs N >= 1")
        rng = np.random.default_rng(seed)
        for i in range(count):
            v = rng.standard_normal(PHI_DIM + n * PSI_DIM)
            v /= np.linalg.norm(v)
            yield f"random:{i}", v[:PHI_DIM], v[PHI_DIM:].reshape(n, PSI_DIM)
    else:
        raise ValueError(f"unknown comparator {kind!r}")


# --- replay --------------------------------------------------------------------


PredictorSource = Union[Predictor, Callable[[], Predictor]]


def replay(events: Iterable[ClickEvent], predictor: PredictorSource, k: int = 4,
           start: Optional[dict] = None, stop_after: Optional[int] = None) -> RunTrace:
    """Predict-then-observe over a stream; home/dock clicks are observed only.

    ``predictor`` is either one predictor (single-device streams) or a factory
    called once per device. ``start`` resumes from a previous partial replay
    (see :func:`replay_state`); ``stop_after`` stops after that many events.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    factory = predictor if not isinstance(predictor, Predictor) else None
    trace = RunTrace(k=k)
    preds: dict[str, Predictor] = {}
    last_ts: dict[str, int] = {}
    first_ts: dict[str, int] = {}
    skip = 0
    if start is not None:
        preds, last_ts, first_ts = start["predictors"], dict(start["last_ts"]), dict(start["first_ts"])
        trace.records = list(start.get("records", []))
        skip = start["position"]
    position = 0
    for i, ev in enumerate(events):
        if i < skip:
            continue
        if stop_after is not None and position >= stop_after:
            break
        position += 1
        dev = ev.device_id
        t = ev.ctx.ts.seconds
        if dev in last_ts and t < last_ts[dev]:
            raise OutOfOrderError(i, dev)
        last_ts[dev] = t
        first_ts.setdefault(dev, t)
        p = preds.get(dev)
        if p is None:
            if factory is None:
                if preds:
                    raise ValueError("a single predictor instance cannot replay several devices")
                p = predictor
            else:
                p = factory()
            preds[dev] = p
        if ev.is_home:
            p.observe(ev)
            continue
        pset = p.predict(ev.ctx, k)
        rep = p.observe(ev)
        trace.records.append(RoundRecord(
            device_id=dev, t=t, day=(t - first_ts[dev]) // SECONDS_PER_DAY, event_index=i,
            app=ev.app, predicted=tuple(pset.app_ids), hit=ev.app in pset,
            loss=rep.loss, tau=rep.tau, auc_indicator=rep.auc_indicator, skipped=rep.skipped,
            pair=rep.pair,
        ))
    trace.final = preds
    trace.algo = next(iter(preds.values())).name if preds else ""
    lam = getattr(next(iter(preds.values()), None), "lam", None)
    trace.lam = lam
    trace.resume = {"predictors": preds, "last_ts": last_ts, "first_ts": first_ts,
                    "position": skip + position, "records": trace.records}
    return trace


# --- reporting -----------------------------------------------------------------


@dataclass
class MetricsReport:
    precision: Optional[float]
    per_app_precision: Optional[float]
    cumulative_auc: Optional[float]
    full_precision: Optional[float]
    full_per_app_precision: Optional[float]
    full_cumulative_auc: Optional[float]
    per_device: dict[str, dict[str, Optional[float]]]
    windows: dict[str, list[WindowPoint]]
    usage_rank_curve: dict[int, RankPoint]
    n_rounds: int
    warmup_days: int

    def row(self) -> dict:
        return {
            "precision": self.precision, "per_app_precision": self.per_app_precision,
            "cumulative_auc": self.cumulative_auc, "full_precision": self.full_precision,
            "full_per_app_precision": self.full_per_app_precision,
            "full_cumulative_auc": self.full_cumulative_auc, "n_rounds": self.n_rounds,
        }


def headline(records: Sequence[RoundRecord], warmup_days: int = WARMUP_DAYS) -> list[RoundRecord]:
    return [r for r in records if r.day >= warmup_days]


def compute_report(trace: RunTrace, warmup_days: int = WARMUP_DAYS, with_auc: Optional[bool] = None) -> MetricsReport:
    recs = trace.records
    head = headline(recs, warmup_days)
    if with_auc is None:
        with_auc = trace.algo != "kmfu"
    auc = (lambda rs: cumulative_auc(rs)) if with_auc else (lambda rs: None)
    by_dev: dict[str, list[RoundRecord]] = defaultdict(list)
    for r in recs:
        by_dev[r.device_id].append(r)
    per_device = {}
    windows = {}
    for dev, rs in sorted(by_dev.items()):
        hs = headline(rs, warmup_days)
        per_device[dev] = {
            "precision": precision(hs), "per_app_precision": per_app_precision(hs),
            "cumulative_auc": auc(hs), "full_precision": precision(rs),
            "full_per_app_precision": per_app_precision(rs), "full_cumulative_auc": auc(rs),
            "n_rounds": len(hs),
        }
        windows[dev] = sliding_window(rs, per_app_precision)
    ranks = usage_ranks(head)

    def avg(key):
        vals = [d[key] for d in per_device.values() if d[key] is not None]
        return float(np.mean(vals)) if vals else None

    return MetricsReport(
        precision=avg("precision"), per_app_precision=avg("per_app_precision"),
        cumulative_auc=avg("cumulative_auc"), full_precision=avg("full_precision"),
        full_per_app_precision=avg("full_per_app_precision"),
        full_cumulative_auc=avg("full_cumulative_auc"), per_device=per_device, windows=windows,
        usage_rank_curve=usage_rank_curve(head, ranks), n_rounds=len(head), warmup_days=warmup_days,
    )


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["device", "algo", "metric", "value"])
    for algo, rep in reports.items():
        for key, val in rep.row().items():
            w.writerow(["ALL", algo, key, _fmt(val)])
        for dev, vals in rep.per_device.items():
            for key, val in vals.items():
                w.writerow([dev, algo, key, _fmt(val)])
    return buf.getvalue()


def windows_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["device", "algo", "window_center", "metric", "value", "n_rounds", "low_support"])
    for algo, rep in reports.items():
        for dev, series in rep.windows.items():
            for p in series:
                w.writerow([dev, algo, p.center, "per_app_precision", _fmt(p.value), p.n_rounds,
                            int(p.low_support)])
        for c, v in mean_series(rep.windows.values()).items():
            w.writerow(["ALL", algo, c, "per_app_precision", _fmt(v), "", ""])
    return buf.getvalue()


def ranks_csv(reports: dict[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["algo", "rank", "precision", "support"])
    for algo, rep in reports.items():
        for rank, p in rep.usage_rank_curve.items():
            w.writerow([algo, rank, _fmt(p.precision), p.support])
    return buf.getvalue()


# --- trace files ------------------------------------------------------------------

_RECORD_FIELDS = ("device_id", "t", "day", "event_index", "app", "predicted", "hit", "loss", "tau",
                  "auc_indicator", "skipped")


def record_to_dict(r: RoundRecord) -> dict:
    d = {f: getattr(r, f) for f in _RECORD_FIELDS}
    d["predicted"] = list(r.predicted)
    return d


def record_from_dict(d: dict) -> RoundRecord:
    return RoundRecord(**{**d, "predicted": tuple(d["predicted"])})


def pairs_to_arrays(records: Sequence[RoundRecord]) -> dict[str, np.ndarray]:
    """Flatten stored pairs into arrays for ``np.savez``; shared negatives are stored once."""
    rows = [(i, r.pair) for i, r in enumerate(records) if r.pair is not None]
    neg_ids: dict[int, int] = {}
    negs = []
    for _, p in rows:
        if id(p.negative) not in neg_ids:
            neg_ids[id(p.negative)] = len(negs)
            negs.append(p.negative)

    def ragged(parts, width=None):
        lengths = np.array([len(x) for x in parts], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        if parts:
            flat = np.concatenate(parts)
        else:
            flat = np.zeros((0, width) if width else 0)
        return flat, offsets

    neg_phi, neg_off = ragged([n.phi for n in negs], PHI_DIM)
    scope, scope_off = ragged([p.scope.astype(np.int64) for _, p in rows])
    return {
        "record": np.array([i for i, _ in rows], dtype=np.int64),
        "app": np.array([p.app for _, p in rows], dtype=np.int64),
        "n_apps": np.array([p.n_apps for _, p in rows], dtype=np.int64),
        "psi_pos": np.array([p.psi_pos for _, p in rows]).reshape(-1, PSI_DIM),
        "phi_pos": np.array([p.phi_pos for _, p in rows]).reshape(-1, PHI_DIM),
        "negative": np.array([neg_ids[id(p.negative)] for _, p in rows], dtype=np.int64),
        "neg_psi": np.array([n.psi for n in negs]).reshape(-1, PSI_DIM),
        "neg_phi": neg_phi.reshape(-1, PHI_DIM),
        "neg_offsets": neg_off,
        "scope": scope.astype(np.int64),
        "scope_offsets": scope_off,
    }


def attach_pairs(records: list[RoundRecord], arrays) -> None:
    """Inverse of :func:`pairs_to_arrays`: set ``pair`` on the referenced records."""
    off = arrays["neg_offsets"]
    negs = [NegativeContext(arrays["neg_psi"][j], arrays["neg_phi"][off[j]:off[j + 1]])
            for j in range(len(off) - 1)]
    s_off = arrays["scope_offsets"]
    for j, i in enumerate(arrays["record"]):
        records[int(i)].pair = RoundPair(
            int(arrays["app"][j]), arrays["psi_pos"][j], arrays["phi_pos"][j],
            negs[int(arrays["negative"][j])], int(arrays["n_apps"][j]),
            arrays["scope"][s_off[j]:s_off[j + 1]],
        )
