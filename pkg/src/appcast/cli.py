"""``appcast`` command line: gen, run, report, bound."""

from __future__ import annotations

import argparse
import hashlib
import heapq
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .core import EventLogError, read_events, serialize_event
from .evaluation import (
    MissingPairsError,
    RunTrace,
    attach_pairs,
    comparators,
    compute_report,
    metrics_csv,
    pairs_to_arrays,
    ranks_csv,
    record_from_dict,
    record_to_dict,
    regret_bound_check,
    replay,
    windows_csv,
)
from .predictors import ALGORITHMS, predictor_from_dict
from .simulator import ConfigError, SimParams, generate_population

RUN_DEFAULTS: dict[str, Any] = {
    "k": 4, "C": None, "lambda": None, "p": 0.1, "T_days": 60.0, "warmup_days": 3, "seed": 0,
    "snapshot_every": None, "max_events": None, "store_pairs": False, "jobs": 1,
}


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def default_seed() -> int:
    raw = os.environ.get("APPCAST_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"APPCAST_SEED is not an integer: {raw!r}")


def write_atomic(path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- gen -----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    if args.devices < 0 or args.days < 0:
        raise CliError("--devices and --days must be >= 0")
    overrides = {}
    if args.config:
        overrides = _load_json(args.config).get("simulator", {})
    try:
        params = SimParams(**{"horizon_days": max(args.days, 1), **overrides})
        params.validate()
    except TypeError as exc:
        raise CliError(f"bad simulator config: {exc}")
    personas, streams = generate_population(args.devices, args.days, seed, params)
    merged = heapq.merge(*streams, key=lambda e: (e.ctx.ts.seconds, e.device_id))
    lines = [serialize_event(e) + "\n" for e in merged]
    write_atomic(args.out, "".join(lines))
    personas_path = Path(args.personas) if args.personas else Path(args.out).with_name("personas.json")
    write_json(personas_path, {"seed": seed, "days": args.days, "personas": [p.to_dict() for p in personas]})
    apps = {a for s in streams for a in (e.app for e in s)}
    print(f"clicks={len(lines)} devices={args.devices} distinct_apps={len(apps)}")
    return 0


# --- run -----------------------------------------------------------------------------


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc.msg}")
    if not isinstance(obj, dict):
        raise CliError(f"{path} must hold a JSON object")
    return obj


def effective_run_config(args) -> dict:
    """flags > config file > APPCAST_SEED > defaults."""
    file_cfg = _load_json(args.config) if args.config else {}
    unknown = set(file_cfg) - set(RUN_DEFAULTS) - {"algo", "simulator"}
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = dict(RUN_DEFAULTS)
    cfg["seed"] = default_seed()
    cfg.update({k: v for k, v in file_cfg.items() if k != "simulator"})
    flags = {"k": args.k, "C": args.C, "lambda": args.lam, "p": args.p, "T_days": args.T_days,
             "warmup_days": args.warmup_days, "seed": args.seed, "snapshot_every": args.snapshot_every,
             "max_events": args.max_events, "jobs": args.jobs}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.store_pairs:
        cfg["store_pairs"] = True
    if args.C is not None:
        cfg["lambda"] = None
    elif args.lam is not None:
        cfg["C"] = None
    cfg["algo"] = args.algo
    if cfg["C"] is not None and cfg["lambda"] is not None:
        raise CliError("give exactly one of C and lambda")
    if cfg["algo"] == "aucpa":
        lam = cfg["lambda"] if cfg["lambda"] is not None else 1.0 / (cfg["C"] if cfg["C"] is not None else 0.02)
        if not lam > 0:
            raise CliError("C / lambda must be positive")
        cfg["lambda"], cfg["C"] = float(lam), 1.0 / float(lam)
    if int(cfg["k"]) < 1:
        raise CliError("k must be >= 1")
    if cfg["jobs"] < 1:
        raise CliError("--jobs must be >= 1")
    return cfg


def make_factory(cfg: dict):
    algo = cfg["algo"]
    if algo == "kmfu":
        return ALGORITHMS["kmfu"]
    if algo == "frecency":
        return partial(ALGORITHMS["frecency"], p=cfg["p"], t_days=cfg["T_days"])
    return partial(ALGORITHMS["aucpa"], lam=cfg["lambda"], seed=cfg["seed"], store_pairs=cfg["store_pairs"])


def _replay_devices(events, factory, k):
    return replay(events, factory, k)


def _replay_parallel(events, factory, k, jobs) -> RunTrace:
    by_dev: dict[str, list] = {}
    index: dict[str, list[int]] = {}
    for i, ev in enumerate(events):
        by_dev.setdefault(ev.device_id, []).append(ev)
        index.setdefault(ev.device_id, []).append(i)
    devices = sorted(by_dev)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_replay_devices, [by_dev[d] for d in devices], [factory] * len(devices),
                              [k] * len(devices)))
    trace = RunTrace(k=k)
    for dev, part in zip(devices, parts):
        for r in part.records:
            r.event_index = index[dev][r.event_index]
        trace.records.extend(part.records)
        trace.final.update(part.final)
        trace.algo, trace.lam = part.algo or trace.algo, part.lam
    trace.records.sort(key=lambda r: r.event_index)
    return trace


def _snapshot_doc(trace: RunTrace, cfg: dict, events_sha: str) -> dict:
    st = trace.resume
    return {
        "events_sha256": events_sha,
        "config": cfg,
        "position": st["position"],
        "last_ts": st["last_ts"],
        "first_ts": st["first_ts"],
        "predictors": {d: p.to_dict() for d, p in st["predictors"].items()},
        "records": [record_to_dict(r) for r in st["records"]],
    }


def _snapshot_state(doc: dict) -> dict:
    return {
        "position": doc["position"], "last_ts": doc["last_ts"], "first_ts": doc["first_ts"],
        "predictors": {d: predictor_from_dict(p) for d, p in doc["predictors"].items()},
        "records": [record_from_dict(r) for r in doc["records"]],
    }


def cmd_run(args) -> int:
    cfg = effective_run_config(args)
    if args.resume and cfg["store_pairs"]:
        raise CliError("--resume cannot be combined with pair storage")
    if cfg["snapshot_every"] is not None and cfg["jobs"] > 1:
        raise CliError("snapshots need --jobs 1")
    out = Path(args.out_dir)
    events_sha = file_sha256(args.events)
    events = list(read_events(args.events))
    if cfg["max_events"] is not None:
        events = events[: cfg["max_events"]]
    factory = make_factory(cfg)
    k = int(cfg["k"])

    state = None
    if args.resume:
        doc = _load_json(args.resume)
        if doc.get("events_sha256") != events_sha:
            raise CliError("snapshot was taken on a different event file")
        state = _snapshot_state(doc)

    if cfg["jobs"] > 1:
        trace = _replay_parallel(events, factory, k, cfg["jobs"])
    elif cfg["snapshot_every"]:
        every = int(cfg["snapshot_every"])
        if every < 1:
            raise CliError("--snapshot-every must be >= 1")
        trace = None
        while trace is None or trace.resume["position"] < len(events):
            trace = replay(events, factory, k, start=state, stop_after=every)
            state = trace.resume
            write_json(out / "snapshot.json", _snapshot_doc(trace, cfg, events_sha))
    else:
        trace = replay(events, factory, k, start=state)
    if not trace.algo:
        trace.algo = cfg["algo"]

    report = compute_report(trace, warmup_days=int(cfg["warmup_days"]))
    reports = {cfg["algo"]: report}
    write_json(out / "config.json", {**cfg, "events": str(args.events), "events_sha256": events_sha})
    write_atomic(out / "trace.jsonl", "".join(json.dumps(record_to_dict(r), sort_keys=True) + "\n"
                                              for r in trace.records))
    write_json(out / "model.json", {d: p.to_dict() for d, p in sorted(trace.final.items())})
    write_atomic(out / "metrics.csv", metrics_csv(reports))
    write_atomic(out / "windows.csv", windows_csv(reports))
    write_atomic(out / "ranks.csv", ranks_csv(reports))
    if cfg["store_pairs"]:
        buf = io.BytesIO()
        np.savez(buf, **pairs_to_arrays(trace.records))
        write_atomic(out / "pairs.npz", buf.getvalue())
    print(_table({cfg["algo"]: report}))
    return 0


# --- report --------------------------------------------------------------------------


def load_run(run_dir) -> tuple[dict, RunTrace]:
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.is_file():
        raise CliError(f"{run_dir} holds no run (config.json missing)")
    cfg = _load_json(cfg_path)
    trace = RunTrace(k=cfg["k"], algo=cfg["algo"], lam=cfg.get("lambda"))
    with open(run_dir / "trace.jsonl", encoding="utf-8") as fh:
        trace.records = [record_from_dict(json.loads(line)) for line in fh if line.strip()]
    return cfg, trace


def _table(reports: dict) -> str:
    lines = [f"{'algo':<10} {'precision':>10} {'per_app':>10} {'auc':>10} {'rounds':>8}"]
    for algo, rep in reports.items():
        def f(v):
            return "-" if v is None else f"{v:.4f}"
        lines.append(f"{algo:<10} {f(rep.precision):>10} {f(rep.per_app_precision):>10} "
                     f"{f(rep.cumulative_auc):>10} {rep.n_rounds:>8}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    runs = [load_run(d) for d in args.runs]
    shas = {cfg["events_sha256"] for cfg, _ in runs}
    if len(shas) > 1:
        raise CliError("runs were made on different event files")
    reports = {}
    for cfg, trace in runs:
        label = cfg["algo"]
        while label in reports:
            label += "'"
        reports[label] = compute_report(trace, warmup_days=int(cfg["warmup_days"]))
    out = Path(args.out_dir)
    write_atomic(out / "metrics.csv", metrics_csv(reports))
    write_atomic(out / "windows.csv", windows_csv(reports))
    write_atomic(out / "ranks.csv", ranks_csv(reports))
    table = _table(reports)
    write_atomic(out / "comparison.txt", table + "\n")
    print(table)
    return 0


# --- bound ---------------------------------------------------------------------------


def cmd_bound(args) -> int:
    cfg, trace = load_run(args.trace)
    if cfg["algo"] != "aucpa":
        raise CliError("the bound check needs an aucpa run")
    pairs_path = Path(args.trace) / "pairs.npz"
    if not pairs_path.is_file():
        raise CliError("trace has no stored pairs; rerun with --store-pairs")
    with np.load(pairs_path) as arrays:
        attach_pairs(trace.records, arrays)
    models = _load_json(Path(args.trace) / "model.json")
    lam = args.lam if args.lam is not None else cfg["lambda"]
    rows = []
    for dev in trace.devices:
        model = models[dev]
        names = model["registry"]["names"]
        final = (np.array(model["w"], dtype=float), np.array([model["w_a"][a] for a in names], dtype=float))
        for label, w, W in comparators(args.comparator, final, seed=args.seed):
            rep = regret_bound_check(trace.for_device(dev), w, W, lam, label)
            rows.append({"device": dev, **rep.to_dict()})
    write_json(args.out, {"trace": str(args.trace), "comparator": args.comparator, "lambda": lam, "rows": rows})
    bad = sum(not r["holds"] for r in rows)
    print(f"{len(rows)} comparator rows, {bad} violated, lambda={lam}"
          + ("" if lam <= 1 else " (lambda > 1: outside the bound's hypothesis)"))
    return 0


# --- parser --------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _comparator(text: str) -> str:
    if text in ("zero", "final"):
        return text
    if text.startswith("random:") and text[7:].isdigit() and int(text[7:]) >= 1:
        return text
    raise argparse.ArgumentTypeError("expected zero, final or random:N")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="appcast", description="Online app-usage prediction toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic click stream")
    g.add_argument("--devices", type=int, required=True)
    g.add_argument("--days", type=int, required=True)
    g.add_argument("--seed", type=int, default=None, help="default: $APPCAST_SEED or 0")
    g.add_argument("--out", required=True, help="events JSONL path")
    g.add_argument("--personas", default=None, help="default: personas.json next to --out")
    g.add_argument("--config", default=None, help="JSON file with a 'simulator' object of overrides")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="replay a stream through one predictor")
    r.add_argument("--algo", required=True, choices=sorted(ALGORITHMS))
    r.add_argument("--events", required=True)
    r.add_argument("--out-dir", required=True)
    r.add_argument("--k", type=_positive_int, default=None)
    reg = r.add_mutually_exclusive_group()
    reg.add_argument("--C", type=float, default=None)
    reg.add_argument("--lambda", dest="lam", type=float, default=None)
    r.add_argument("--p", type=float, default=None, help="frecency base (0.1)")
    r.add_argument("--T-days", dest="T_days", type=float, default=None, help="frecency horizon (60)")
    r.add_argument("--warmup-days", type=int, default=None)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--snapshot-every", type=int, default=None)
    r.add_argument("--resume", default=None, help="snapshot.json to continue from")
    r.add_argument("--max-events", type=int, default=None)
    r.add_argument("--store-pairs", action="store_true", help="keep what the bound check needs")
    r.add_argument("--config", default=None, help="JSON run config; flags win")
    r.add_argument("--jobs", type=_positive_int, default=None)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="compare finished runs")
    rep.add_argument("runs", nargs="+", help="run output directories")
    rep.add_argument("--out-dir", required=True)
    rep.set_defaults(func=cmd_report)

    b = sub.add_parser("bound", help="check the cumulative-AUC regret bound on a run")
    b.add_argument("--trace", required=True, help="run directory made with --store-pairs")
    b.add_argument("--comparator", type=_comparator, default="zero")
    b.add_argument("--lambda", dest="lam", type=float, default=None, help="default: the run's lambda")
    b.add_argument("--seed", type=int, default=0, help="seed for random comparators")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bound)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        if args.resume and args.store_pairs:
            parser.error("--resume cannot be combined with --store-pairs")
        if args.snapshot_every is not None and (args.jobs or 1) > 1:
            parser.error("--snapshot-every needs --jobs 1")
    try:
        return args.func(args)
    except (CliError, ConfigError, EventLogError, MissingPairsError, ValueError, OSError) as exc:
        print(f"appcast: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
