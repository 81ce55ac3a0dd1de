import csv
import hashlib
import json
import subprocess
import sys

import pytest

from appcast.cli import main


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def events(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    path = root / "events.jsonl"
    assert main(["gen", "--devices", "2", "--days", "12", "--seed", "5", "--out", str(path)]) == 0
    return path


def test_gen_summary_matches_file(tmp_path, capsys):
    out = tmp_path / "ev.jsonl"
    assert main(["gen", "--devices", "3", "--days", "5", "--seed", "1", "--out", str(out)]) == 0
    summary = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    lines = out.read_text().splitlines()
    assert int(summary["clicks"]) == len(lines)
    assert int(summary["devices"]) == 3
    assert int(summary["distinct_apps"]) == len({json.loads(x)["app"] for x in lines})
    assert (tmp_path / "personas.json").is_file()
    ts = [json.loads(x)["ts"] for x in lines]
    assert ts == sorted(ts)


def test_gen_is_deterministic(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        main(["gen", "--devices", "2", "--days", "4", "--seed", "7", "--out", str(p), "--personas", str(p) + ".p"])
    assert sha(a) == sha(b)


def test_gen_zero_days_is_empty(tmp_path):
    out = tmp_path / "e.jsonl"
    assert main(["gen", "--devices", "1", "--days", "0", "--out", str(out)]) == 0
    assert out.read_text() == ""


def test_env_seed_is_the_default(tmp_path, monkeypatch):
    a, b, c = tmp_path / "a.jsonl", tmp_path / "b.jsonl", tmp_path / "c.jsonl"
    monkeypatch.setenv("APPCAST_SEED", "99")
    main(["gen", "--devices", "1", "--days", "2", "--out", str(a)])
    main(["gen", "--devices", "1", "--days", "2", "--seed", "99", "--out", str(b)])
    main(["gen", "--devices", "1", "--days", "2", "--seed", "98", "--out", str(c)])
    assert sha(a) == sha(b) != sha(c)


def test_run_writes_outputs_and_config(events, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--algo", "frecency", "--events", str(events), "--out-dir", str(out), "--T-days", "30"]) == 0
    for name in ("config.json", "trace.jsonl", "model.json", "metrics.csv", "windows.csv", "ranks.csv"):
        assert (out / name).is_file()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["T_days"] == 30 and cfg["k"] == 4 and cfg["algo"] == "frecency"
    assert cfg["events_sha256"] == sha(events)
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert any(r["device"] == "ALL" and r["metric"] == "precision" for r in rows)


def test_config_file_loses_to_flags(events, tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"k": 2, "C": 0.5, "warmup_days": 1}))
    out = tmp_path / "run"
    main(["run", "--algo", "aucpa", "--events", str(events), "--out-dir", str(out), "--config", str(conf),
          "--k", "3"])
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["k"] == 3 and cfg["lambda"] == 2.0 and cfg["warmup_days"] == 1
    trace = [json.loads(x) for x in (out / "trace.jsonl").read_text().splitlines()]
    assert max(len(r["predicted"]) for r in trace) == 3


def test_snapshot_resume_matches(events, tmp_path):
    full, half, rest = tmp_path / "full", tmp_path / "half", tmp_path / "rest"
    base = ["run", "--algo", "aucpa", "--events", str(events)]
    assert main(base + ["--out-dir", str(full)]) == 0
    assert main(base + ["--out-dir", str(half), "--max-events", "300", "--snapshot-every", "120"]) == 0
    assert main(base + ["--out-dir", str(rest), "--resume", str(half / "snapshot.json")]) == 0
    for name in ("metrics.csv", "trace.jsonl", "model.json", "windows.csv"):
        assert (full / name).read_bytes() == (rest / name).read_bytes()


def test_parallel_jobs_match_serial(events, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--algo", "aucpa", "--events", str(events), "--out-dir", str(a)])
    main(["run", "--algo", "aucpa", "--events", str(events), "--out-dir", str(b), "--jobs", "2"])
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert (a / "model.json").read_bytes() == (b / "model.json").read_bytes()


def test_report_three_runs(events, tmp_path, capsys):
    dirs = []
    for algo in ("kmfu", "frecency", "aucpa"):
        d = tmp_path / algo
        main(["run", "--algo", algo, "--events", str(events), "--out-dir", str(d)])
        dirs.append(str(d))
    capsys.readouterr()
    assert main(["report", *dirs, "--out-dir", str(tmp_path / "rep")]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert len(table) == 4
    assert [line.split()[0] for line in table[1:]] == ["kmfu", "frecency", "aucpa"]
    ranks = list(csv.DictReader((tmp_path / "rep" / "ranks.csv").open()))
    for algo in ("kmfu", "frecency", "aucpa"):
        support = [int(r["support"]) for r in ranks if r["algo"] == algo]
        assert support == sorted(support, reverse=True)


def test_report_rejects_mixed_event_files(events, tmp_path):
    other = tmp_path / "other.jsonl"
    main(["gen", "--devices", "1", "--days", "3", "--seed", "6", "--out", str(other)])
    main(["run", "--algo", "kmfu", "--events", str(events), "--out-dir", str(tmp_path / "a")])
    main(["run", "--algo", "kmfu", "--events", str(other), "--out-dir", str(tmp_path / "b")])
    assert main(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out-dir", str(tmp_path / "r")]) == 1


def test_report_on_empty_dir_fails(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out-dir", str(tmp_path / "r")]) == 1


def test_bound_zero_and_random(events, tmp_path):
    run = tmp_path / "run"
    main(["run", "--algo", "aucpa", "--events", str(events), "--out-dir", str(run), "--lambda", "1",
          "--store-pairs"])
    assert main(["bound", "--trace", str(run), "--comparator", "zero", "--out", str(tmp_path / "z.json")]) == 0
    rows = json.loads((tmp_path / "z.json").read_text())["rows"]
    assert len(rows) == 2
    assert all(abs(r["rhs"] - 2.0) <= 1e-12 and r["holds"] for r in rows)
    assert main(["bound", "--trace", str(run), "--comparator", "random:20", "--out", str(tmp_path / "r.json")]) == 0
    rows = json.loads((tmp_path / "r.json").read_text())["rows"]
    assert len(rows) == 40 and all(r["holds"] and r["in_hypothesis"] for r in rows)


def test_bound_without_pairs_explains(events, tmp_path, capsys):
    run = tmp_path / "run"
    main(["run", "--algo", "aucpa", "--events", str(events), "--out-dir", str(run)])
    assert main(["bound", "--trace", str(run), "--out", str(tmp_path / "b.json")]) == 1
    assert "--store-pairs" in capsys.readouterr().err


def test_schema_error_exits_one_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"device_id":"d","ts":1,"app":"x"}\n{"device_id":"d","app":"x"}\n')
    assert main(["run", "--algo", "kmfu", "--events", str(bad), "--out-dir", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["run", "--algo", "nope", "--events", "x", "--out-dir", "y"],
    ["run", "--algo", "aucpa", "--events", "x", "--out-dir", "y", "--C", "1", "--lambda", "1"],
    ["run", "--algo", "aucpa", "--events", "x", "--out-dir", "y", "--resume", "s", "--store-pairs"],
    ["run", "--algo", "aucpa", "--events", "x", "--out-dir", "y", "--snapshot-every", "5", "--jobs", "2"],
    ["bound", "--trace", "t", "--comparator", "random:x", "--out", "o"],
    ["frobnicate"],
])
def test_usage_errors_exit_two(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_console_script_help():
    done = subprocess.run([sys.executable, "-m", "appcast.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    assert "gen" in done.stdout and "bound" in done.stdout
