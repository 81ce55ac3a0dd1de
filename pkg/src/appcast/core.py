"""Domain types, time/geo primitives and the JSONL event-log schema."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional

SECONDS_PER_DAY = 86400
EARTH_RADIUS_M = 6371008.8

SLOTS = ("home_screen", "app_dock", "prediction_bar", "app_tray", "folder", "search")
HOME_SLOTS = frozenset({"home_screen", "app_dock"})
TRANSITION_SIGNALS = ("headphones", "wifi", "bt", "location_entry", "location_exit")


class EventLogError(ValueError):
    """Base class for event-log problems."""


class ParseError(EventLogError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


class SchemaError(EventLogError):
    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class Timestamp:
    seconds: int
    tz_offset_minutes: int = 0

    def __post_init__(self):
        if not -840 <= self.tz_offset_minutes <= 840:
            raise ValueError(f"tz_offset_minutes out of range: {self.tz_offset_minutes}")

    @property
    def local_seconds(self) -> int:
        return self.seconds + 60 * self.tz_offset_minutes


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError("non-finite coordinate")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinate out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class ContextSnapshot:
    """Raw feature primitives observed at one moment on the device.

    ``headphones`` is ``None`` when the log did not say. ``transitions`` holds
    ``(signal, last_change_seconds)`` pairs sorted by signal name.
    """

    ts: Timestamp
    geo: Optional[GeoPoint] = None
    headphones: Optional[bool] = None
    wifi_connected: bool = False
    wifi_ssid: Optional[str] = None
    bt_connected: bool = False
    bt_id: Optional[str] = None
    transitions: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if not self.wifi_connected and self.wifi_ssid is not None:
            raise ValueError("wifi_ssid given while wifi is disconnected")
        if not self.bt_connected and self.bt_id is not None:
            raise ValueError("bt_id given while bluetooth is disconnected")
        for kind, when in self.transitions:
            if kind not in TRANSITION_SIGNALS:
                raise ValueError(f"unknown transition signal {kind!r}")
            if when > self.ts.seconds:
                raise ValueError(f"transition {kind!r} at {when} is after event time {self.ts.seconds}")

    def last_change(self, signal: str) -> Optional[int]:
        for kind, when in self.transitions:
            if kind == signal:
                return when
        return None


@dataclass(frozen=True)
class ClickEvent:
    device_id: str
    ctx: ContextSnapshot
    app: str
    slot: Optional[str] = None

    def __post_init__(self):
        if not self.app:
            raise ValueError("empty app id")
        if self.slot is not None and self.slot not in SLOTS:
            raise ValueError(f"unknown slot {self.slot!r}")

    @property
    def is_home(self) -> bool:
        return self.slot in HOME_SLOTS


@dataclass(frozen=True)
class PredictionSet:
    """Ordered (app, score) pairs, best first."""

    apps: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        ids = [a for a, _ in self.apps]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate app in prediction set")
        scores = [s for _, s in self.apps]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError("prediction scores must be non-increasing")

    @property
    def app_ids(self) -> list[str]:
        return [a for a, _ in self.apps]

    def __contains__(self, app: object) -> bool:
        return any(a == app for a, _ in self.apps)

    def __len__(self) -> int:
        return len(self.apps)


def local_second_of_day(ts: Timestamp) -> int:
    return (ts.seconds + 60 * ts.tz_offset_minutes) % SECONDS_PER_DAY


def local_day_index(ts: Timestamp) -> int:
    return (ts.seconds + 60 * ts.tz_offset_minutes) // SECONDS_PER_DAY


def local_day_of_week(ts: Timestamp) -> int:
    """0 = Monday ... 6 = Sunday (1970-01-01 was a Thursday)."""
    return (local_day_index(ts) + 3) % 7


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; works on scalars or numpy arrays."""
    import numpy as np

    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def haversine_prepared(lat_r, lon_r, cos_lat, lat2: float, lon2: float):
    """``haversine_m`` against points already converted to radians (with their cosines)."""
    import numpy as np

    p2 = math.radians(lat2)
    a = np.sin((p2 - lat_r) * 0.5) ** 2 + (cos_lat * math.cos(p2)) * np.sin((math.radians(lon2) - lon_r) * 0.5) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


# --- event log -------------------------------------------------------------

_REQUIRED = ("device_id", "ts", "app")


def _expect(cond: bool, message: str, line_no: Optional[int]):
    if not cond:
        raise SchemaError(message, line_no)


def event_from_dict(obj: dict[str, Any], line_no: Optional[int] = None) -> ClickEvent:
    if not isinstance(obj, dict):
        raise SchemaError("record is not a JSON object", line_no)
    for key in _REQUIRED:
        _expect(key in obj and obj[key] is not None, f"missing required field {key!r}", line_no)
    device_id, ts, app = obj["device_id"], obj["ts"], obj["app"]
    _expect(isinstance(device_id, str), "device_id must be a string", line_no)
    _expect(isinstance(app, str) and app != "", "app must be a non-empty string", line_no)
    _expect(isinstance(ts, int) and not isinstance(ts, bool), "ts must be an integer", line_no)
    offset = obj.get("tz_offset_minutes", 0)
    _expect(isinstance(offset, int) and not isinstance(offset, bool), "tz_offset_minutes must be an integer", line_no)

    lat, lon = obj.get("lat"), obj.get("lon")
    _expect((lat is None) == (lon is None), "lat and lon must be given together", line_no)
    headphones = obj.get("headphones")
    _expect(headphones is None or isinstance(headphones, bool), "headphones must be a boolean", line_no)
    wifi_ssid = obj.get("wifi_ssid")
    bt_id = obj.get("bt_id")
    _expect(wifi_ssid is None or isinstance(wifi_ssid, str), "wifi_ssid must be a string", line_no)
    _expect(bt_id is None or isinstance(bt_id, str), "bt_id must be a string", line_no)
    wifi_connected = obj.get("wifi_connected", wifi_ssid is not None)
    bt_connected = obj.get("bt_connected", bt_id is not None)
    slot = obj.get("slot")
    _expect(slot is None or slot in SLOTS, f"unknown slot {slot!r}", line_no)

    raw_tr = obj.get("transitions") or {}
    _expect(isinstance(raw_tr, dict), "transitions must be an object", line_no)
    transitions = []
    for kind, when in raw_tr.items():
        _expect(kind in TRANSITION_SIGNALS, f"unknown transition signal {kind!r}", line_no)
        _expect(isinstance(when, int) and not isinstance(when, bool), "transition time must be an integer", line_no)
        transitions.append((kind, when))
    try:
        geo = None if lat is None else GeoPoint(float(lat), float(lon))
        ctx = ContextSnapshot(
            ts=Timestamp(ts, offset),
            geo=geo,
            headphones=headphones,
            wifi_connected=bool(wifi_connected),
            wifi_ssid=wifi_ssid,
            bt_connected=bool(bt_connected),
            bt_id=bt_id,
            transitions=tuple(sorted(transitions)),
        )
        return ClickEvent(device_id=device_id, ctx=ctx, app=app, slot=slot)
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc), line_no) from exc


def parse_event_line(line: str, line_no: Optional[int] = None) -> ClickEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line_no) from exc
    return event_from_dict(obj, line_no)


def event_to_dict(event: ClickEvent) -> dict[str, Any]:
    ctx = event.ctx
    out: dict[str, Any] = {
        "device_id": event.device_id,
        "ts": ctx.ts.seconds,
        "tz_offset_minutes": ctx.ts.tz_offset_minutes,
        "app": event.app,
    }
    if event.slot is not None:
        out["slot"] = event.slot
    if ctx.geo is not None:
        out["lat"] = ctx.geo.lat
        out["lon"] = ctx.geo.lon
    if ctx.headphones is not None:
        out["headphones"] = ctx.headphones
    if ctx.wifi_ssid is not None:
        out["wifi_ssid"] = ctx.wifi_ssid
    elif ctx.wifi_connected:
        out["wifi_connected"] = True
    if ctx.bt_id is not None:
        out["bt_id"] = ctx.bt_id
    elif ctx.bt_connected:
        out["bt_connected"] = True
    if ctx.transitions:
        out["transitions"] = dict(ctx.transitions)
    return out


def serialize_event(event: ClickEvent) -> str:
    return json.dumps(event_to_dict(event), sort_keys=True, separators=(",", ":"))


def canonical_line(line: str) -> str:
    """Normal form of a valid log line; equals ``serialize_event(parse_event_line(line))``."""
    obj = json.loads(line)
    out = {k: obj[k] for k in ("device_id", "ts", "app")}
    out["tz_offset_minutes"] = obj.get("tz_offset_minutes", 0)
    for key in ("slot", "headphones", "wifi_ssid", "bt_id"):
        if obj.get(key) is not None:
            out[key] = obj[key]
    if obj.get("lat") is not None:
        out["lat"] = float(obj["lat"])
        out["lon"] = float(obj["lon"])
    if obj.get("wifi_ssid") is None and obj.get("wifi_connected"):
        out["wifi_connected"] = True
    if obj.get("bt_id") is None and obj.get("bt_connected"):
        out["bt_connected"] = True
    if obj.get("transitions"):
        out["transitions"] = dict(sorted(obj["transitions"].items()))
    return json.dumps(out, sort_keys=True, separators=(",", ":"))


def read_events(path) -> Iterator[ClickEvent]:
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if line.strip():
                yield parse_event_line(line, i)


def write_events(path, events: Iterable[ClickEvent]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(serialize_event(ev))
            fh.write("\n")
            n += 1
    return n
