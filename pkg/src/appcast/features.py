"""Contextual (per-device) and app-dependent feature maps.

The contextual vector ``psi`` is a fixed 151-wide layout documented in
FEATURES.md; the app-dependent block ``phi`` has 9 kernels per app computed
over each app's click history.
"""

from __future__ import annotations

import base64
import hashlib
import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    SECONDS_PER_DAY,
    ContextSnapshot,
    GeoPoint,
    Timestamp,
    haversine_m,
    haversine_prepared,
    local_day_of_week,
    local_second_of_day,
)

HASH_SEED = 0x5EED_A99C
HASH_BUCKETS = 32

RECENCY_BANDWIDTHS_DAYS = (1.0, 1.5, 3.0)
TIME_OF_DAY_BANDWIDTHS_S = (60.0, 600.0, 1500.0)
LOCATION_BANDWIDTHS_M = (50.0, 200.0, 1000.0)
PHI_DIM = 9

KNOWN_RADIUS_M = 50.0
KNOWN_WINDOW_S = 30 * SECONDS_PER_DAY
KNOWN_MIN_SPAN_S = 3600

TIME_CAP = 512
LOCATION_CAP = 256

FRECENT_P = 0.1
FRECENT_T_DAYS = 1.0 / 24.0

# weekday indices, Monday = 0
WEEKEND_DAYS = {
    "default": (5, 6),
    "US": (5, 6),
    "GB": (5, 6),
    "IL": (4, 5),
    "AE": (5, 6),
    "SA": (4, 5),
    "EG": (4, 5),
    "IR": (4,),
}

PARTS_OF_DAY = ("dawn", "morning", "noon", "afternoon", "evening", "night")


def _block(start: int, width: int) -> slice:
    return slice(start, start + width)


class Layout:
    """Index ranges of the contextual vector."""

    HOUR = _block(0, 24)
    DOW = _block(24, 7)
    PART_OF_DAY = _block(31, 6)
    WEEKEND = 37
    LOCATION_ID = _block(38, HASH_BUCKETS)
    LOCATION_KNOWN = 70
    LOCATION_ENTERED = 71
    LOCATION_LEFT = 72
    HEADPHONES = 73
    HEADPHONES_CONNECTED = 74
    HEADPHONES_DISCONNECTED = 75
    WIFI = 76
    WIFI_SSID = _block(77, HASH_BUCKETS)
    WIFI_CONNECTED = 109
    WIFI_DISCONNECTED = 110
    BT = 111
    BT_ID = _block(112, HASH_BUCKETS)
    BT_CONNECTED = 144
    BT_DISCONNECTED = 145
    FRECENT = _block(146, 5)
    DIM = 151


PSI_DIM = Layout.DIM


def decay(minutes_since_change: float) -> float:
    return 10.0 ** (-max(0.0, minutes_since_change) / 15.0)


def hash_bucket(value: str, buckets: int = HASH_BUCKETS, seed: int = HASH_SEED) -> int:
    digest = hashlib.blake2b(value.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") % buckets


def part_of_day(hour: int) -> int:
    if 4 <= hour < 7:
        return 0
    if 7 <= hour < 12:
        return 1
    if 12 <= hour < 14:
        return 2
    if 14 <= hour < 18:
        return 3
    if 18 <= hour < 22:
        return 4
    return 5


# --- known locations ---------------------------------------------------------


@dataclass(frozen=True)
class LocationState:
    """What the known-location tracker says about the current fix.

    ``is_known`` is ``None`` when there was no fix at all.
    """

    is_known: Optional[bool] = None
    cluster_id: Optional[int] = None
    entered_ts: Optional[int] = None
    left_ts: Optional[int] = None


UNKNOWN_LOCATION = LocationState()


class _Cluster:
    __slots__ = ("id", "lat", "lon", "n_fixes", "visits")

    def __init__(self, cid: int, lat: float, lon: float):
        self.id = cid
        self.lat = lat
        self.lon = lon
        self.n_fixes = 0
        self.visits: deque[int] = deque()


class KnownLocationStore:
    """Clusters of recent fixes; a cluster is *known* once it has been
    visited at least twice, an hour or more apart, inside the retention window.
    """

    def __init__(self, radius_m: float = KNOWN_RADIUS_M, window_s: int = KNOWN_WINDOW_S,
                 min_span_s: int = KNOWN_MIN_SPAN_S):
        self.radius_m = radius_m
        self.window_s = window_s
        self.min_span_s = min_span_s
        self.clusters: list[_Cluster] = []
        self.newest: Optional[int] = None
        self.next_id = 0
        self.current_known: Optional[int] = None
        self.entered_ts: Optional[int] = None
        self.left_ts: Optional[int] = None
        self._version = 0
        self._memo: Optional[tuple] = None

    def _horizon(self, ts: int) -> int:
        newest = ts if self.newest is None else max(self.newest, ts)
        return newest - self.window_s

    def _nearest(self, geo: GeoPoint, horizon: int) -> Optional[_Cluster]:
        key = (geo.lat, geo.lon, horizon, self._version)
        if self._memo is not None and self._memo[0] == key:
            return self._memo[1]
        live = [c for c in self.clusters if c.visits and c.visits[-1] >= horizon]
        found = None
        if live:
            lat = np.fromiter((c.lat for c in live), float, len(live))
            lon = np.fromiter((c.lon for c in live), float, len(live))
            d = haversine_m(lat, lon, geo.lat, geo.lon)
            i = int(np.argmin(d))
            found = live[i] if d[i] <= self.radius_m else None
        self._memo = (key, found)
        return found

    def _is_known(self, cluster: Optional[_Cluster], ts: int, horizon: int) -> bool:
        if cluster is None:
            return False
        first = next((v for v in cluster.visits if v >= horizon), ts)
        last = max(cluster.visits[-1], ts)
        return max(last, ts) - min(first, ts) >= self.min_span_s

    def peek(self, geo: Optional[GeoPoint], ts: int) -> LocationState:
        """State the store would report after ``update``, without changing it."""
        if geo is None:
            return UNKNOWN_LOCATION
        horizon = self._horizon(ts)
        cluster = self._nearest(geo, horizon)
        known = self._is_known(cluster, ts, horizon)
        entered, left = self.entered_ts, self.left_ts
        if known:
            if self.current_known != cluster.id:
                entered = ts
            return LocationState(True, cluster.id, entered, left)
        if self.current_known is not None:
            left = ts
        cid = cluster.id if cluster is not None else self.next_id
        return LocationState(False, cid, entered, left)

    def update(self, geo: Optional[GeoPoint], ts: int) -> LocationState:
        if geo is None:
            return UNKNOWN_LOCATION
        state = self.peek(geo, ts)
        horizon = self._horizon(ts)
        self._version += 1
        self.newest = ts if self.newest is None else max(self.newest, ts)
        for c in self.clusters:
            while c.visits and c.visits[0] < horizon:
                c.visits.popleft()
        self.clusters = [c for c in self.clusters if c.visits]
        cluster = next((c for c in self.clusters if c.id == state.cluster_id), None)
        if cluster is None:
            cluster = _Cluster(self.next_id, geo.lat, geo.lon)
            self.next_id += 1
            self.clusters.append(cluster)
        cluster.n_fixes += 1
        cluster.lat += (geo.lat - cluster.lat) / cluster.n_fixes
        cluster.lon += (geo.lon - cluster.lon) / cluster.n_fixes
        cluster.visits.append(ts)
        self.current_known = state.cluster_id if state.is_known else None
        self.entered_ts = state.entered_ts
        self.left_ts = state.left_ts
        return state

    def to_dict(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "window_s": self.window_s,
            "min_span_s": self.min_span_s,
            "newest": self.newest,
            "next_id": self.next_id,
            "current_known": self.current_known,
            "entered_ts": self.entered_ts,
            "left_ts": self.left_ts,
            "clusters": [[c.id, c.lat, c.lon, c.n_fixes, list(c.visits)] for c in self.clusters],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnownLocationStore":
        store = cls(d["radius_m"], d["window_s"], d["min_span_s"])
        store.newest = d["newest"]
        store.next_id = d["next_id"]
        store.current_known = d["current_known"]
        store.entered_ts = d["entered_ts"]
        store.left_ts = d["left_ts"]
        for cid, lat, lon, n, visits in d["clusters"]:
            c = _Cluster(cid, lat, lon)
            c.n_fixes = n
            c.visits = deque(visits)
            store.clusters.append(c)
        return store


def update_known_locations(store: KnownLocationStore, geo: Optional[GeoPoint], ts: Timestamp | int):
    """Fold one fix into ``store`` (in place) and return ``(store, state)``."""
    seconds = ts.seconds if isinstance(ts, Timestamp) else int(ts)
    return store, store.update(geo, seconds)


# --- contextual features -----------------------------------------------------


def contextual_features(ctx: ContextSnapshot, location: LocationState, frecent5: Sequence[float],
                        weekend_days: Sequence[int] = WEEKEND_DAYS["default"],
                        hash_seed: int = HASH_SEED) -> np.ndarray:
    """Build the 151-wide contextual vector.

    ``location`` is the tracker state for ``ctx`` (see ``KnownLocationStore.peek``).
    Transition decays only fire when the log carries the matching last-change time.
    """
    psi = np.zeros(Layout.DIM)
    now = ctx.ts.seconds
    sod = local_second_of_day(ctx.ts)
    hour = sod // 3600
    dow = local_day_of_week(ctx.ts)
    psi[Layout.HOUR.start + hour] = 1.0
    psi[Layout.DOW.start + dow] = 1.0
    psi[Layout.PART_OF_DAY.start + part_of_day(hour)] = 1.0
    if dow in weekend_days:
        psi[Layout.WEEKEND] = 1.0

    def minutes_since(when: Optional[int]) -> Optional[float]:
        return None if when is None else (now - when) / 60.0

    entered = ctx.last_change("location_entry")
    left = ctx.last_change("location_exit")
    if location.is_known:
        psi[Layout.LOCATION_ID.start + hash_bucket(f"loc:{location.cluster_id}", seed=hash_seed)] = 1.0
        psi[Layout.LOCATION_KNOWN] = 1.0
        m = minutes_since(entered if entered is not None else location.entered_ts)
        if m is not None:
            psi[Layout.LOCATION_ENTERED] = decay(m)
    elif location.is_known is False:
        m = minutes_since(left if left is not None else location.left_ts)
        if m is not None:
            psi[Layout.LOCATION_LEFT] = decay(m)

    def signal(on: Optional[bool], kind: str, flag: int, conn: int, disc: int):
        if on is None:
            return
        m = minutes_since(ctx.last_change(kind))
        if on:
            psi[flag] = 1.0
            if m is not None:
                psi[conn] = decay(m)
        elif m is not None:
            psi[disc] = decay(m)

    signal(ctx.headphones, "headphones", Layout.HEADPHONES, Layout.HEADPHONES_CONNECTED,
           Layout.HEADPHONES_DISCONNECTED)
    signal(ctx.wifi_connected, "wifi", Layout.WIFI, Layout.WIFI_CONNECTED, Layout.WIFI_DISCONNECTED)
    signal(ctx.bt_connected, "bt", Layout.BT, Layout.BT_CONNECTED, Layout.BT_DISCONNECTED)
    if ctx.wifi_ssid is not None:
        psi[Layout.WIFI_SSID.start + hash_bucket(f"wifi:{ctx.wifi_ssid}", seed=hash_seed)] = 1.0
    if ctx.bt_id is not None:
        psi[Layout.BT_ID.start + hash_bucket(f"bt:{ctx.bt_id}", seed=hash_seed)] = 1.0

    top = list(frecent5)[:5]
    psi[Layout.FRECENT.start:Layout.FRECENT.start + len(top)] = top
    return psi


# --- app-dependent kernels (scalar reference forms) --------------------------


def _circular_sod_distance(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % SECONDS_PER_DAY
    return np.minimum(d, SECONDS_PER_DAY - d)


def _clamp_tiny(x):
    return np.where(x < 1e-300, 0.0, x)


def _gauss(neg_arg):
    """``_clamp_tiny(exp(neg_arg))`` without the slow underflow path.

    exp(-700) is already below the clamp threshold, so clipping there first
    changes nothing after clamping.
    """
    return _clamp_tiny(np.exp(np.maximum(neg_arg, -700.0)))


def app_recency_feature(times: Sequence[int], now: int, h_days: float) -> float:
    if len(times) == 0:
        return 0.0
    dt = (now - np.asarray(times, dtype=float)) / SECONDS_PER_DAY
    return float(np.mean(0.5 * (1.0 + np.exp(-dt ** 2 / (2.0 * h_days ** 2)))))


def app_time_of_day_feature(times: Sequence[int], now: int, h_seconds: float, tz_offset_minutes: int = 0) -> float:
    """``times`` are UTC seconds; all of them are read in the same local offset."""
    if len(times) == 0:
        return 0.0
    shift = 60 * tz_offset_minutes
    d = _circular_sod_distance(np.asarray(times) + shift, now + shift)
    return float(np.mean(_clamp_tiny(np.exp(-d.astype(float) ** 2 / (2.0 * h_seconds ** 2)))))


def app_location_feature(locations: Sequence[GeoPoint], geo: Optional[GeoPoint], h_meters: float) -> float:
    if geo is None or len(locations) == 0:
        return 0.0
    lat = np.array([p.lat for p in locations])
    lon = np.array([p.lon for p in locations])
    d = haversine_m(lat, lon, geo.lat, geo.lon)
    return float(np.mean(_clamp_tiny(np.exp(-d ** 2 / (2.0 * h_meters ** 2)))))


def frecency(times: Sequence[int], now: int, p: float = 0.1, t_days: float = 60.0) -> float:
    if len(times) == 0:
        return 0.0
    age = now - np.asarray(times, dtype=float)
    window = t_days * SECONDS_PER_DAY
    age = age[(age >= 0) & (age <= window)]
    return float(np.sum(p ** (age / window)))


# --- click history -----------------------------------------------------------


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")


def _unb64(s: str, dtype) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=dtype).copy()


_NEG_HALF_INV_SQ_REC = np.array([-0.5 / (h * h) for h in RECENCY_BANDWIDTHS_DAYS])
_NEG_HALF_INV_SQ_TOD = np.array([-0.5 / (h * h) for h in TIME_OF_DAY_BANDWIDTHS_S])
_NEG_HALF_INV_SQ_LOC = np.array([-0.5 / (h * h) for h in LOCATION_BANDWIDTHS_M])


def _group_means(apps: np.ndarray, vals: np.ndarray, width: int) -> np.ndarray:
    """Per-app mean of each row of ``vals`` -> ``(width, rows)``; zero for absent apps."""
    rows = len(vals)
    keys = (apps + width * np.arange(rows)[:, None]).ravel()
    sums = np.bincount(keys, weights=vals.ravel(), minlength=rows * width).reshape(rows, width)
    counts = np.bincount(apps, minlength=width)
    return (sums / np.maximum(counts, 1)).T


_COLUMNS = ("t", "sod", "lat", "lon", "lat_r", "lon_r", "cos_lat", "app", "alive_t", "alive_l")


class AppHistory:
    """Per-app click times and locations stored as flat arrays.

    Each app keeps at most ``time_cap`` click times and ``location_cap``
    located clicks (FIFO eviction). ``horizon_s`` additionally drops clicks
    older than that age on every append. Either cap may be ``None``.
    """

    def __init__(self, time_cap: Optional[int] = TIME_CAP, location_cap: Optional[int] = LOCATION_CAP,
                 horizon_s: Optional[float] = None):
        self.time_cap = time_cap
        self.location_cap = location_cap
        self.horizon_s = horizon_s
        self._cap = 256
        self._n = 0
        self.t = np.zeros(self._cap, dtype=np.int64)
        self.sod = np.zeros(self._cap, dtype=np.int64)
        self.lat = np.full(self._cap, np.nan)
        self.lon = np.full(self._cap, np.nan)
        self.lat_r = np.full(self._cap, np.nan)
        self.lon_r = np.full(self._cap, np.nan)
        self.cos_lat = np.full(self._cap, np.nan)
        self.app = np.zeros(self._cap, dtype=np.int64)
        self.alive_t = np.zeros(self._cap, dtype=bool)
        self.alive_l = np.zeros(self._cap, dtype=bool)
        self.totals: list[int] = []
        self._times: list[deque] = []
        self._locs: list[deque] = []
        self._oldest = 0

    @property
    def n_apps(self) -> int:
        return len(self.totals)

    def _ensure_app(self, a: int):
        while len(self.totals) <= a:
            self.totals.append(0)
            self._times.append(deque())
            self._locs.append(deque())

    def _grow(self):
        self._cap *= 2
        for name in _COLUMNS:
            old = getattr(self, name)
            fill = np.nan if old.dtype == float else 0
            new = np.full(self._cap, fill, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def append(self, a: int, ts: Timestamp, geo: Optional[GeoPoint]):
        self._ensure_app(a)
        if self._n == self._cap:
            self._compact()
            if self._n == self._cap:
                self._grow()
        i = self._n
        self._n += 1
        self.t[i] = ts.seconds
        self.sod[i] = local_second_of_day(ts)
        self.app[i] = a
        self.alive_t[i] = True
        self._times[a].append(i)
        self.totals[a] += 1
        if self.time_cap is not None and len(self._times[a]) > self.time_cap:
            self.alive_t[self._times[a].popleft()] = False
        if geo is not None:
            self.lat[i] = geo.lat
            self.lon[i] = geo.lon
            self.lat_r[i] = math.radians(geo.lat)
            self.lon_r[i] = math.radians(geo.lon)
            self.cos_lat[i] = math.cos(self.lat_r[i])
            self.alive_l[i] = True
            self._locs[a].append(i)
            if self.location_cap is not None and len(self._locs[a]) > self.location_cap:
                self.alive_l[self._locs[a].popleft()] = False
        if self.horizon_s is not None:
            cutoff = ts.seconds - self.horizon_s
            while self._oldest < self._n and self.t[self._oldest] < cutoff:
                j = self._oldest
                if self.alive_t[j]:
                    self.alive_t[j] = False
                    self._times[self.app[j]].popleft()
                if self.alive_l[j]:
                    self.alive_l[j] = False
                    self._locs[self.app[j]].popleft()
                self._oldest += 1

    def _compact(self):
        n = self._n
        keep = np.flatnonzero(self.alive_t[:n] | self.alive_l[:n])
        if len(keep) == n:
            return
        remap = np.full(n, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        for name in _COLUMNS:
            arr = getattr(self, name)
            arr[: len(keep)] = arr[keep]
        self._n = len(keep)
        self.alive_t[self._n:] = False
        self.alive_l[self._n:] = False
        self._times = [deque(int(remap[i]) for i in dq) for dq in self._times]
        self._locs = [deque(int(remap[i]) for i in dq) for dq in self._locs]
        self._oldest = int(np.searchsorted(keep, self._oldest)) if self._oldest else 0

    def times(self, a: int) -> list[int]:
        if a >= self.n_apps:
            return []
        return [int(self.t[i]) for i in self._times[a]]

    def locations(self, a: int) -> list[GeoPoint]:
        if a >= self.n_apps:
            return []
        return [GeoPoint(float(self.lat[i]), float(self.lon[i])) for i in self._locs[a]]

    def total(self, a: int) -> int:
        return self.totals[a] if a < self.n_apps else 0

    def app_features(self, ts: Timestamp, geo: Optional[GeoPoint], n_apps: int) -> np.ndarray:
        """``(n_apps, 9)`` matrix of the recency, time-of-day and location kernels."""
        out = np.zeros((n_apps, PHI_DIM))
        n = self._n
        width = max(n_apps, self.n_apps)
        idx = np.flatnonzero(self.alive_t[:n])
        if len(idx):
            apps = self.app[idx]
            dt = (ts.seconds - self.t[idx]) / SECONDS_PER_DAY
            d = _circular_sod_distance(self.sod[idx], local_second_of_day(ts)).astype(float)
            vals = np.empty((6, len(idx)))
            # 0.5 * (1 + e^x) is exactly 0.5 long before x = -700, so the clip is harmless
            vals[:3] = 0.5 * (1.0 + np.exp(np.maximum(np.multiply.outer(_NEG_HALF_INV_SQ_REC, dt * dt), -700.0)))
            vals[3:] = _gauss(np.multiply.outer(_NEG_HALF_INV_SQ_TOD, d * d))
            out[:, :6] = _group_means(apps, vals, width)[:n_apps]
        if geo is not None:
            idx = np.flatnonzero(self.alive_l[:n])
            if len(idx):
                dist = haversine_prepared(self.lat_r[idx], self.lon_r[idx], self.cos_lat[idx], geo.lat, geo.lon)
                vals = _gauss(np.multiply.outer(_NEG_HALF_INV_SQ_LOC, dist * dist))
                out[:, 6:] = _group_means(self.app[idx], vals, width)[:n_apps]
        return out

    def frecency_scores(self, now: int, n_apps: int, p: float = 0.1, t_days: float = 60.0) -> np.ndarray:
        n = self._n
        idx = np.flatnonzero(self.alive_t[:n])
        window = t_days * SECONDS_PER_DAY
        age = (now - self.t[idx]).astype(float)
        ok = (age >= 0) & (age <= window)
        vals = p ** (age[ok] / window)
        return np.bincount(self.app[idx][ok], weights=vals, minlength=n_apps)[:n_apps]

    def to_dict(self) -> dict:
        self._compact()
        n = self._n
        return {
            "time_cap": self.time_cap,
            "location_cap": self.location_cap,
            "horizon_s": self.horizon_s,
            "n": n,
            "t": _b64(self.t[:n]),
            "sod": _b64(self.sod[:n]),
            "lat": _b64(self.lat[:n]),
            "lon": _b64(self.lon[:n]),
            "app": _b64(self.app[:n]),
            "alive_t": _b64(self.alive_t[:n]),
            "alive_l": _b64(self.alive_l[:n]),
            "totals": list(self.totals),
            "times": [list(dq) for dq in self._times],
            "locs": [list(dq) for dq in self._locs],
            "oldest": self._oldest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AppHistory":
        h = cls(d["time_cap"], d["location_cap"], d["horizon_s"])
        n = d["n"]
        while h._cap < max(n, 1):
            h._cap *= 2
        h._n = n
        for name, dtype in (("t", np.int64), ("sod", np.int64), ("lat", float), ("lon", float),
                            ("app", np.int64), ("alive_t", bool), ("alive_l", bool)):
            fill = np.nan if dtype is float else 0
            arr = np.full(h._cap, fill, dtype=dtype)
            arr[:n] = _unb64(d[name], dtype)
            setattr(h, name, arr)
        for name in ("lat_r", "lon_r", "cos_lat"):
            setattr(h, name, np.full(h._cap, np.nan))
        h.lat_r[:n] = np.radians(h.lat[:n])
        h.lon_r[:n] = np.radians(h.lon[:n])
        h.cos_lat[:n] = np.cos(h.lat_r[:n])
        h.totals = list(d["totals"])
        h._times = [deque(x) for x in d["times"]]
        h._locs = [deque(x) for x in d["locs"]]
        h._oldest = d["oldest"]
        return h


def frecent_top5(scores: Sequence[float]) -> list[float]:
    """Five largest frecency scores, zero-padded."""
    s = sorted((float(x) for x in scores if x > 0), reverse=True)[:5]
    return s + [0.0] * (5 - len(s))


def frecent_top5_apps(histories: dict[str, Sequence[int]], now: int, p: float = FRECENT_P,
                      t_days: float = FRECENT_T_DAYS) -> list[tuple[Optional[str], float]]:
    """Reference form over plain ``{app: click_times}``: top-5 ``(app, score)``."""
    scored = [(a, frecency(ts, now, p, t_days)) for a, ts in histories.items()]
    scored = sorted((x for x in scored if x[1] > 0), key=lambda x: (-x[1], x[0]))[:5]
    return scored + [(None, 0.0)] * (5 - len(scored))
