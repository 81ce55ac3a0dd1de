"""Seeded generator of multi-device app-click streams.

Each device gets a persona: installed apps with Zipf popularity, a few apps
pinned to the home screen / dock, a weekly place timetable, and habit rules
that boost particular apps in particular contexts (a weekday window, a place,
or a connected accessory). A click picks home apps with a fixed share and
otherwise samples a second-tier app from the context-dependent weights.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import (
    SECONDS_PER_DAY,
    ClickEvent,
    ContextSnapshot,
    GeoPoint,
    PredictionSet,
    Timestamp,
    haversine_m,
    local_day_index,
    local_day_of_week,
    local_second_of_day,
)
from .features import part_of_day
from .predictors import Predictor, UpdateReport

# 2015-01-05 00:00 (a Monday), read as local wall-clock time.
EPOCH_LOCAL = 1420416000
METERS_PER_DEG_LAT = 111_320.0
PLACES = ("home", "work", "market", "gym", "away")
# rough share of clicks made at each place (measured on generated streams)
PLACE_SHARE = np.array([0.57, 0.35, 0.02, 0.01, 0.05])

_VENDORS = ("acme", "bluebird", "cedar", "delta", "ember", "fjord", "granite", "harbor", "indigo", "juniper",
            "kestrel", "lumen", "maple", "nimbus", "orbit", "pioneer", "quartz", "raven", "summit", "tundra")
_WORDS = ("mail", "chat", "news", "maps", "music", "podcast", "camera", "gallery", "notes", "calendar",
          "weather", "parking", "bank", "shop", "fitness", "recipes", "books", "video", "radio", "taxi",
          "transit", "flights", "scores", "stocks", "translate", "scanner", "wallet", "games", "puzzle", "social")
APP_CATALOG = tuple(f"com.{v}.{w}" for w in _WORDS for v in _VENDORS)

HOURLY_PROFILE = np.array([0.25, 0.12, 0.06, 0.04, 0.05, 0.15, 0.5, 1.1, 1.5, 1.3, 1.1, 1.1,
                           1.4, 1.3, 1.0, 1.0, 1.1, 1.3, 1.5, 1.5, 1.6, 1.5, 1.1, 0.6])
DAYPART_SHARE = np.bincount([part_of_day(h) for h in range(24)], weights=HOURLY_PROFILE, minlength=6)
DAYPART_SHARE = DAYPART_SHARE / DAYPART_SHARE.sum()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimParams:
    n_apps_min: int = 74
    n_apps_max: int = 120
    home_min: int = 4
    home_max: int = 6
    zipf_min: float = 0.8
    zipf_max: float = 1.5
    clicks_per_day: float = 28.8
    home_share: float = 0.35
    horizon_days: int = 180
    extra_habits_max: int = 5
    bursts_min: int = 1
    bursts_max: int = 2
    affinity_sigma: float = 1.5
    head_boost: float = 1.5
    home_zipf_scale: float = 0.0
    burst_level: tuple[float, float] = (1.1, 1.3)
    burst_days: tuple[int, int] = (35, 56)
    burst_first_day: int = 30
    fade_days: tuple[int, int] = (0, 0)
    geo_sigma_m: float = 10.0
    fix_prob: float = 0.95
    staggered_installs: bool = False
    country: str = "US"

    def validate(self):
        if not 20 <= self.n_apps_min <= self.n_apps_max <= 120:
            raise ConfigError("installed-app range must satisfy 20 <= min <= max <= 120")
        if not 4 <= self.home_min <= self.home_max <= 6:
            raise ConfigError("home-screen range must satisfy 4 <= min <= max <= 6")
        if not 0.8 <= self.zipf_min <= self.zipf_max <= 1.5:
            raise ConfigError("Zipf exponent range must lie in [0.8, 1.5]")
        if not 0.0 <= self.home_share < 1.0:
            raise ConfigError("home_share must lie in [0, 1)")
        if self.clicks_per_day <= 0 or self.horizon_days < 1:
            raise ConfigError("clicks_per_day and horizon_days must be positive")
        if not 0 <= self.bursts_min <= self.bursts_max:
            raise ConfigError("burst range must satisfy 0 <= min <= max")
        if not 0.0 <= self.fix_prob <= 1.0:
            raise ConfigError("fix_prob must lie in [0, 1]")


@dataclass(frozen=True)
class HabitRule:
    app: str
    kind: str
    days: tuple[int, ...]
    hours: tuple[int, int]
    multiplier: float
    anchor: Optional[str] = None
    radius_m: float = 300.0
    trigger: Optional[str] = None

    def __post_init__(self):
        if not self.multiplier > 1.0:
            raise ConfigError("habit multiplier must exceed 1")
        if not self.days or not 0 <= self.hours[0] < self.hours[1] <= 24:
            raise ConfigError("habit window is empty")

    def in_window(self, dow: int, hour: int) -> bool:
        return dow in self.days and self.hours[0] <= hour < self.hours[1]


@dataclass(frozen=True)
class Burst:
    """A stretch of days during which an app is used far more than usual.

    The boost holds until ``fade_days`` before the end, then falls linearly.
    """

    app: str
    start_day: int
    end_day: int
    boost: float
    fade_days: int = 0

    def factor(self, day: int) -> float:
        if not self.start_day <= day < self.end_day:
            return 1.0
        left = self.end_day - day
        if left > self.fade_days:
            return self.boost
        return 1.0 + (self.boost - 1.0) * left / (self.fade_days + 1)


@dataclass
class Persona:
    device_id: str
    seed: int
    installed: tuple[str, ...]
    home_screen: tuple[str, ...]
    zipf_exponent: float
    base_weights: dict[str, float]
    habits: tuple[HabitRule, ...]
    bursts: tuple[Burst, ...]
    anchors: dict[str, GeoPoint]
    place_affinity: dict[str, tuple[float, ...]]
    daypart_affinity: dict[str, tuple[float, ...]]
    install_day: dict[str, int]
    tz_offset_minutes: int
    clicks_per_day: float
    home_share: float
    leave_hour: float
    work_end_hour: float
    commute: str
    gym_day: Optional[int]
    home_ssid: str
    work_ssid: str
    car_bt: str
    country: str = "US"

    @property
    def candidates(self) -> tuple[str, ...]:
        home = set(self.home_screen)
        return tuple(a for a in self.installed if a not in home)

    def __post_init__(self):
        self._cand = list(self.candidates)
        self._cand_index = {a: i for i, a in enumerate(self._cand)}
        self._base = np.array([self.base_weights[a] for a in self._cand])
        self._install = np.array([self.install_day.get(a, 0) for a in self._cand])
        self._place = {p: np.array([self.place_affinity[a][i] for a in self._cand]) for i, p in enumerate(PLACES)}
        self._daypart = np.array([self.daypart_affinity[a] for a in self._cand]).T
        home_w = np.array([self.base_weights[a] for a in self.home_screen])
        self._home_p = home_w / home_w.sum()

    def place_of(self, ctx: ContextSnapshot) -> str:
        if ctx.geo is not None:
            best, best_d = "away", float("inf")
            for name, p in self.anchors.items():
                d = float(haversine_m(p.lat, p.lon, ctx.geo.lat, ctx.geo.lon))
                if d < best_d:
                    best, best_d = name, d
            return best if best_d <= 300.0 else "away"
        if ctx.wifi_ssid == self.home_ssid:
            return "home"
        if ctx.wifi_ssid == self.work_ssid:
            return "work"
        return "away"

    def candidate_weights(self, ctx: ContextSnapshot) -> tuple[list[str], np.ndarray]:
        """Unnormalized click weights of every second-tier app in ``ctx``."""
        day = local_day_index(ctx.ts) - EPOCH_LOCAL // SECONDS_PER_DAY
        dow = local_day_of_week(ctx.ts)
        hour = local_second_of_day(ctx.ts) // 3600
        w = self._base * self._place[self.place_of(ctx)] * self._daypart[part_of_day(hour)]
        w = np.where(self._install <= day, w, 0.0)
        for b in self.bursts:
            w[self._cand_index[b.app]] *= b.factor(day)
        for h in self.habits:
            if not h.in_window(dow, hour):
                continue
            if h.anchor is not None:
                if ctx.geo is None:
                    continue
                p = self.anchors[h.anchor]
                if float(haversine_m(p.lat, p.lon, ctx.geo.lat, ctx.geo.lon)) > h.radius_m:
                    continue
            if h.trigger == "headphones" and not ctx.headphones:
                continue
            if h.trigger == "bt" and not ctx.bt_connected:
                continue
            if h.trigger == "wifi" and not ctx.wifi_connected:
                continue
            w[self._cand_index[h.app]] *= h.multiplier
        return self._cand, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = {k: [v.lat, v.lon] for k, v in self.anchors.items()}
        return d


def _offset(p: GeoPoint, north_m: float, east_m: float) -> GeoPoint:
    lat = p.lat + north_m / METERS_PER_DEG_LAT
    lon = p.lon + east_m / (METERS_PER_DEG_LAT * math.cos(math.radians(p.lat)))
    return GeoPoint(lat, lon)


def _multiplier_for_share(share: float, w_app: float, w_total: float, ceiling: float = math.inf) -> float:
    """Boost that gives ``w_app`` the target share of all candidate weight.

    ``ceiling`` bounds the boosted weight itself, so frequent windows cannot
    lift a tail app into the favourites.
    """
    m = share / (1.0 - share) * (w_total - w_app) / w_app
    return max(1.0 + 1e-9, min(m, ceiling / w_app))


def persona_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def generate_persona(seed: int, params: SimParams = SimParams(), device_id: Optional[str] = None) -> Persona:
    params.validate()
    rng = np.random.default_rng(seed)
    n_apps = int(rng.integers(params.n_apps_min, params.n_apps_max + 1))
    installed = [APP_CATALOG[i] for i in rng.choice(len(APP_CATALOG), size=n_apps, replace=False)]
    n_home = int(rng.integers(params.home_min, params.home_max + 1))
    s = float(rng.uniform(params.zipf_min, params.zipf_max))

    home = installed[:n_home]
    cand = installed[n_home:]
    base = {a: 1.0 / (r + 1) ** (params.home_zipf_scale * s) for r, a in enumerate(home)}
    # the few favourite second-tier apps stand clearly apart from the rest
    base.update({a: (params.head_boost if r < 4 else 1.0) / (r + 1) ** s for r, a in enumerate(cand)})

    # habit targets sit in the tail; situational apps are rarely used outside their window
    nc = len(cand)
    weekly_app = cand[int(rng.integers(15, min(50, nc)))]
    daily_app = cand[int(rng.integers(6, 25))]
    music_app = cand[int(rng.integers(4, 15))]
    taken = {weekly_app, daily_app, music_app}
    base[weekly_app] *= 0.05
    base[daily_app] *= 0.3
    cand_total = sum(base[a] for a in cand)
    cap = 1.5 * base[cand[3]]

    habits = [
        HabitRule(weekly_app, "weekly", (5,), (9, 12), _multiplier_for_share(0.3, base[weekly_app], cand_total),
                  anchor="market", radius_m=300.0),
        HabitRule(daily_app, "daily", (0, 1, 2, 3, 4), (7, 10),
                  _multiplier_for_share(0.2, base[daily_app], cand_total, cap)),
        HabitRule(music_app, "hardware", tuple(range(7)), (0, 24),
                  _multiplier_for_share(0.2, base[music_app], cand_total, cap), trigger="headphones"),
    ]
    commute = "car" if rng.random() < 0.6 else "transit"
    if commute == "car":
        nav = next(a for a in cand[int(rng.integers(5, 20)):] if a not in taken)
        taken.add(nav)
        habits.append(HabitRule(nav, "hardware", tuple(range(7)), (0, 24),
                                _multiplier_for_share(0.25, base[nav], cand_total, cap), trigger="bt"))
    gym_day = int(rng.integers(5, 7)) if rng.random() < 0.5 else None
    for _ in range(int(rng.integers(0, params.extra_habits_max + 1))):
        app = cand[int(rng.integers(8, nc))]
        if app in taken:
            continue
        taken.add(app)
        start = int(rng.integers(6, 21))
        days = tuple(sorted(rng.choice(7, size=int(rng.integers(1, 4)), replace=False).tolist()))
        anchor = ["home", "work", None][int(rng.integers(3))]
        habits.append(HabitRule(app, "weekly" if len(days) < 5 else "daily", days, (start, start + 2),
                                _multiplier_for_share(0.2, base[app], cand_total), anchor=anchor,
                                radius_m=300.0))

    # long bursts slightly above the weakest favourite: enough to be noticed by
    # recency-weighted counts, never enough to overtake the favourite in
    # cumulative counts (burst clicks stay below 70% of its clicks so far)
    bursts = []
    r3 = base[cand[3]]
    day = params.burst_first_day
    for _ in range(int(rng.integers(params.bursts_min, params.bursts_max + 1))):
        app = cand[int(rng.integers(8, min(40, nc)))]
        level = float(rng.uniform(*params.burst_level))
        fade = int(rng.integers(params.fade_days[0], params.fade_days[1] + 1))
        latest = params.horizon_days - params.burst_days[0] - fade - 5
        if app in taken or latest <= day:
            continue
        start = int(rng.integers(day, latest + 1))
        longest = min(params.burst_days[1], int(0.7 * start / (level - 0.7)),
                      params.horizon_days - start - fade - 5)
        if longest < params.burst_days[0]:
            continue
        taken.add(app)
        length = int(rng.integers(params.burst_days[0], longest + 1)) + fade
        bursts.append(Burst(app, start, start + length, max(1.0, level * r3 / base[app]), fade))
        day = start + length

    home_pt = GeoPoint(float(rng.uniform(25.0, 50.0)), float(rng.uniform(-120.0, 30.0)))

    def away(lo_km, hi_km):
        r, ang = rng.uniform(lo_km, hi_km) * 1000.0, rng.uniform(0, 2 * math.pi)
        return _offset(home_pt, r * math.cos(ang), r * math.sin(ang))

    anchors = {"home": home_pt, "work": away(4, 15), "market": away(1.5, 5)}
    if gym_day is not None:
        anchors["gym"] = away(1, 4)

    # favourites are used about equally everywhere; the tail is situational.
    # Affinities average to 1 over where and when clicks happen, so they move
    # clicks around without changing an app's overall popularity much.
    def affinity(share, sigma):
        v = rng.lognormal(0.0, sigma, len(share))
        return tuple(float(x) for x in v / (v @ share))

    flat = set(cand[:4])
    place_aff, daypart_aff = {}, {}
    for a in installed:
        sigma = params.affinity_sigma * (0.25 if a in flat else 1.0)
        place_aff[a] = affinity(PLACE_SHARE, sigma)
        daypart_aff[a] = affinity(DAYPART_SHARE, sigma)
    install_day = {a: 0 for a in installed}
    if params.staggered_installs:
        for a in cand[10:]:
            if rng.random() < 0.5:
                install_day[a] = int(rng.integers(0, params.horizon_days))

    tag = f"{int(rng.integers(1 << 16)):04x}"
    return Persona(
        device_id=device_id or f"dev-{seed & 0xFFFFFF:06x}",
        seed=seed,
        installed=tuple(installed),
        home_screen=tuple(home),
        zipf_exponent=s,
        base_weights=base,
        habits=tuple(habits),
        bursts=tuple(bursts),
        anchors=anchors,
        place_affinity=place_aff,
        daypart_affinity=daypart_aff,
        install_day=install_day,
        tz_offset_minutes=int(rng.choice([-480, -300, 0, 60, 120, 330])),
        clicks_per_day=float(params.clicks_per_day * rng.uniform(0.9, 1.1)),
        home_share=params.home_share,
        leave_hour=float(rng.uniform(7.0, 8.5)),
        work_end_hour=float(rng.uniform(16.5, 18.5)),
        commute=commute,
        gym_day=gym_day,
        home_ssid=f"home-{tag}",
        work_ssid=f"corp-{tag}",
        car_bt=f"car-{tag}",
        country=params.country,
    )


# --- daily timetable -----------------------------------------------------------


@dataclass(frozen=True)
class _Segment:
    start: int  # local seconds since EPOCH_LOCAL day 0
    place: str
    wifi: Optional[str]
    bt: Optional[str]
    headphones: bool


def _day_segments(p: Persona, day: int, rng: np.random.Generator) -> list[_Segment]:
    base = day * SECONDS_PER_DAY
    dow = day % 7  # day 0 is a Monday

    def at(hour: float) -> int:
        return base + int(round(hour * 3600 + rng.normal(0.0, 900.0)))

    segs = [_Segment(base, "home", p.home_ssid, None, False)]
    car = p.commute == "car"
    if dow < 5:
        leave = at(p.leave_hour)
        arrive = leave + int(rng.uniform(25, 50) * 60)
        off = at(p.work_end_hour)
        back = off + int(rng.uniform(25, 50) * 60)
        segs += [
            _Segment(leave, "commute", None, p.car_bt if car else None, not car),
            _Segment(arrive, "work", p.work_ssid, None, False),
            _Segment(off, "commute", None, p.car_bt if car else None, not car),
            _Segment(back, "home", p.home_ssid, None, False),
        ]
    elif dow == 5:
        go = at(9.0)
        segs += [
            _Segment(go, "commute", None, p.car_bt if car else None, False),
            _Segment(go + 1200, "market", None, None, False),
            _Segment(at(12.0), "home", p.home_ssid, None, False),
        ]
    if p.gym_day is not None and dow == p.gym_day:
        g = at(17.0)
        segs += [_Segment(g, "gym", None, None, True), _Segment(g + 5400, "home", p.home_ssid, None, False)]
    if rng.random() < 0.3:
        e = at(21.0)
        segs += [_Segment(e, "home", p.home_ssid, None, True), _Segment(e + 3600, "home", p.home_ssid, None, False)]
    segs.sort(key=lambda s: s.start)
    out = []
    for s in segs:
        s = _Segment(min(max(s.start, base), base + SECONDS_PER_DAY - 1), s.place, s.wifi, s.bt, s.headphones)
        if out and s.start == out[-1].start:
            out[-1] = s
        else:
            out.append(s)
    return out


def _fix(p: Persona, seg: _Segment, t_frac: float, sigma: float, fix_prob: float,
         rng: np.random.Generator) -> Optional[GeoPoint]:
    if seg.place == "commute":
        if rng.random() > 0.7:
            return None
        a, b = p.anchors["home"], p.anchors["work"]
        center = GeoPoint(a.lat + (b.lat - a.lat) * t_frac, a.lon + (b.lon - a.lon) * t_frac)
        return _offset(center, rng.normal(0, 30.0), rng.normal(0, 30.0))
    if rng.random() > fix_prob:
        return None
    return _offset(p.anchors[seg.place], rng.normal(0, sigma), rng.normal(0, sigma))


SLOT_CHOICES = ("app_tray", "folder", "search", "prediction_bar")
SLOT_P = np.array([0.6, 0.15, 0.15, 0.1])


def iter_clicks(persona: Persona, days: int, seed: int, params: SimParams = SimParams()) -> Iterator[ClickEvent]:
    """Time-ordered click events for ``days`` days of ``persona``."""
    rng = np.random.default_rng(seed)
    tz = persona.tz_offset_minutes
    shift = 60 * tz
    prof = HOURLY_PROFILE / HOURLY_PROFILE.sum()
    state = {"headphones": False, "wifi": None, "bt": None}
    changed: dict[str, int] = {}
    prev_seg: Optional[_Segment] = None
    for day in range(days):
        segs = _day_segments(persona, day, rng)
        starts = [s.start for s in segs]
        n = int(rng.poisson(persona.clicks_per_day))
        hours = rng.choice(24, size=n, p=prof)
        local = np.sort(day * SECONDS_PER_DAY + hours * 3600 + rng.integers(0, 3600, size=n))
        # walk segments and clicks together so transitions only reflect past changes
        si = -1
        for t_local in local.tolist():
            while si + 1 < len(segs) and segs[si + 1].start <= t_local:
                si += 1
                seg = segs[si]
                seg_utc = EPOCH_LOCAL + seg.start - shift
                if prev_seg is not None:
                    if seg.headphones != state["headphones"]:
                        changed["headphones"] = seg_utc
                    if seg.wifi != state["wifi"]:
                        changed["wifi"] = seg_utc
                    if seg.bt != state["bt"]:
                        changed["bt"] = seg_utc
                state.update(headphones=seg.headphones, wifi=seg.wifi, bt=seg.bt)
                prev_seg = seg
            seg = segs[si]
            end = segs[si + 1].start if si + 1 < len(segs) else (day + 1) * SECONDS_PER_DAY
            frac = (t_local - seg.start) / max(1, end - seg.start)
            geo = _fix(persona, seg, frac, params.geo_sigma_m, params.fix_prob, rng)
            ts = Timestamp(int(EPOCH_LOCAL + t_local - shift), tz)
            ctx = ContextSnapshot(
                ts=ts, geo=geo, headphones=seg.headphones,
                wifi_connected=seg.wifi is not None, wifi_ssid=seg.wifi,
                bt_connected=seg.bt is not None, bt_id=seg.bt,
                transitions=tuple(sorted(changed.items())),
            )
            if rng.random() < persona.home_share:
                app = persona.home_screen[int(rng.choice(len(persona.home_screen), p=persona._home_p))]
                slot = "home_screen" if rng.random() < 0.7 else "app_dock"
            else:
                apps, w = persona.candidate_weights(ctx)
                app = apps[int(rng.choice(len(apps), p=w / w.sum()))]
                slot = SLOT_CHOICES[int(rng.choice(4, p=SLOT_P))]
            yield ClickEvent(persona.device_id, ctx, app, slot)


def simulate(persona: Persona, days: int, seed: int, params: SimParams = SimParams()) -> list[ClickEvent]:
    if days < 0:
        raise ConfigError("days must be >= 0")
    return list(iter_clicks(persona, days, seed, params))


def generate_population(n_devices: int, days: int, seed: int,
                        params: Optional[SimParams] = None) -> tuple[list[Persona], list[list[ClickEvent]]]:
    """Personas and per-device streams; device ``i`` is ``dev{i:04d}``."""
    params = params or SimParams(horizon_days=max(days, 1))
    personas, streams = [], []
    for i in range(n_devices):
        ps = persona_seed(seed, i)
        persona = generate_persona(ps, params, device_id=f"dev{i:04d}")
        personas.append(persona)
        streams.append(simulate(persona, days, ps ^ 0x5A5A, params))
    return personas, streams


class GroundTruthPredictor(Predictor):
    """Bayes-optimal top-k from the generating weights (diagnostics only)."""

    name = "oracle"
    learns_auc = False

    def __init__(self, personas: Sequence[Persona] | Persona):
        if isinstance(personas, Persona):
            personas = [personas]
        self.personas = {p.device_id: p for p in personas}
        self.device: Optional[str] = None

    def predict(self, ctx: ContextSnapshot, k: int, candidates=None) -> PredictionSet:
        persona = self.personas[self.device] if self.device else next(iter(self.personas.values()))
        apps, w = persona.candidate_weights(ctx)
        order = sorted(range(len(apps)), key=lambda i: (-w[i], apps[i]))[:k]
        total = w.sum()
        return PredictionSet(tuple((apps[i], float(w[i] / total)) for i in order if w[i] > 0))

    def observe(self, click: ClickEvent):
        self.device = click.device_id
        return UpdateReport()
