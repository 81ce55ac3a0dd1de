"""Prediction policies: k most-frequently-used, Frecency, and the online
AUC-maximizing passive-aggressive learner (AUC-PA).

Every predictor exposes ``predict(ctx, k)`` (read-only) and
``observe(click)`` (the only mutator), and learns its home-screen/dock
exclusion set from the slots of the clicks it observes.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import SECONDS_PER_DAY, ClickEvent, ContextSnapshot, PredictionSet, local_second_of_day
from .features import (
    FRECENT_P,
    FRECENT_T_DAYS,
    HASH_SEED,
    LOCATION_CAP,
    PHI_DIM,
    PSI_DIM,
    TIME_CAP,
    WEEKEND_DAYS,
    AppHistory,
    KnownLocationStore,
    LocationState,
    contextual_features,
    frecency,
    frecent_top5,
)

SNAPSHOT_VERSION = 1
NORM_CAP = 1.0 / math.sqrt(2.0)


@dataclass
class UpdateReport:
    loss: float = 0.0
    tau: float = 0.0
    negative_app: Optional[str] = None
    auc_indicator: Optional[int] = None
    skipped: bool = False
    reason: str = ""
    pair: Optional["RoundPair"] = None


class AppRegistry:
    """Stable app-id <-> index mapping plus the learned exclusion set."""

    def __init__(self):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        self.excluded: set[int] = set()

    def __len__(self):
        return len(self.names)

    def register(self, app: str) -> int:
        i = self.index.get(app)
        if i is None:
            i = len(self.names)
            self.names.append(app)
            self.index[app] = i
        return i

    def candidates(self) -> np.ndarray:
        return np.array([i for i in range(len(self.names)) if i not in self.excluded], dtype=np.int64)

    def observe_slot(self, click: ClickEvent) -> int:
        a = self.register(click.app)
        if click.is_home:
            self.excluded.add(a)
        return a

    def to_dict(self) -> dict:
        return {"names": list(self.names), "excluded": sorted(self.excluded)}

    @classmethod
    def from_dict(cls, d: dict) -> "AppRegistry":
        r = cls()
        for name in d["names"]:
            r.register(name)
        r.excluded = set(d["excluded"])
        return r


# --- ranking helpers ---------------------------------------------------------


def kmfu_predict(counts: Mapping[str, int], k: int) -> PredictionSet:
    ranked = sorted(((a, n) for a, n in counts.items() if n > 0), key=lambda x: (-x[1], x[0]))
    return PredictionSet(tuple((a, 1.0) for a, _ in ranked[:k]))


def frecency_predict(histories: Mapping[str, Sequence[int]], now: int, k: int,
                     p: float = 0.1, t_days: float = 60.0) -> PredictionSet:
    scored = [(a, frecency(ts, now, p, t_days)) for a, ts in histories.items()]
    ranked = sorted((x for x in scored if x[1] > 0), key=lambda x: (-x[1], x[0]))
    return PredictionSet(tuple(ranked[:k]))


def predict_top_k(scores: Sequence[float], frecencies: Sequence[float], names: Sequence[str],
                  candidates: Sequence[int], k: int) -> PredictionSet:
    """Top-k candidates by model score, ties broken by frecency then id.

    When fewer than ``k`` candidates score above zero the remaining slots are
    filled by frecency rank and carry score 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(candidates) == 0:
        return PredictionSet()
    cand = [int(c) for c in candidates]
    pos = [c for c in cand if scores[c] > 0]
    pos.sort(key=lambda c: (-scores[c], -frecencies[c], names[c]))
    chosen = [(names[c], float(scores[c])) for c in pos[:k]]
    if len(chosen) < k:
        rest = [c for c in cand if not scores[c] > 0]
        rest.sort(key=lambda c: (-frecencies[c], names[c]))
        chosen += [(names[c], 0.0) for c in rest[: k - len(chosen)]]
    return PredictionSet(tuple(chosen))


def hinge_loss(pos_score: float, neg_score: float) -> float:
    """``[1 - f(x+, a) + f(x-, a-)]_+`` given the two scores."""
    return max(0.0, 1.0 - pos_score + neg_score)


def compute_tau(loss: float, diff_sq_norm: float, lam: float) -> float:
    if loss <= 0.0:
        return 0.0
    if diff_sq_norm <= 0.0:
        return 1.0 / lam
    return min(1.0 / lam, loss / diff_sq_norm)


def joint_scale(phi: np.ndarray, psi: np.ndarray, cap: float = NORM_CAP) -> np.ndarray:
    """Per-app factor that caps the stacked (phi, psi) vector at norm ``cap``."""
    sq = np.einsum("ij,ij->i", phi, phi) + float(psi @ psi)
    norm = np.sqrt(sq)
    return np.where(norm > cap, cap / np.where(norm > 0, norm, 1.0), 1.0)


# --- base class --------------------------------------------------------------


class Predictor:
    name = "base"
    learns_auc = False

    def predict(self, ctx: ContextSnapshot, k: int, candidates: Optional[Sequence[str]] = None) -> PredictionSet:
        raise NotImplementedError

    def observe(self, click: ClickEvent) -> UpdateReport:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _candidate_indices(self, registry: AppRegistry, candidates: Optional[Sequence[str]]) -> np.ndarray:
        if candidates is None:
            return registry.candidates()
        return np.array([registry.index[a] for a in candidates
                         if a in registry.index and registry.index[a] not in registry.excluded], dtype=np.int64)


class KMFUPredictor(Predictor):
    name = "kmfu"

    def __init__(self):
        self.registry = AppRegistry()
        self.counts: list[int] = []

    def predict(self, ctx, k, candidates=None):
        idx = self._candidate_indices(self.registry, candidates)
        names = self.registry.names
        return kmfu_predict({names[i]: self.counts[i] for i in idx}, k)

    def observe(self, click):
        a = self.registry.observe_slot(click)
        while len(self.counts) <= a:
            self.counts.append(0)
        self.counts[a] += 1
        return UpdateReport()

    def to_dict(self):
        return {"algo": self.name, "registry": self.registry.to_dict(), "counts": list(self.counts)}

    @classmethod
    def from_dict(cls, d):
        p = cls()
        p.registry = AppRegistry.from_dict(d["registry"])
        p.counts = list(d["counts"])
        return p


class FrecencyPredictor(Predictor):
    name = "frecency"

    def __init__(self, p: float = 0.1, t_days: float = 60.0):
        if not 0.0 < p < 1.0:
            raise ValueError("frecency p must lie in (0, 1)")
        if t_days <= 0:
            raise ValueError("frecency T must be positive")
        self.p = p
        self.t_days = t_days
        self.registry = AppRegistry()
        self.history = AppHistory(time_cap=None, location_cap=0, horizon_s=t_days * SECONDS_PER_DAY)

    def scores(self, now: int) -> np.ndarray:
        return self.history.frecency_scores(now, len(self.registry), self.p, self.t_days)

    def predict(self, ctx, k, candidates=None):
        idx = self._candidate_indices(self.registry, candidates)
        s = self.scores(ctx.ts.seconds)
        ranked = sorted((int(i) for i in idx if s[i] > 0), key=lambda i: (-s[i], self.registry.names[i]))
        return PredictionSet(tuple((self.registry.names[i], float(s[i])) for i in ranked[:k]))

    def observe(self, click):
        a = self.registry.observe_slot(click)
        self.history.append(a, click.ctx.ts, None)
        return UpdateReport()

    def to_dict(self):
        return {"algo": self.name, "p": self.p, "t_days": self.t_days,
                "registry": self.registry.to_dict(), "history": self.history.to_dict()}

    @classmethod
    def from_dict(cls, d):
        pr = cls(d["p"], d["t_days"])
        pr.registry = AppRegistry.from_dict(d["registry"])
        pr.history = AppHistory.from_dict(d["history"])
        return pr


# --- negative contexts -------------------------------------------------------


@dataclass
class NegativeContext:
    """A context captured at some click, frozen with its feature blocks.

    ``phi`` has one row per app registered at capture time; apps registered
    later had no history then, so their rows are implicitly zero.
    """

    psi: np.ndarray
    phi: np.ndarray

    def phi_for(self, n_apps: int) -> np.ndarray:
        if self.phi.shape[0] >= n_apps:
            return self.phi[:n_apps]
        out = np.zeros((n_apps, PHI_DIM))
        out[: self.phi.shape[0]] = self.phi
        return out


class NegativeStore:
    """Per-app uniform reservoirs of contexts in which the app was not clicked."""

    def __init__(self, capacity: int = 64, rng: Optional[np.random.Generator] = None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.records: dict[int, NegativeContext] = {}
        self.next_id = 0
        self.slots = np.full((0, capacity), -1, dtype=np.int64)
        self.sizes = np.zeros(0, dtype=np.int64)
        self.seen = np.zeros(0, dtype=np.int64)
        self._since_gc = 0

    def ensure_apps(self, n_apps: int):
        n = len(self.sizes)
        if n_apps <= n:
            return
        grow = max(n_apps, 2 * n)
        slots = np.full((grow, self.capacity), -1, dtype=np.int64)
        slots[:n] = self.slots[:n]
        self.slots = slots
        self.sizes = np.concatenate([self.sizes, np.zeros(grow - n, dtype=np.int64)])
        self.seen = np.concatenate([self.seen, np.zeros(grow - n, dtype=np.int64)])

    def add(self, record: NegativeContext) -> int:
        rid = self.next_id
        self.next_id += 1
        self.records[rid] = record
        return rid

    def offer(self, rid: int, n_apps: int, exclude: Optional[int] = None):
        """Offer record ``rid`` to every app in ``range(n_apps)`` except ``exclude``."""
        self.ensure_apps(n_apps)
        apps = np.arange(n_apps)
        if exclude is not None:
            apps = apps[apps != exclude]
        if len(apps) == 0:
            return
        self.seen[apps] += 1
        room = self.sizes[apps] < self.capacity
        not_full = apps[room]
        self.slots[not_full, self.sizes[not_full]] = rid
        self.sizes[not_full] += 1
        full = apps[~room]
        if len(full):
            j = np.floor(self.rng.random(len(full)) * self.seen[full]).astype(np.int64)
            hit = j < self.capacity
            self.slots[full[hit], j[hit]] = rid
        self._since_gc += 1
        if self._since_gc >= 256:
            self._gc()

    def _gc(self):
        self._since_gc = 0
        live = set(np.unique(self.slots[self.slots >= 0]).tolist())
        for rid in [r for r in self.records if r not in live]:
            del self.records[rid]

    def size(self, a: int) -> int:
        return int(self.sizes[a]) if a < len(self.sizes) else 0

    def contents(self, a: int) -> list[int]:
        return [int(x) for x in self.slots[a, : self.size(a)]] if a < len(self.sizes) else []

    def sample(self, a: int) -> Optional[NegativeContext]:
        n = self.size(a)
        if n == 0:
            return None
        return self.records[int(self.slots[a, int(self.rng.integers(n))])]

    def to_dict(self) -> dict:
        self._gc()
        n = len(self.sizes)
        return {
            "capacity": self.capacity,
            "next_id": self.next_id,
            "since_gc": self._since_gc,
            "slots": self.slots[:n].tolist(),
            "sizes": self.sizes.tolist(),
            "seen": self.seen.tolist(),
            "records": {str(r): [base64.b64encode(rec.psi.tobytes()).decode("ascii"),
                                 base64.b64encode(rec.phi.tobytes()).decode("ascii"), rec.phi.shape[0]]
                        for r, rec in self.records.items()},
        }

    @classmethod
    def from_dict(cls, d: dict, rng: np.random.Generator) -> "NegativeStore":
        s = cls(d["capacity"], rng)
        s.next_id = d["next_id"]
        s._since_gc = d["since_gc"]
        s.slots = np.array(d["slots"], dtype=np.int64).reshape(-1, s.capacity)
        s.sizes = np.array(d["sizes"], dtype=np.int64)
        s.seen = np.array(d["seen"], dtype=np.int64)
        for r, (psi, phi, rows) in d["records"].items():
            s.records[int(r)] = NegativeContext(
                np.frombuffer(base64.b64decode(psi), dtype=float).copy(),
                np.frombuffer(base64.b64decode(phi), dtype=float).copy().reshape(rows, PHI_DIM),
            )
        return s


def _rng_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# --- AUC-PA ------------------------------------------------------------------


@dataclass
class Observation:
    """Features of one context against every registered app (pre-click)."""

    psi: np.ndarray
    phi: np.ndarray
    scale: np.ndarray
    frecency: np.ndarray
    location: LocationState


@dataclass
class RoundPair:
    """What the regret-bound check needs to re-score one round under any weights."""

    app: int
    psi_pos: np.ndarray
    phi_pos: np.ndarray
    negative: NegativeContext
    n_apps: int
    scope: np.ndarray


def pair_loss(pair: RoundPair, w: np.ndarray, W: np.ndarray) -> float:
    """Hinge loss of weights ``(w, W)`` on a stored round, max over the round's app scope."""
    a = pair.app
    s_pos = joint_scale(pair.phi_pos[None, :], pair.psi_pos)[0]
    f_pos = s_pos * (pair.phi_pos @ w + (W[a] @ pair.psi_pos if a < len(W) else 0.0))
    phi = pair.negative.phi_for(pair.n_apps)[pair.scope]
    s_neg = joint_scale(phi, pair.negative.psi)
    rows = np.zeros((len(pair.scope), PSI_DIM))
    ok = pair.scope < len(W)
    rows[ok] = W[pair.scope[ok]]
    f_neg = s_neg * (phi @ w + rows @ pair.negative.psi)
    return hinge_loss(float(f_pos), float(np.max(f_neg)))


class AucPAPredictor(Predictor):
    """Online pairwise AUC maximizer with the passive-aggressive step.

    Score: ``f(x, a) = s(x, a) * (w . phi(x, a) + w_a . psi(x))`` where
    ``s`` caps the stacked feature vector at norm 1/sqrt(2).
    """

    name = "aucpa"
    learns_auc = True

    def __init__(self, C: Optional[float] = None, lam: Optional[float] = None, seed: int = 0,
                 negative_capacity: int = 64, negative_scope: str = "installed",
                 time_cap: int = TIME_CAP, location_cap: int = LOCATION_CAP,
                 weekend_days: Sequence[int] = WEEKEND_DAYS["default"], hash_seed: int = HASH_SEED,
                 tie_p: float = 0.1, tie_t_days: float = 60.0, store_pairs: bool = False):
        if C is not None and lam is not None:
            raise ValueError("give exactly one of C and lambda")
        self.lam = float(lam) if lam is not None else 1.0 / float(0.02 if C is None else C)
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be positive and finite")
        if negative_scope not in ("installed", "candidates"):
            raise ValueError("negative_scope must be 'installed' or 'candidates'")
        self.seed = seed
        self.negative_scope = negative_scope
        self.weekend_days = tuple(weekend_days)
        self.hash_seed = hash_seed
        self.tie_p = tie_p
        self.tie_t_days = tie_t_days
        self.store_pairs = store_pairs
        self.registry = AppRegistry()
        self.w = np.zeros(PHI_DIM)
        self.W = np.zeros((16, PSI_DIM))
        self.history = AppHistory(time_cap=time_cap, location_cap=location_cap)
        self.locations = KnownLocationStore()
        self.rng = np.random.default_rng(seed)
        self.negatives = NegativeStore(negative_capacity, self.rng)
        self.round = 0
        self._cache: Optional[tuple] = None

    @property
    def C(self) -> float:
        return 1.0 / self.lam

    @property
    def n_apps(self) -> int:
        return len(self.registry)

    def _weights_rows(self, n: int) -> np.ndarray:
        if len(self.W) < n:
            grown = np.zeros((max(n, 2 * len(self.W)), PSI_DIM))
            grown[: len(self.W)] = self.W
            self.W = grown
        return self.W[:n]

    def w_a(self, app: str) -> np.ndarray:
        i = self.registry.index.get(app)
        return np.zeros(PSI_DIM) if i is None else self.W[i].copy()

    def observation(self, ctx: ContextSnapshot) -> Observation:
        key = (id(ctx), self.round)
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        n = self.n_apps
        now = ctx.ts.seconds
        location = self.locations.peek(ctx.geo, now)
        top5 = frecent_top5(self.history.frecency_scores(now, n, FRECENT_P, FRECENT_T_DAYS))
        psi = contextual_features(ctx, location, top5, self.weekend_days, self.hash_seed)
        phi = self.history.app_features(ctx.ts, ctx.geo, n)
        obs = Observation(
            psi=psi,
            phi=phi,
            scale=joint_scale(phi, psi),
            frecency=self.history.frecency_scores(now, n, self.tie_p, self.tie_t_days),
            location=location,
        )
        self._cache = (key, obs)
        return obs

    def scores(self, obs: Observation) -> np.ndarray:
        n = len(obs.phi)
        W = self.W[:n] if len(self.W) >= n else self._weights_rows(n)
        return obs.scale * (obs.phi @ self.w + W @ obs.psi)

    def score(self, ctx: ContextSnapshot, app: str) -> float:
        obs = self.observation(ctx)
        i = self.registry.index.get(app)
        if i is None:
            return 0.0
        return float(self.scores(obs)[i])

    def predict(self, ctx, k, candidates=None):
        obs = self.observation(ctx)
        idx = self._candidate_indices(self.registry, candidates)
        return predict_top_k(self.scores(obs), obs.frecency, self.registry.names, idx, k)

    def _negative_scores(self, neg: NegativeContext, n: int) -> np.ndarray:
        phi = neg.phi_for(n)
        return joint_scale(phi, neg.psi) * (phi @ self.w + self._weights_rows(n) @ neg.psi)

    def observe(self, click: ClickEvent) -> UpdateReport:
        ctx = click.ctx
        obs = self.observation(ctx)
        a = self.registry.observe_slot(click)
        n = self.n_apps
        self._weights_rows(n)
        phi = obs.phi
        if phi.shape[0] < n:
            phi = np.vstack([phi, np.zeros((n - phi.shape[0], PHI_DIM))])
        report = UpdateReport()
        if click.is_home:
            report.skipped = True
            report.reason = "home"
        else:
            report = self._learn(a, obs.psi, phi, n)

        self.history.append(a, ctx.ts, ctx.geo)
        self.locations.update(ctx.geo, ctx.ts.seconds)
        rid = self.negatives.add(NegativeContext(obs.psi, phi))
        self.negatives.offer(rid, n, exclude=a)
        self.round += 1
        self._cache = None
        return report

    def _learn(self, a: int, psi: np.ndarray, phi: np.ndarray, n: int) -> UpdateReport:
        neg = self.negatives.sample(a)
        if neg is None:
            return UpdateReport(skipped=True, reason="no-negatives")
        if self.negative_scope == "installed":
            scope = np.arange(n)
        else:
            scope = self.registry.candidates()
        neg_all = self._negative_scores(neg, n)
        neg_scores = neg_all[scope]
        b = int(scope[int(np.argmax(neg_scores))])
        f_neg = float(neg_all[b])

        phi_pos = phi[a]
        s_pos = float(joint_scale(phi_pos[None, :], psi)[0])
        f_pos = s_pos * float(phi_pos @ self.w + self.W[a] @ psi)
        auc = int(f_pos > float(neg_all[a]))
        loss = hinge_loss(f_pos, f_neg)

        neg_phi_b = neg.phi_for(n)[b]
        s_neg = float(joint_scale(neg_phi_b[None, :], neg.psi)[0])
        d_w = s_pos * phi_pos - s_neg * neg_phi_b
        pos_psi = s_pos * psi
        neg_psi = s_neg * neg.psi
        if a == b:
            d_same = pos_psi - neg_psi
            dsq = float(d_w @ d_w + d_same @ d_same)
        else:
            dsq = float(d_w @ d_w + pos_psi @ pos_psi + neg_psi @ neg_psi)

        pair = None
        if self.store_pairs:
            pair = RoundPair(a, psi, phi_pos.copy(), neg, n, scope.copy())
        report = UpdateReport(loss=loss, negative_app=self.registry.names[b], auc_indicator=auc, pair=pair)
        if loss == 0.0:
            return report
        if dsq == 0.0:
            report.skipped = True
            report.reason = "degenerate"
            return report
        tau = compute_tau(loss, dsq, self.lam)
        self.w += tau * d_w
        if a == b:
            self.W[a] += tau * d_same
        else:
            self.W[a] += tau * pos_psi
            self.W[b] -= tau * neg_psi
        report.tau = tau
        return report

    @property
    def theta(self) -> tuple[np.ndarray, np.ndarray]:
        return self.w.copy(), self.W[: self.n_apps].copy()

    def to_dict(self) -> dict:
        return {
            "algo": self.name,
            "version": SNAPSHOT_VERSION,
            "lambda": self.lam,
            "C": self.C,
            "hash_seed": self.hash_seed,
            "seed": self.seed,
            "negative_scope": self.negative_scope,
            "weekend_days": list(self.weekend_days),
            "tie_p": self.tie_p,
            "tie_t_days": self.tie_t_days,
            "w": self.w.tolist(),
            "w_a": {name: self.W[i].tolist() for i, name in enumerate(self.registry.names)},
            "registry": self.registry.to_dict(),
            "reservoirs": self.negatives.to_dict(),
            "histories": self.history.to_dict(),
            "locations": self.locations.to_dict(),
            "rng": _rng_to_json(self.rng),
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AucPAPredictor":
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('version')!r}")
        p = cls(lam=d["lambda"], seed=d["seed"], negative_scope=d["negative_scope"],
                weekend_days=d["weekend_days"], hash_seed=d["hash_seed"],
                tie_p=d["tie_p"], tie_t_days=d["tie_t_days"])
        p.registry = AppRegistry.from_dict(d["registry"])
        p.w = np.array(d["w"], dtype=float)
        n = len(p.registry)
        p.W = np.zeros((max(16, n), PSI_DIM))
        for i, name in enumerate(p.registry.names):
            p.W[i] = d["w_a"][name]
        p.history = AppHistory.from_dict(d["histories"])
        p.locations = KnownLocationStore.from_dict(d["locations"])
        p.rng = _rng_from_json(d["rng"])
        p.negatives = NegativeStore.from_dict(d["reservoirs"], p.rng)
        p.round = d["round"]
        return p


ALGORITHMS = {"kmfu": KMFUPredictor, "frecency": FrecencyPredictor, "aucpa": AucPAPredictor}


def predictor_from_dict(d: dict) -> Predictor:
    return ALGORITHMS[d["algo"]].from_dict(d)
