"""Closure-simulation indicators and the composite bridge score.

Every path-based indicator compares distances on the open network with
distances under a :class:`ClosureMask`.  Distances are computed from the
facility side (bus stops, hospitals, parks, highway nodes) because the graph
is undirected, and a masked rerun is only needed when the mask hits an edge
that lies on that source's shortest-path tree.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import IndicatorParams, WeightVector
from .hetgraph import ClosureMask, HeteroGraph, connected_components, dijkstra, make_closure_mask
from .ingest import FOOD_DAILY_SHOPS
from .spatial import build_index, unproject

log = logging.getLogger(__name__)

INF = math.inf
SCORE_COLUMNS = ("transit_desert", "hospital_access", "isolation_risk", "supply_chain", "green_space")
CSV_HEADER = ("bridge_id", "name", "lat", "lon", *SCORE_COLUMNS, "composite", "snap_failed")
_TIGHT_EPS = 1e-9


def _knn_lists(points: np.ndarray, queries: np.ndarray, k: int) -> list[list[int]]:
    if len(points) == 0:
        return [[] for _ in range(len(queries))]
    idx = build_index(points)
    return [[i for i, _ in idx.knn(q, k)] for q in queries]


class ScoringContext:
    """Per-graph precomputation shared by every bridge.

    Open-network distance arrays are computed lazily per source node and
    kept; masked arrays are cached only for the most recent mask.
    """

    def __init__(self, h: HeteroGraph, p: IndicatorParams):
        self.h = h
        self.p = p
        g = h.routing
        self.cap = 10.0 * p.transit.impact_radius

        res = h.residences
        self.res_node = np.array([r.node for r in res], dtype=np.int64)
        self.res_xy = np.array([r.xy for r in res], dtype=float).reshape(-1, 2)
        self.res_pop = np.array([r.record.population_estimate for r in res], dtype=float)
        self.res_elev = np.array([np.nan if r.record.elevation_m is None else r.record.elevation_m
                                  for r in res], dtype=float)
        self.res_index = build_index(self.res_xy)
        self.total_pop = float(self.res_pop.sum())

        def fac(cat):
            fs = h.facilities_of(cat)
            return fs, np.array([f.xy for f in fs], dtype=float).reshape(-1, 2)

        self.bus, bus_xy = fac("bus_stop")
        self.hosp, hosp_xy = fac("hospital")
        self.parks, park_xy = fac("park")
        self.shops, shop_xy = fac("shop")
        self.shop_xy = shop_xy
        self.shop_index = build_index(shop_xy)
        self.shop_weight = np.array(
            [p.supply.food_weight if s.record.subcategory in FOOD_DAILY_SHOPS else p.supply.base_weight
             for s in self.shops], dtype=float)
        self.shop_node = np.array([s.node for s in self.shops], dtype=np.int64)

        # facility sets are chosen by straight-line rank so they never depend on the mask
        self.res_bus = [[self.bus[j].node for j in row]
                        for row in _knn_lists(bus_xy, self.res_xy, p.transit.k_bus)]
        self.res_hosp = [[self.hosp[j].node for j in row]
                         for row in _knn_lists(hosp_xy, self.res_xy, p.hospital.k_hosp)]
        self.res_park = [[self.parks[j].node for j in row]
                         for row in _knn_lists(park_xy, self.res_xy, p.green.k_park)]
        st = h.streets
        hw_nodes = np.flatnonzero(st.node_is_highway)
        self.shop_hw = [[int(hw_nodes[j]) for j in row]
                        for row in _knn_lists(st.xy[hw_nodes], shop_xy, p.supply.k_highway)]

        # urban core: low street nodes of the largest open component
        comp = connected_components(g)
        street_comp = comp[: st.n]
        self.core: set[int] = set()
        if st.n:
            sizes = np.bincount(comp)
            big = int(np.argmax(sizes))
            low = np.isfinite(h.node_elevation) & (h.node_elevation < p.isolation.elev_threshold)
            self.core = set(np.flatnonzero((street_comp == big) & low).tolist())
        self.nodata_residences = int(np.isnan(self.res_elev).sum())

        self._open: dict[int, list[float]] = {}
        self._mask_key: frozenset[int] | None = None
        self._masked: dict[int, list[float]] = {}

    # -- distances -------------------------------------------------------

    def open_dist(self, src: int) -> list[float]:
        d = self._open.get(src)
        if d is None:
            d = dijkstra(self.h.routing, src)
            self._open[src] = d
        return d

    def masked_dist(self, src: int, mask: ClosureMask) -> list[float]:
        blocked = mask.blocked_edges
        if not blocked:
            return self.open_dist(src)
        if blocked != self._mask_key:
            self._mask_key = blocked
            self._masked = {}
        d = self._masked.get(src)
        if d is not None:
            return d
        base = self.open_dist(src)
        g = self.h.routing
        tight = False
        for e in blocked:
            a, b, w = int(g.u[e]), int(g.v[e]), float(g.length[e])
            da, db = base[a], base[b]
            if da == INF and db == INF:
                continue
            if da + w <= db + _TIGHT_EPS or db + w <= da + _TIGHT_EPS:
                tight = True
                break
        d = dijkstra(g, src, blocked=blocked) if tight else base
        self._masked[src] = d
        return d

    def capped(self, d: float) -> float:
        return d if d < self.cap else self.cap

    def delta(self, src: int, node: int, mask: ClosureMask) -> float:
        """Non-negative detour from ``node`` to ``src`` caused by ``mask``."""
        before = self.capped(self.open_dist(src)[node])
        after = self.capped(self.masked_dist(src, mask)[node])
        return max(0.0, after - before)

    def residences_near(self, xy, radius: float) -> list[int]:
        if len(self.res_xy) == 0:
            return []
        return self.res_index.radius(xy, radius)


def scoring_context(h: HeteroGraph, p: IndicatorParams) -> ScoringContext:
    key = ("scoring", p)
    ctx = h._cache.get(key)
    if ctx is None:
        ctx = h._cache[key] = ScoringContext(h, p)
    return ctx


def _resolve(h, b, p, mask):
    ctx = scoring_context(h, p)
    bridge = h.bridge(b)
    if mask is None:
        mask = make_closure_mask(h, b)
    return ctx, bridge, mask


def _clamp(s: float) -> float:
    return min(100.0, max(0.0, s))


def transit_sample(ctx: ScoringContext, bridge, seed: int) -> list[int]:
    p = ctx.p.transit
    near = ctx.residences_near(bridge.xy, p.impact_radius)
    if len(near) <= p.sample_cap:
        return near
    rng = np.random.default_rng((seed ^ bridge.id) & 0xFFFFFFFFFFFFFFFF)
    pick = rng.choice(len(near), size=p.sample_cap, replace=False)
    return sorted(near[i] for i in pick)


def transit_desert_score(h: HeteroGraph, b: int, p: IndicatorParams, seed: int = 0,
                         mask: ClosureMask | None = None, warnings: list | None = None) -> float:
    """Share of sampled residences whose nearest-bus-stop trip grows by more than theta."""
    ctx, bridge, mask = _resolve(h, b, p, mask)
    if not ctx.bus:
        _warn(warnings, "no bus stops in graph")
        return 0.0
    affected = 0
    for r in transit_sample(ctx, bridge, seed):
        node = int(ctx.res_node[r])
        stops = ctx.res_bus[r]
        d_pre = min(ctx.open_dist(s)[node] for s in stops)
        if d_pre == INF:
            continue
        d_post = min(ctx.masked_dist(s, mask)[node] for s in stops)
        if d_post == INF or d_post - d_pre > p.transit.theta:
            affected += 1
    return _clamp(affected / p.transit.n_norm * 100.0)


def hospital_access_score(h: HeteroGraph, b: int, p: IndicatorParams,
                          mask: ClosureMask | None = None, warnings: list | None = None) -> float:
    ctx, bridge, mask = _resolve(h, b, p, mask)
    if not ctx.hosp:
        _warn(warnings, "no hospitals in graph")
        return 0.0
    n_res = len(ctx.res_node)
    if n_res == 0:
        return 0.0
    total = 0.0
    for r in ctx.residences_near(bridge.xy, p.hospital.influence_radius):
        node = int(ctx.res_node[r])
        total += sum(ctx.delta(s, node, mask) / j for j, s in enumerate(ctx.res_hosp[r], start=1))
    return _clamp(total / (n_res * p.hospital.d_norm) * 100.0)


def isolation_risk_score(h: HeteroGraph, b: int, p: IndicatorParams,
                         mask: ClosureMask | None = None, warnings: list | None = None) -> float:
    """Population share of high residences cut off from the low urban core."""
    ctx, bridge, mask = _resolve(h, b, p, mask)
    if ctx.total_pop <= 0 or not mask.blocked_edges:
        return 0.0
    if not ctx.core:
        _warn(warnings, "empty urban core")
        return 0.0
    thr = p.isolation.elev_threshold
    rural = [r for r in ctx.residences_near(bridge.xy, p.isolation.radius)
             if np.isfinite(ctx.res_elev[r]) and ctx.res_elev[r] >= thr]
    if not rural:
        return 0.0
    comp = connected_components(h.routing, mask)
    core_comps = {int(comp[u]) for u in ctx.core}
    isolated = sum(ctx.res_pop[r] for r in rural if int(comp[ctx.res_node[r]]) not in core_comps)
    return _clamp(isolated / ctx.total_pop * 100.0)


def supply_chain_score(h: HeteroGraph, b: int, p: IndicatorParams,
                       mask: ClosureMask | None = None, warnings: list | None = None) -> float:
    ctx, bridge, mask = _resolve(h, b, p, mask)
    if not h.streets.node_is_highway.any():
        _warn(warnings, "no highway nodes in graph")
        return 0.0
    n_shops = len(ctx.shops)
    if n_shops == 0:
        return 0.0
    total = 0.0
    for s in ctx.shop_index.radius(bridge.xy, p.supply.influence_radius):
        node = int(ctx.shop_node[s])
        total += ctx.shop_weight[s] * sum(ctx.delta(t, node, mask) for t in ctx.shop_hw[s])
    return _clamp(total / (n_shops * p.supply.d_norm) * 100.0)


def green_space_score(h: HeteroGraph, b: int, p: IndicatorParams,
                      mask: ClosureMask | None = None, warnings: list | None = None) -> float:
    ctx, bridge, mask = _resolve(h, b, p, mask)
    if not ctx.parks:
        _warn(warnings, "no parks in graph")
        return 0.0
    n_res = len(ctx.res_node)
    if n_res == 0:
        return 0.0
    total = 0.0
    for r in range(n_res):
        node = int(ctx.res_node[r])
        total += sum(ctx.delta(s, node, mask) / j for j, s in enumerate(ctx.res_park[r], start=1))
    return _clamp(total / (n_res * p.green.d_norm) * 100.0)


def composite_score(scores, w: WeightVector) -> float:
    return float(sum(a * s for a, s in zip(w.as_tuple(), scores)))


def _warn(sink, msg):
    if sink is not None:
        sink.append(msg)
    log.debug(msg)


@dataclass
class ScoreCard:
    bridge_id: int
    name: str
    lat: float
    lon: float
    transit_desert: float = 0.0
    hospital_access: float = 0.0
    isolation_risk: float = 0.0
    supply_chain: float = 0.0
    green_space: float = 0.0
    composite: float = 0.0
    snap_failed: bool = False
    warnings: list[str] = field(default_factory=list)

    def scores(self) -> tuple[float, ...]:
        return tuple(getattr(self, c) for c in SCORE_COLUMNS)


@dataclass
class TimingReport:
    seconds: dict[str, float]
    n_bridges: int
    n_snap_failed: int

    @property
    def total(self) -> float:
        return sum(self.seconds.values())


def score_bridge(h: HeteroGraph, b: int, p: IndicatorParams, w: WeightVector, seed: int = 0,
                 timing: dict[str, float] | None = None) -> ScoreCard:
    bridge = h.bridge(b)
    rec = bridge.record
    card = ScoreCard(rec.osm_id, rec.name, rec.centroid.lat, rec.centroid.lon)
    if bridge.snap_failed:
        card.snap_failed = True
        return card
    mask = make_closure_mask(h, b)
    timing = timing if timing is not None else {}
    steps: list[tuple[str, Callable[[], float]]] = [
        ("transit_desert", lambda: transit_desert_score(h, b, p, seed, mask, card.warnings)),
        ("hospital_access", lambda: hospital_access_score(h, b, p, mask, card.warnings)),
        ("isolation_risk", lambda: isolation_risk_score(h, b, p, mask, card.warnings)),
        ("supply_chain", lambda: supply_chain_score(h, b, p, mask, card.warnings)),
        ("green_space", lambda: green_space_score(h, b, p, mask, card.warnings)),
    ]
    for name, fn in steps:
        t0 = time.perf_counter()
        setattr(card, name, fn())
        timing[name] = timing.get(name, 0.0) + time.perf_counter() - t0
    card.composite = _clamp(composite_score(card.scores(), w))
    return card


def score_all(h: HeteroGraph, params: IndicatorParams, weights: WeightVector,
              seed: int = 0) -> tuple[list[ScoreCard], TimingReport]:
    """Score every bridge serially; per-indicator wall time is accumulated."""
    timing = {c: 0.0 for c in SCORE_COLUMNS}
    t0 = time.perf_counter()
    scoring_context(h, params)
    timing["setup"] = time.perf_counter() - t0
    cards = [score_bridge(h, br.id, params, weights, seed, timing) for br in h.bridges]
    failed = sum(c.snap_failed for c in cards)
    for c in cards:
        for msg in sorted(set(c.warnings)):
            log.warning("bridge %d: %s", c.bridge_id, msg)
    return cards, TimingReport(timing, len(cards), failed)


def write_scores_csv(cards: list[ScoreCard], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER)
        for c in cards:
            wr.writerow([c.bridge_id, c.name, f"{c.lat:.7f}", f"{c.lon:.7f}",
                         *(f"{s:.4f}" for s in c.scores()), f"{c.composite:.4f}",
                         "true" if c.snap_failed else "false"])


def read_scores_csv(path) -> list[ScoreCard]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ScoreCard(
                int(row["bridge_id"]), row["name"], float(row["lat"]), float(row["lon"]),
                *(float(row[c]) for c in SCORE_COLUMNS), float(row["composite"]),
                row["snap_failed"] == "true"))
    return out
