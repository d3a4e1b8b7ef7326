"""Street network, bridge snapping and the graph primitives used by closure
simulation: masked Dijkstra, connected components and Brandes betweenness.

Node indices are dense integers.  In a :class:`HeteroGraph` the routing graph
holds every street node first, then one node per bridge; its edge list holds
every street edge first, then the bridge snap edges.  A :class:`ClosureMask`
is a set of routing-edge indices treated as absent, so the shared graph is
never mutated.
"""
from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import BridgeRecord, BuildingRecord, ElevationRaster, FacilityRecord, RawOsmElement
from .ingest import sample_elevation
from .spatial import GeoCoord, PlanarCoord, ProjectionParams, SpatialIndex, build_index, project

log = logging.getLogger(__name__)

INF = math.inf
HIGHWAY_NODE_CLASSES = frozenset({"primary", "trunk"})


class Graph:
    """Undirected weighted graph with per-edge indices for masking."""

    def __init__(self, n: int, u: Sequence[int], v: Sequence[int], length: Sequence[float]):
        self.n = int(n)
        self.u = np.asarray(u, dtype=np.int64)
        self.v = np.asarray(v, dtype=np.int64)
        self.length = np.asarray(length, dtype=float)
        if not (len(self.u) == len(self.v) == len(self.length)):
            raise ValueError("edge arrays differ in length")
        adj: list[list[tuple[int, float, int]]] = [[] for _ in range(self.n)]
        for e, (a, b, w) in enumerate(zip(self.u.tolist(), self.v.tolist(), self.length.tolist())):
            if a == b:
                raise ValueError(f"self-loop on node {a}")
            if w < 0:
                raise ValueError(f"negative edge length {w}")
            adj[a].append((b, w, e))
            adj[b].append((a, w, e))
        self.adj = adj

    @property
    def n_edges(self) -> int:
        return len(self.length)

    def neighbors(self, i: int) -> list[int]:
        return sorted({b for b, _, _ in self.adj[i]})

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))


class StreetGraph(Graph):
    def __init__(self, node_ids, xy, u, v, length, way_ids, edge_highway, node_is_highway,
                 degenerate_ways: int = 0):
        super().__init__(len(node_ids), u, v, length)
        if np.any(self.length <= 0):
            raise ValueError("street edge lengths must be > 0")
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.way_ids = np.asarray(way_ids, dtype=np.int64)
        self.edge_highway = tuple(edge_highway)
        self.node_is_highway = np.asarray(node_is_highway, dtype=bool)
        self.degenerate_ways = degenerate_ways
        self.index_of = {int(k): i for i, k in enumerate(self.node_ids.tolist())}

    @classmethod
    def from_edges(cls, xy, edges: Iterable[tuple[int, int, float, int]],
                   highway_nodes: Iterable[int] = (), node_ids=None) -> "StreetGraph":
        """Build directly from ``(u, v, length, way_id)`` tuples (fixtures, dumps)."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        edges = list(edges)
        flags = np.zeros(len(xy), dtype=bool)
        flags[list(highway_nodes)] = True
        ids = np.arange(len(xy)) if node_ids is None else node_ids
        return cls(ids, xy, [e[0] for e in edges], [e[1] for e in edges],
                   [e[2] for e in edges], [e[3] for e in edges], [""] * len(edges), flags)


def build_street_graph(elements: Iterable[RawOsmElement], proj: ProjectionParams) -> StreetGraph:
    """One vertex per OSM node on a highway way, one edge per consecutive node pair.

    Parallel edges between the same node pair collapse to the shortest one.
    """
    coords: dict[int, PlanarCoord] = {}
    best: dict[tuple[int, int], tuple[float, int, str]] = {}
    highway_nodes: set[int] = set()
    degenerate = 0
    for el in elements:
        if el.kind != "way" or "highway" not in el.tags:
            continue
        if len(el.nodes) != len(el.geometry):
            degenerate += 1
            continue
        if len(set(el.geometry)) < 2:
            degenerate += 1
            continue
        hw = el.tags["highway"]
        pts = [project(g, proj) for g in el.geometry]
        for ref, p in zip(el.nodes, pts):
            coords.setdefault(ref, p)
            if hw in HIGHWAY_NODE_CLASSES:
                highway_nodes.add(ref)
        for (a, pa), (b, pb) in zip(zip(el.nodes, pts), zip(el.nodes[1:], pts[1:])):
            if a == b:
                continue
            w = math.hypot(pb.x - pa.x, pb.y - pa.y)
            if w <= 0:
                continue
            key = (min(a, b), max(a, b))
            if key not in best or w < best[key][0]:
                best[key] = (w, el.id, hw)
    if degenerate:
        log.warning("skipped %d degenerate highway ways", degenerate)
    used = sorted({r for k in best for r in k})
    index = {r: i for i, r in enumerate(used)}
    keys = sorted(best, key=lambda k: (index[k[0]], index[k[1]]))
    xy = np.array([(coords[r].x, coords[r].y) for r in used], dtype=float).reshape(-1, 2)
    return StreetGraph(
        used, xy,
        [index[a] for a, _ in keys], [index[b] for _, b in keys],
        [best[k][0] for k in keys], [best[k][1] for k in keys], [best[k][2] for k in keys],
        [r in highway_nodes for r in used], degenerate,
    )


# ---------------------------------------------------------------------------
# shortest paths and components


@dataclass(frozen=True)
class ClosureMask:
    closed_bridge: int | None
    blocked_edges: frozenset[int] = frozenset()

    def __or__(self, other: "ClosureMask") -> "ClosureMask":
        return ClosureMask(self.closed_bridge, self.blocked_edges | other.blocked_edges)


EMPTY_MASK = ClosureMask(None, frozenset())


def dijkstra(g: Graph, source: int, targets: Iterable[int] | None = None,
             blocked: frozenset[int] | set[int] = frozenset()) -> list[float]:
    """Distances from ``source``; exact for settled nodes.

    With ``targets`` the search stops once all of them are settled, so only
    their entries (and nodes settled before them) are final.
    """
    n = g.n
    dist = [INF] * n
    done = [False] * n
    dist[source] = 0.0
    remaining = None if targets is None else set(targets)
    if remaining is not None:
        remaining.discard(source)
        if not remaining:
            return dist
    heap = [(0.0, source)]
    adj = g.adj
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        d, a = pop(heap)
        if done[a]:
            continue
        done[a] = True
        if remaining is not None:
            remaining.discard(a)
            if not remaining:
                break
        for b, w, e in adj[a]:
            if blocked and e in blocked:
                continue
            nd = d + w
            if nd < dist[b]:
                dist[b] = nd
                push(heap, (nd, b))
    return dist


def shortest_path(g: Graph, source: int, targets: Iterable[int],
                  mask: ClosureMask | None = None) -> dict[int, float]:
    """Network distance from ``source`` to each target (``inf`` if unreachable)."""
    targets = list(targets)
    blocked = mask.blocked_edges if mask is not None else frozenset()
    dist = dijkstra(g, source, targets, blocked)
    return {t: dist[t] for t in targets}


def connected_components(g: Graph, mask: ClosureMask | None = None) -> np.ndarray:
    """Component id per node; ids are ordered by each component's smallest node."""
    blocked = mask.blocked_edges if mask is not None else frozenset()
    comp = np.full(g.n, -1, dtype=np.int64)
    label = 0
    adj = g.adj
    for start in range(g.n):
        if comp[start] >= 0:
            continue
        comp[start] = label
        queue = deque([start])
        while queue:
            a = queue.popleft()
            for b, _, e in adj[a]:
                if comp[b] < 0 and not (blocked and e in blocked):
                    comp[b] = label
                    queue.append(b)
        label += 1
    return comp


def betweenness(g: Graph, sample_sources: int | None = None, seed: int = 0) -> np.ndarray:
    """Length-weighted Brandes betweenness, normalised to [0, 1].

    With fewer sampled sources than nodes the accumulated dependencies are
    rescaled by ``n / sample_sources`` before normalisation.
    """
    n = g.n
    out = np.zeros(n)
    if n < 3:
        return out
    if sample_sources is None or sample_sources >= n:
        sources = list(range(n))
    else:
        if sample_sources < 1:
            raise ValueError("sample_sources must be >= 1")
        rng = np.random.default_rng(seed)
        sources = sorted(rng.choice(n, size=sample_sources, replace=False).tolist())
    adj = g.adj
    for s in sources:
        stack = []
        preds: list[list[int]] = [[] for _ in range(n)]
        sigma = [0.0] * n
        dist = [INF] * n
        sigma[s] = 1.0
        dist[s] = 0.0
        heap = [(0.0, s, s)]
        settled = [False] * n
        while heap:
            d, a, p = heapq.heappop(heap)
            if settled[a]:
                continue
            settled[a] = True
            stack.append(a)
            for b, w, _ in adj[a]:
                nd = d + w
                if nd < dist[b]:
                    dist[b] = nd
                    sigma[b] = sigma[a]
                    preds[b] = [a]
                    heapq.heappush(heap, (nd, b, a))
                elif nd == dist[b] and not settled[b]:
                    sigma[b] += sigma[a]
                    preds[b].append(a)
        delta = [0.0] * n
        while stack:
            b = stack.pop()
            for a in preds[b]:
                delta[a] += sigma[a] / sigma[b] * (1.0 + delta[b])
            if b != s:
                out[b] += delta[b]
    out *= n / len(sources)
    # each unordered pair is seen from both ends
    out /= (n - 1) * (n - 2)
    return out


def two_hop_count(g: Graph, i: int) -> int:
    seen = {i}
    frontier = {i}
    for _ in range(2):
        nxt = set()
        for a in frontier:
            nxt.update(b for b, _, _ in g.adj[a])
        nxt -= seen
        seen |= nxt
        frontier = nxt
    return len(seen) - 1


def clustering_coefficient(g: Graph, i: int) -> float:
    nb = g.neighbors(i)
    k = len(nb)
    if k < 2:
        return 0.0
    nbset = set(nb)
    links = sum(1 for a in nb for b in g.neighbors(a) if b in nbset and b > a)
    return 2.0 * links / (k * (k - 1))


# ---------------------------------------------------------------------------
# heterogeneous graph


@dataclass
class PlacedBridge:
    record: BridgeRecord
    xy: np.ndarray
    node: int  # routing-graph node index
    snaps: list[tuple[int, float]] = field(default_factory=list)  # (street node, metres)
    snap_edges: list[int] = field(default_factory=list)  # routing edge indices

    @property
    def id(self) -> int:
        return self.record.osm_id

    @property
    def snap_failed(self) -> bool:
        return not self.snaps


@dataclass
class PlacedFacility:
    record: FacilityRecord
    xy: np.ndarray
    node: int  # nearest street node


@dataclass
class PlacedBuilding:
    record: BuildingRecord
    xy: np.ndarray
    node: int  # nearest street node


def snap_bridges(g: StreetGraph, bridges_xy: np.ndarray, idx: SpatialIndex, k: int = 3,
                 max_distance: float = 30.0) -> tuple[list[list[tuple[int, float]]], list[int]]:
    """Each bridge links to its ``k`` nearest street nodes within ``max_distance``.

    Returns per-bridge snap lists and the positions of bridges with none.
    """
    snaps, failures = [], []
    for b, p in enumerate(np.asarray(bridges_xy, dtype=float).reshape(-1, 2)):
        hits = [(i, d) for i, d in idx.knn(p, k) if d <= max_distance]
        snaps.append(hits)
        if not hits:
            failures.append(b)
    return snaps, failures


class HeteroGraph:
    """Streets, bridges, facilities and residences sharing one routing graph."""

    def __init__(self, streets: StreetGraph, bridges: list[PlacedBridge],
                 facilities: list[PlacedFacility], buildings: list[PlacedBuilding],
                 routing: Graph, street_index: SpatialIndex,
                 node_elevation: np.ndarray, proximity_edges: dict[int, list[tuple[int, str, float]]],
                 waterways: list[np.ndarray] | None = None, projection: ProjectionParams | None = None,
                 raster: ElevationRaster | None = None):
        self.streets = streets
        self.bridges = bridges
        self.facilities = facilities
        self.buildings = buildings
        self.routing = routing
        self.street_index = street_index
        self.node_elevation = node_elevation
        self.proximity_edges = proximity_edges
        self.waterways = waterways or []
        self.projection = projection
        self.raster = raster
        self._by_id = {b.id: b for b in bridges}
        self._way_edges: dict[int, list[int]] = {}
        for e, w in enumerate(streets.way_ids.tolist()):
            self._way_edges.setdefault(w, []).append(e)
        self._cache: dict = {}

    @property
    def residences(self) -> list[PlacedBuilding]:
        return [b for b in self.buildings if b.record.is_residential]

    def bridge(self, bridge_id: int) -> PlacedBridge:
        try:
            return self._by_id[bridge_id]
        except KeyError:
            raise KeyError(f"unknown bridge id {bridge_id}") from None

    def facilities_of(self, category: str) -> list[PlacedFacility]:
        return [f for f in self.facilities if f.record.category == category]

    def way_edges(self, way_id: int) -> list[int]:
        return list(self._way_edges.get(way_id, ()))


def build_hetero_graph(streets: StreetGraph, bridges: Sequence[BridgeRecord],
                       facilities: Sequence[FacilityRecord], buildings: Sequence[BuildingRecord],
                       proj: ProjectionParams, raster: ElevationRaster | None = None,
                       snap_k: int = 3, snap_max_distance: float = 30.0,
                       waterways: Sequence[Sequence[GeoCoord]] = (),
                       facility_xy: np.ndarray | None = None,
                       building_xy: np.ndarray | None = None,
                       bridge_xy: np.ndarray | None = None) -> HeteroGraph:
    """Assemble the heterogeneous graph.

    Planar coordinates are projected from the records unless passed in
    (fixtures build graphs directly in metres).
    """
    def xy_of(records, attr, given):
        if given is not None:
            return np.asarray(given, dtype=float).reshape(-1, 2)
        pts = [project(getattr(r, attr), proj) for r in records]
        return np.array([(p.x, p.y) for p in pts], dtype=float).reshape(-1, 2)

    street_index = build_index(streets.xy)
    bxy = xy_of(bridges, "centroid", bridge_xy)
    snaps, failures = snap_bridges(streets, bxy, street_index, snap_k, snap_max_distance)
    if failures:
        log.info("%d of %d bridges failed to snap", len(failures), len(bridges))

    n_st = streets.n
    u, v, w = streets.u.tolist(), streets.v.tolist(), streets.length.tolist()
    placed = []
    for b, (rec, sn) in enumerate(zip(bridges, snaps)):
        node = n_st + b
        edges = []
        for sidx, d in sn:
            edges.append(len(u))
            u.append(node)
            v.append(sidx)
            w.append(d)
        placed.append(PlacedBridge(rec, bxy[b], node, list(sn), edges))
    routing = Graph(n_st + len(bridges), u, v, w)

    def attach(xy):
        if len(xy) == 0 or streets.n == 0:
            return []
        return [street_index.knn(p, 1)[0][0] for p in xy]

    fxy = xy_of(facilities, "location", facility_xy)
    pf = [PlacedFacility(r, p, n) for r, p, n in zip(facilities, fxy, attach(fxy))]
    gxy = xy_of(buildings, "centroid", building_xy)
    pb = [PlacedBuilding(r, p, n) for r, p, n in zip(buildings, gxy, attach(gxy))]

    elev = np.full(n_st, np.nan)
    if raster is not None:
        for i, (x, y) in enumerate(streets.xy.tolist()):
            val = sample_elevation(raster, PlanarCoord(x, y))
            if not raster.is_nodata(val):
                elev[i] = val

    proximity = _proximity_edges(placed, pf, pb)
    water = [np.array([(q.x, q.y) for q in (project(g, proj) for g in line)]) for line in waterways]
    return HeteroGraph(streets, placed, pf, pb, routing, street_index, elev, proximity,
                       water, proj, raster)


PROXIMITY_RADII = {"building": 1000.0, "hospital": 3000.0, "bus_stop": 500.0,
                   "park": 1000.0, "shop": 1000.0}


def _proximity_edges(bridges, facilities, buildings):
    out: dict[int, list[tuple[int, str, float]]] = {}
    groups = {"building": buildings}
    for cat in ("hospital", "bus_stop", "park", "shop"):
        groups[cat] = [f for f in facilities if f.record.category == cat]
    indexes = {k: (build_index(np.array([e.xy for e in ents]).reshape(-1, 2)), ents)
               for k, ents in groups.items()}
    for b in bridges:
        edges = []
        for kind, (idx, ents) in indexes.items():
            for i in idx.radius(b.xy, PROXIMITY_RADII[kind]):
                d = float(np.hypot(*(ents[i].xy - b.xy)))
                edges.append((ents[i].record.osm_id, kind, d))
        out[b.id] = edges
    return out


def make_closure_mask(h: HeteroGraph, bridge_id: int) -> ClosureMask:
    """Block the bridge's snap edges and every street edge of its own OSM way."""
    b = h.bridge(bridge_id)
    if b.snap_failed:
        return ClosureMask(bridge_id, frozenset())
    blocked = set(b.snap_edges)
    if b.record.kind == "way":
        blocked.update(h.way_edges(b.id))
    return ClosureMask(bridge_id, frozenset(blocked))


# ---------------------------------------------------------------------------
# text dump: nodes "id x y", edges "u v length_m way_id"


def dump_graph(g: StreetGraph, nodes_path, edges_path, highway_path=None) -> None:
    """Write the node and edge tables; ``highway_path`` lists ids of primary/trunk nodes."""
    if highway_path is not None:
        with open(highway_path, "w", encoding="utf-8") as fh:
            for i in g.node_ids[g.node_is_highway].tolist():
                fh.write(f"{i}\n")
    with open(nodes_path, "w", encoding="utf-8") as fh:
        for i, (x, y) in zip(g.node_ids.tolist(), g.xy.tolist()):
            fh.write(f"{i} {x:.3f} {y:.3f}\n")
    with open(edges_path, "w", encoding="utf-8") as fh:
        for a, b, w, way in zip(g.u.tolist(), g.v.tolist(), g.length.tolist(), g.way_ids.tolist()):
            fh.write(f"{g.node_ids[a]} {g.node_ids[b]} {w:.3f} {way}\n")


def load_graph(nodes_path, edges_path, highway_path=None) -> StreetGraph:
    ids, xy = [], []
    for line in Path(nodes_path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            i, x, y = line.split()
            ids.append(int(i))
            xy.append((float(x), float(y)))
    pos = {i: k for k, i in enumerate(ids)}
    edges = []
    for line in Path(edges_path).read_text(encoding="utf-8").split("\n"):
        if line.strip():
            a, b, w, way = line.split()
            edges.append((pos[int(a)], pos[int(b)], float(w), int(way)))
    highway = []
    if highway_path is not None:
        highway = [pos[int(t)] for t in Path(highway_path).read_text(encoding="utf-8").split()]
    return StreetGraph.from_edges(xy, edges, highway_nodes=highway, node_ids=ids)
