"""Bundled synthetic cities.

``generate_city`` writes a YAML config, an ASCII elevation grid and a warm
Overpass cache (one JSON body per query, under the sha256 key the pipeline
will look up).  The config points ``overpass_url`` at an unroutable address,
so the pipeline runs offline against the cache.

Layout of a city, in metres around the projection origin:

* a 21 x 21 street grid at 100 m spacing with seeded jitter and a few
  dropped blocks;
* river A between grid columns 6 and 7 and river B between rows 13 and 14,
  crossed only by short named bridge ways;
* four hill hamlets east of the grid, each reached through a single bridge;
* rail bridges, standalone bridge outlines and footbridges too far from any
  street to snap;
* hospitals, bus stops, parks, shops and residential/commercial buildings.

Both bundled cities share the generator and differ in seed, location and
terrain; their configs differ only in ``bbox``, ``projection`` and
``elevation_path``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import BBox
from .ingest import QUERIES, ElevationRaster, cache_path, write_ascii_grid, write_atomic
from .spatial import PlanarCoord, ProjectionParams, unproject

NX = NY = 21
SPACING = 100.0
RIVER_A_COL = 6  # river between columns 6 and 7
RIVER_B_ROW = 13  # river between rows 13 and 14
BRIDGE_HALF = 12.0
UNROUTABLE_OVERPASS = "http://127.0.0.1:9/api/interpreter"


@dataclass(frozen=True)
class CitySpec:
    name: str
    lat0: float
    lon0: float
    seed: int
    prefix: str
    base_elev: float
    slope: tuple[float, float]
    peak: float
    peak_at: tuple[float, float]
    peak_radius: float


CITIES = {
    "synthetic-small": CitySpec("synthetic-small", 35.6300, 139.4500, 11, "Tamagawa",
                                45.0, (0.02, 0.0), 220.0, (1350.0, -300.0), 450.0),
    "synthetic-hill": CitySpec("synthetic-hill", 39.7000, 141.1500, 23, "Kitakami",
                               70.0, (0.0, 0.05), 380.0, (1300.0, 600.0), 600.0),
}


class _Ids:
    def __init__(self, start: int):
        self.next = start

    def __call__(self) -> int:
        self.next += 1
        return self.next


class _City:
    def __init__(self, spec: CitySpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.proj = ProjectionParams(spec.lat0, spec.lon0)
        self.xy: dict[int, tuple[float, float]] = {}
        self.node_id = _Ids(1_000_000)
        self.way_id = _Ids(2_000_000)
        self.poi_id = _Ids(3_000_000)
        self.streets: list[dict] = []
        self.bridges_tagged: list[dict] = []
        self.bridges_man_made: list[dict] = []
        self.facilities: list[dict] = []
        self.buildings: list[dict] = []
        self.waterways: list[dict] = []
        self.bridge_count = 0

    # -- geometry helpers ---------------------------------------------------

    def geo(self, x: float, y: float) -> dict:
        g = unproject(PlanarCoord(x, y), self.proj)
        return {"lat": round(g.lat, 7), "lon": round(g.lon, 7)}

    def node(self, x: float, y: float) -> int:
        nid = self.node_id()
        self.xy[nid] = (x, y)
        return nid

    def way(self, nodes: list[int], tags: dict) -> dict:
        return {"type": "way", "id": self.way_id(), "nodes": list(nodes),
                "geometry": [self.geo(*self.xy[n]) for n in nodes], "tags": tags}

    def point(self, x: float, y: float, tags: dict) -> dict:
        return {"type": "node", "id": self.poi_id(), **self.geo(x, y), "tags": tags}

    def polygon(self, cx: float, cy: float, half: float, tags: dict) -> dict:
        corners = [(cx - half, cy - half), (cx + half, cy - half), (cx + half, cy + half),
                   (cx - half, cy + half)]
        ids = [self.node(*c) for c in corners]
        return self.way(ids + ids[:1], tags)

    def elevation(self, x: float, y: float) -> float:
        s = self.spec
        d2 = (x - s.peak_at[0]) ** 2 + (y - s.peak_at[1]) ** 2
        return (s.base_elev + s.slope[0] * (x + 1200) + s.slope[1] * (y + 1200)
                + s.peak * math.exp(-d2 / (2 * s.peak_radius ** 2)))

    # -- street network -----------------------------------------------------

    def bridge_tags(self, hw: str) -> dict:
        self.bridge_count += 1
        r = self.rng
        tags = {"highway": hw, "bridge": "viaduct" if r.random() < 0.15 else "yes",
                "name": f"{self.spec.prefix} Bridge {self.bridge_count}",
                "lanes": str(r.choice([1, 2, 2, 4])), "maxspeed": str(r.choice([30, 40, 50])),
                "layer": "1"}
        if r.random() < 0.6:
            tags["width"] = f"{r.uniform(4.0, 14.0):.1f}"
        return tags

    def build_streets(self):
        r = self.rng
        grid = {}
        for j in range(NY):
            for i in range(NX):
                jit = r.uniform(-8.0, 8.0, 2)
                grid[i, j] = self.node((i - 10) * SPACING + jit[0], (j - 10) * SPACING + jit[1])
        self.grid = grid
        cross_a = set(r.choice(NY, 15, replace=False).tolist())
        cross_b = sorted(r.choice(NX, 13, replace=False).tolist())
        unnamed_b = set(cross_b[:2])
        cross_b = set(cross_b)
        hw_row = {5: "primary", 16: "primary"}
        hw_col = {10: "trunk"}

        # candidate plain edges, then drop some while keeping the grid connected
        plain = []
        for j in range(NY):
            for i in range(NX - 1):
                if i != RIVER_A_COL:
                    plain.append(((i, j), (i + 1, j)))
        for i in range(NX):
            for j in range(NY - 1):
                if j != RIVER_B_ROW:
                    plain.append(((i, j), (i, j + 1)))
        crossings = [((RIVER_A_COL, j), (RIVER_A_COL + 1, j)) for j in sorted(cross_a)]
        crossings += [((i, RIVER_B_ROW), (i, RIVER_B_ROW + 1)) for i in sorted(cross_b)]
        keep = set(plain) | set(crossings)
        for e in [plain[k] for k in r.permutation(len(plain))[: len(plain) // 12]]:
            keep.discard(e)
            if not _connected(keep):
                keep.add(e)

        # rows and columns become ways; a crossing splits into approach, bridge, approach
        lines = [[(i, j) for i in range(NX)] for j in range(NY)]
        lines += [[(i, j) for j in range(NY)] for i in range(NX)]
        for k, line in enumerate(lines):
            horizontal = k < NY
            hw = hw_row.get(k, "residential") if horizontal else hw_col.get(k - NY, "residential")
            run: list[int] = []
            for a, b in zip(line, line[1:]):
                if (a, b) not in keep:
                    self._flush(run, hw)
                    run = []
                    continue
                if (a, b) in crossings:
                    ax, ay = self.xy[grid[a]]
                    bx, by = self.xy[grid[b]]
                    mx, my = (ax + bx) / 2, (ay + by) / 2
                    ux, uy = (bx - ax) / math.hypot(bx - ax, by - ay), (by - ay) / math.hypot(bx - ax, by - ay)
                    p = self.node(mx - ux * BRIDGE_HALF, my - uy * BRIDGE_HALF)
                    q = self.node(mx + ux * BRIDGE_HALF, my + uy * BRIDGE_HALF)
                    self._flush((run or [grid[a]]) + [p], hw)
                    if horizontal or a[0] not in unnamed_b:
                        tags = self.bridge_tags(hw)
                    else:
                        tags = {"highway": hw, "bridge": "yes"}
                        if a[0] == min(unnamed_b):
                            tags["name"] = "   "
                    bw = self.way([p, q], tags)
                    self.streets.append(bw)
                    self.bridges_tagged.append(bw)
                    run = [q, grid[b]]
                    continue
                if not run:
                    run = [grid[a]]
                run.append(grid[b])
                if len(run) > 5:
                    self._flush(run, hw)
                    run = [grid[b]]
            self._flush(run, hw)

    def _flush(self, run: list[int], hw: str):
        if len(run) >= 2:
            self.streets.append(self.way(run, {"highway": hw, "name": f"{hw} street"}))

    def build_hamlets(self):
        r = self.rng
        rows = sorted(r.choice(np.arange(2, NY - 2), 4, replace=False).tolist())
        self.hamlet_nodes = []
        for j in rows:
            start = self.grid[NX - 1, j]
            sx, sy = self.xy[start]
            p = self.node(sx + 60.0, sy)
            q = self.node(sx + 60.0 + 2 * BRIDGE_HALF, sy)
            h0 = self.node(sx + 140.0, sy)
            self.streets.append(self.way([start, p], {"highway": "tertiary"}))
            bw = self.way([p, q], self.bridge_tags("tertiary"))
            self.streets.append(bw)
            self.bridges_tagged.append(bw)
            self.streets.append(self.way([q, h0], {"highway": "tertiary"}))
            row = [h0, self.node(sx + 220.0, sy + 5.0), self.node(sx + 300.0, sy - 5.0)]
            top = [self.node(x + 0.0, y + 70.0) for x, y in (self.xy[n] for n in row)]
            self.streets.append(self.way(row, {"highway": "residential"}))
            self.streets.append(self.way(top, {"highway": "residential"}))
            for a, b in zip(row, top):
                self.streets.append(self.way([a, b], {"highway": "service"}))
            self.hamlet_nodes += row + top
            mx = sx + 60.0 + BRIDGE_HALF
            self.waterways.append(self.way([self.node(mx, sy - 150.0), self.node(mx + 5.0, sy),
                                            self.node(mx, sy + 150.0)], {"waterway": "stream"}))

    def build_other_bridges(self):
        r = self.rng
        street_bridges = [b for b in self.bridges_tagged if b["tags"].get("name", "").strip()]
        # rail bridges parallel to two river-A crossings
        for bw in street_bridges[:2]:
            (px, py), (qx, qy) = (self.xy[n] for n in bw["nodes"])
            a, b = self.node(px, py + 15.0), self.node(qx, qy + 15.0)
            self.bridge_count += 1
            self.bridges_tagged.append(self.way([a, b], {
                "railway": "rail", "bridge": "yes", "gauge": "1067", "layer": "1",
                "name": f"{self.spec.prefix} Rail Bridge {self.bridge_count}"}))
        # standalone outlines around existing bridges, distinct ids
        picks = r.choice(len(street_bridges), 14, replace=False)
        for k in sorted(picks.tolist()):
            bw = street_bridges[k]
            (px, py), (qx, qy) = (self.xy[n] for n in bw["nodes"])
            self.bridges_man_made.append(self.polygon(
                (px + qx) / 2, (py + qy) / 2, BRIDGE_HALF + 3.0,
                {"man_made": "bridge", "name": bw["tags"]["name"] + " Structure"}))
        # two street bridges are also returned by the man_made query (same id)
        for bw in street_bridges[2:4]:
            self.bridges_man_made.append({**bw, "tags": {**bw["tags"], "man_made": "bridge"}})
        # footbridges in mid-river between crossings: nothing within snapping range
        x_a = (RIVER_A_COL - 10 + 0.5) * SPACING
        for k, y in enumerate((-950.0, -450.0, 250.0, 850.0)):
            self.bridges_man_made.append(self.point(x_a, y, {
                "man_made": "bridge", "name": f"{self.spec.prefix} Footbridge {k + 1}"}))
        # unnamed structure, filtered out
        self.bridges_man_made.append(self.point(x_a, -150.0, {"man_made": "bridge"}))

    def build_waterways(self):
        x_a = (RIVER_A_COL - 10 + 0.5) * SPACING
        y_b = (RIVER_B_ROW - 10 + 0.5) * SPACING
        ys = np.linspace(-1150.0, 1150.0, 12)
        self.waterways.append(self.way([self.node(x_a + 6.0 * math.sin(y / 300.0), y) for y in ys],
                                       {"waterway": "river", "name": "River A"}))
        self.waterways.append(self.way([self.node(x, y_b + 6.0 * math.cos(x / 300.0)) for x in ys],
                                       {"waterway": "river", "name": "River B"}))

    def build_facilities(self):
        r = self.rng
        nodes = [self.grid[k] for k in sorted(self.grid)]

        def near(n, lo=8.0, hi=20.0):
            x, y = self.xy[n]
            ang = r.uniform(0, 2 * math.pi)
            d = r.uniform(lo, hi)
            return x + d * math.cos(ang), y + d * math.sin(ang)

        for k in r.choice(len(nodes), 2, replace=False):
            self.facilities.append(self.point(*near(nodes[k]), {"amenity": "hospital", "name": "Hospital"}))
        self.facilities.append(self.polygon(*near(nodes[int(r.integers(len(nodes)))]), 30.0,
                                            {"amenity": "hospital", "name": "General Hospital"}))
        for k in r.choice(len(nodes), 45, replace=False):
            self.facilities.append(self.point(*near(nodes[k]), {"highway": "bus_stop"}))
        for k in r.choice(len(nodes), 8, replace=False):
            kind = "nature_reserve" if k % 5 == 0 else "park"
            self.facilities.append(self.polygon(*near(nodes[k], 30, 45), 25.0, {"leisure": kind}))
        shop_kinds = ["supermarket", "convenience", "bakery", "clothes", "hardware", "books",
                      "pharmacy", "electronics"]
        for k in r.choice(len(nodes), 40, replace=False):
            self.facilities.append(self.point(*near(nodes[k]), {"shop": str(r.choice(shop_kinds))}))

    def build_buildings(self):
        r = self.rng
        anchors = [self.grid[k] for k in sorted(self.grid)] + self.hamlet_nodes
        res_kinds = ["house", "house", "residential", "apartments", "detached", "yes"]
        for n in anchors:
            for _ in range(int(r.integers(0, 3))):
                x, y = self.xy[n]
                ang, d = r.uniform(0, 2 * math.pi), r.uniform(22.0, 45.0)
                self.buildings.append(self.polygon(x + d * math.cos(ang), y + d * math.sin(ang), 5.0,
                                                   {"building": str(r.choice(res_kinds))}))
        for k in r.choice(len(anchors) - len(self.hamlet_nodes), 30, replace=False):
            x, y = self.xy[anchors[k]]
            tags = {"building": "retail"} if k % 2 else {"building": "yes", "office": "company"}
            self.buildings.append(self.polygon(x - 30.0, y + 30.0, 8.0, tags))
        # one multipolygon apartment block
        x, y = self.xy[self.grid[3, 3]]
        ring = [self.geo(x + dx, y + dy) for dx, dy in
                ((25, 25), (45, 25), (45, 45), (25, 45), (25, 25))]
        self.buildings.append({"type": "relation", "id": self.poi_id(),
                               "tags": {"type": "multipolygon", "building": "apartments"},
                               "members": [{"type": "way", "ref": self.way_id(), "role": "outer",
                                            "geometry": ring}]})

    def raster(self) -> ElevationRaster:
        cell, xll, yll, ncols, nrows = 50.0, -1200.0, -1200.0, 60, 48
        vals = np.empty((nrows, ncols))
        for row in range(nrows):
            for col in range(ncols):
                x = xll + (col + 0.5) * cell
                y = yll + (nrows - 1 - row + 0.5) * cell
                vals[row, col] = round(self.elevation(x, y), 1)
        vals[nrows - 6:, :6] = -9999.0  # south-west corner without data
        return ElevationRaster(ncols, nrows, xll, yll, cell, -9999.0, vals)

    def bbox(self) -> BBox:
        corners = [unproject(PlanarCoord(x, y), self.proj)
                   for x in (-1300.0, 1800.0) for y in (-1300.0, 1300.0)]
        lat = [c.lat for c in corners]
        lon = [c.lon for c in corners]
        return BBox(math.floor(min(lat) * 1e4) / 1e4, math.floor(min(lon) * 1e4) / 1e4,
                    math.ceil(max(lat) * 1e4) / 1e4, math.ceil(max(lon) * 1e4) / 1e4)


def _connected(edges) -> bool:
    adj: dict = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    start = (0, 0)
    seen = {start}
    queue = deque([start])
    while queue:
        for n in adj.get(queue.popleft(), ()):
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == NX * NY


CONFIG_TEMPLATE = """\
# Synthetic fixture city generated by `bridgegraph fixtures gen`.
bbox:
  min_lat: {bbox.min_lat!r}
  min_lon: {bbox.min_lon!r}
  max_lat: {bbox.max_lat!r}
  max_lon: {bbox.max_lon!r}
projection:
  lat0: {lat0!r}
  lon0: {lon0!r}
  k0: 0.9999
elevation_path: {dem}
overpass_url: {overpass}
cache_dir: cache
rng_seed: 7
weights: {{transit: 0.2, hospital: 0.2, isolation: 0.2, supply: 0.2, green: 0.2}}
llm:
  endpoint: mock://five-section
  model: mock-five-section
  temperature: 0.3
  timeout_s: 5
  max_retries: 1
umap:
  n_neighbors: 15
  n_epochs: 200
hdbscan:
  min_cluster_size: 8
  min_samples: 5
"""


def generate_city(name: str, out_dir) -> Path:
    """Write ``<out_dir>/<name>.yaml`` with its DEM and Overpass cache; returns the config path."""
    if name not in CITIES:
        raise KeyError(f"unknown fixture city {name!r}; choose from {sorted(CITIES)}")
    spec = CITIES[name]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = _City(spec)
    c.build_streets()
    c.build_hamlets()
    c.build_waterways()
    c.build_other_bridges()
    c.build_facilities()
    c.build_buildings()
    bbox = c.bbox()
    bodies = {
        "bridges_man_made": c.bridges_man_made,
        "bridges_tagged": c.bridges_tagged,
        "streets": c.streets,
        "facilities": c.facilities,
        "buildings": c.buildings,
        "waterways": c.waterways,
    }
    for qname, elements in bodies.items():
        text = QUERIES[qname].render(bbox)
        payload = {"version": 0.6, "generator": "bridgegraph synthetic fixture",
                   "elements": elements}
        write_atomic(cache_path(out / "cache", text),
                     json.dumps(payload, separators=(",", ":"), sort_keys=True).encode())
    dem = f"{name}_dem.asc"
    write_ascii_grid(out / dem, c.raster())
    cfg = out / f"{name}.yaml"
    cfg.write_text(CONFIG_TEMPLATE.format(bbox=bbox, lat0=spec.lat0, lon0=spec.lon0,
                                          dem=dem, overpass=UNROUTABLE_OVERPASS), encoding="utf-8")
    return cfg
