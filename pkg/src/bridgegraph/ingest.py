"""OpenStreetMap acquisition via Overpass, named-bridge filtering, facility
and building extraction, and the ASCII-grid elevation raster."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import requests

from .config import BBox, PipelineConfig
from .errors import NetworkError
from .spatial import GeoCoord, PlanarCoord, ProjectionParams, project

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RawOsmElement:
    id: int
    kind: str  # node | way | relation
    tags: Mapping[str, str]
    geometry: tuple[GeoCoord, ...]
    nodes: tuple[int, ...] = ()  # node refs, ways only

    def __post_init__(self):
        if self.kind not in ("node", "way", "relation"):
            raise ValueError(f"unknown element kind {self.kind!r}")
        if self.kind == "way" and len(self.geometry) < 2:
            raise ValueError(f"way {self.id} has fewer than 2 geometry points")

    def centroid(self) -> GeoCoord:
        pts = self.geometry
        if len(pts) > 2 and pts[0] == pts[-1]:
            pts = pts[:-1]  # closed ring: do not double count the seam vertex
        return GeoCoord(sum(p.lat for p in pts) / len(pts), sum(p.lon for p in pts) / len(pts))


@dataclass(frozen=True)
class BridgeRecord:
    osm_id: int
    name: str
    centroid: GeoCoord
    tags: Mapping[str, str]
    source_pattern: str  # man_made | bridge_tag
    kind: str = "way"
    geometry: tuple[GeoCoord, ...] = ()
    city: str = ""


FACILITY_CATEGORIES = ("hospital", "bus_stop", "park", "shop", "highway_node")


@dataclass(frozen=True)
class FacilityRecord:
    osm_id: int
    category: str
    subcategory: str
    location: GeoCoord

    def __post_init__(self):
        if self.category not in FACILITY_CATEGORIES:
            raise ValueError(f"unknown facility category {self.category!r}")


@dataclass(frozen=True)
class BuildingRecord:
    osm_id: int
    centroid: GeoCoord
    is_residential: bool
    population_estimate: float
    elevation_m: float | None  # None where the raster has no data

    def __post_init__(self):
        if self.population_estimate < 0:
            raise ValueError("population_estimate must be >= 0")


# ---------------------------------------------------------------------------
# Overpass


@dataclass(frozen=True)
class OverpassQuerySpec:
    name: str
    template: str  # Overpass QL with a {bbox} placeholder

    def render(self, bbox: BBox) -> str:
        return self.template.replace("{bbox}", bbox.overpass())


_DRIVE = ("motorway|motorway_link|trunk|trunk_link|primary|primary_link|secondary|"
          "secondary_link|tertiary|tertiary_link|unclassified|residential|living_street|service")

QUERIES: dict[str, OverpassQuerySpec] = {
    q.name: q
    for q in (
        OverpassQuerySpec(
            "bridges_man_made",
            '[out:json][timeout:180];\n(\n  nwr["man_made"="bridge"]({bbox});\n);\nout geom;\n',
        ),
        OverpassQuerySpec(
            "bridges_tagged",
            '[out:json][timeout:180];\n(\n  way["bridge"]["bridge"!="no"]({bbox});\n);\nout geom;\n',
        ),
        OverpassQuerySpec(
            "streets",
            '[out:json][timeout:300];\n(\n  way["highway"~"^(' + _DRIVE + ')$"]({bbox});\n);\n'
            "out geom;\n",
        ),
        OverpassQuerySpec(
            "facilities",
            '[out:json][timeout:180];\n(\n  nwr["amenity"="hospital"]({bbox});\n'
            '  node["highway"="bus_stop"]({bbox});\n'
            '  nwr["leisure"~"^(park|nature_reserve)$"]({bbox});\n'
            '  nwr["shop"]({bbox});\n);\nout geom;\n',
        ),
        OverpassQuerySpec(
            "buildings",
            '[out:json][timeout:300];\n(\n  way["building"]({bbox});\n'
            '  relation["building"]["type"="multipolygon"]({bbox});\n);\nout geom;\n',
        ),
        OverpassQuerySpec(
            "waterways",
            '[out:json][timeout:180];\n(\n  way["waterway"~"^(river|stream|canal)$"]({bbox});\n'
            '  way["natural"="coastline"]({bbox});\n);\nout geom;\n',
        ),
    )
}


def cache_key(query_text: str) -> str:
    return hashlib.sha256(query_text.encode("utf-8")).hexdigest()


def cache_path(cache_dir: Path, query_text: str) -> Path:
    return Path(cache_dir) / f"{cache_key(query_text)}.json"


def write_atomic(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _coord(d) -> GeoCoord:
    return GeoCoord(float(d["lat"]), float(d["lon"]))


def parse_overpass(payload: bytes | str) -> list[RawOsmElement]:
    """Parse an ``out geom`` Overpass JSON body."""
    try:
        doc = json.loads(payload)
        items = doc["elements"]
    except (ValueError, KeyError, TypeError) as exc:
        raise NetworkError(f"malformed Overpass response: {exc}") from exc
    out: list[RawOsmElement] = []
    skipped = 0
    for el in items:
        kind = el.get("type")
        tags = {str(k): str(v) for k, v in (el.get("tags") or {}).items()}
        if kind == "node":
            if "lat" not in el:
                skipped += 1
                continue
            out.append(RawOsmElement(int(el["id"]), "node", tags, (_coord(el),)))
        elif kind == "way":
            geom = tuple(_coord(g) for g in el.get("geometry") or () if g)
            if len(geom) < 2:
                skipped += 1
                continue
            refs = tuple(int(n) for n in el.get("nodes") or ())
            out.append(RawOsmElement(int(el["id"]), "way", tags, geom, refs))
        elif kind == "relation":
            outer = [
                _coord(g)
                for m in el.get("members") or ()
                if m.get("role", "outer") in ("outer", "") and m.get("geometry")
                for g in m["geometry"]
                if g
            ]
            if not outer:
                skipped += 1
                continue
            out.append(RawOsmElement(int(el["id"]), "relation", tags, tuple(outer)))
    if skipped:
        log.debug("skipped %d Overpass elements without usable geometry", skipped)
    return out


def fetch_overpass(cfg: PipelineConfig, query: OverpassQuerySpec,
                   session: requests.Session | None = None) -> list[RawOsmElement]:
    """Run ``query`` over the configured bbox, serving from the cache when warm."""
    text = query.render(cfg.bbox)
    path = cache_path(cfg.cache_dir, text)
    if path.is_file():
        return parse_overpass(path.read_bytes())
    sess = session or requests.Session()
    try:
        resp = sess.post(cfg.overpass_url, data={"data": text}, timeout=600)
    except requests.RequestException as exc:
        raise NetworkError(f"Overpass request '{query.name}' failed and no cache at {path}: {exc}")
    if not resp.ok:
        raise NetworkError(f"Overpass '{query.name}' returned HTTP {resp.status_code}")
    body = resp.content
    elements = parse_overpass(body)  # validate before caching
    write_atomic(path, body)
    return elements


# ---------------------------------------------------------------------------
# filtering and extraction


def _pattern(el: RawOsmElement) -> str | None:
    if el.tags.get("man_made") == "bridge":
        return "man_made"
    if "bridge" in el.tags and el.tags["bridge"] != "no":
        return "bridge_tag"
    return None


def filter_named_bridges(elements: Iterable[RawOsmElement], bbox: BBox | None = None,
                         city: str = "") -> list[BridgeRecord]:
    """Keep bridge elements with a non-blank name, merging duplicates by OSM id."""
    merged: dict[tuple[str, int], tuple[RawOsmElement, str, dict]] = {}
    for el in elements:
        pattern = _pattern(el)
        if pattern is None:
            continue
        name = el.tags.get("name", "").strip()
        if not name:
            continue
        key = (el.kind, el.id)
        if key not in merged:
            merged[key] = (el, pattern, dict(el.tags))
            continue
        prev_el, prev_pattern, tags = merged[key]
        if pattern == "man_made":
            tags = {**tags, **el.tags}
            merged[key] = (el, "man_made", tags)
        else:
            merged[key] = (prev_el, prev_pattern, {**el.tags, **tags})
    out = []
    for (kind, osm_id), (el, pattern, tags) in sorted(merged.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        c = el.centroid()
        if bbox is not None and not bbox.contains(c.lat, c.lon):
            continue
        out.append(BridgeRecord(osm_id, tags["name"].strip(), c, tags, pattern, kind,
                                el.geometry, city))
    return out


FOOD_DAILY_SHOPS = frozenset({
    "supermarket", "convenience", "grocery", "greengrocer", "bakery", "butcher", "seafood",
    "deli", "dairy", "food", "beverages", "confectionery", "frozen_food", "farm", "rice",
    "tea", "coffee", "health_food", "pastry", "cheese", "chemist", "pharmacy", "general",
    "variety_store", "department_store", "kiosk",
})


def extract_facilities(elements: Iterable[RawOsmElement]) -> list[FacilityRecord]:
    seen: set[tuple[str, str, int]] = set()
    out = []
    for el in elements:
        t = el.tags
        cats = []
        if t.get("amenity") == "hospital":
            cats.append(("hospital", "hospital"))
        if t.get("highway") == "bus_stop":
            cats.append(("bus_stop", "bus_stop"))
        if t.get("leisure") in ("park", "nature_reserve"):
            cats.append(("park", t["leisure"]))
        if "shop" in t and t["shop"] != "no":
            cats.append(("shop", t["shop"]))
        for cat, sub in cats:
            key = (cat, el.kind, el.id)
            if key in seen:
                continue
            seen.add(key)
            out.append(FacilityRecord(el.id, cat, sub, el.centroid()))
    return out


RESIDENTIAL_BUILDINGS = frozenset({"residential", "house", "apartments", "detached", "terrace"})
_COMMERCIAL_KEYS = ("shop", "office", "amenity", "craft", "tourism", "industrial")


def is_residential(tags: Mapping[str, str]) -> bool:
    b = tags.get("building")
    if b in RESIDENTIAL_BUILDINGS:
        return True
    return b == "yes" and not any(k in tags for k in _COMMERCIAL_KEYS)


def extract_buildings(elements: Iterable[RawOsmElement], proj: ProjectionParams,
                      raster: "ElevationRaster | None" = None,
                      population_per_residence: float = 2.5) -> list[BuildingRecord]:
    out = []
    seen = set()
    for el in elements:
        if "building" not in el.tags or el.tags["building"] == "no":
            continue
        if (el.kind, el.id) in seen:
            continue
        seen.add((el.kind, el.id))
        c = el.centroid()
        res = is_residential(el.tags)
        elev = None
        if raster is not None:
            v = sample_elevation(raster, project(c, proj))
            elev = None if raster.is_nodata(v) else v
        out.append(BuildingRecord(el.id, c, res, population_per_residence if res else 0.0, elev))
    return out


def extract_waterways(elements: Iterable[RawOsmElement]) -> list[tuple[GeoCoord, ...]]:
    return [el.geometry for el in elements
            if el.kind == "way" and ("waterway" in el.tags or el.tags.get("natural") == "coastline")]


# ---------------------------------------------------------------------------
# elevation raster


@dataclass(frozen=True)
class ElevationRaster:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: np.ndarray = field(repr=False)  # (nrows, ncols), north row first

    def __post_init__(self):
        if self.cellsize <= 0:
            raise ValueError("cellsize must be > 0")
        if self.values.size != self.ncols * self.nrows:
            raise ValueError(f"expected {self.ncols * self.nrows} values, got {self.values.size}")

    def is_nodata(self, v: float) -> bool:
        return v == self.nodata or math.isnan(v)


_HEADER = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def read_ascii_grid(path) -> ElevationRaster:
    """Read an ESRI ASCII grid (six header lines, then north-first rows)."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    header = {}
    for line in lines[:6]:
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}: bad header line {line!r}")
        header[parts[0].lower()] = float(parts[1])
    if set(header) != set(_HEADER):
        raise ValueError(f"{path}: header keys must be {_HEADER}, got {sorted(header)}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    vals = np.array(" ".join(lines[6:]).split(), dtype=float)
    return ElevationRaster(ncols, nrows, header["xllcorner"], header["yllcorner"],
                           header["cellsize"], header["nodata_value"],
                           vals.reshape(nrows, ncols) if vals.size == ncols * nrows else vals)


def write_ascii_grid(path, r: ElevationRaster) -> None:
    rows = [f"ncols {r.ncols}", f"nrows {r.nrows}", f"xllcorner {r.xll!r}",
            f"yllcorner {r.yll!r}", f"cellsize {r.cellsize!r}", f"NODATA_value {r.nodata!r}"]
    rows += [" ".join(f"{v:.1f}" for v in row) for row in r.values]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def sample_elevation(raster: ElevationRaster, p: PlanarCoord) -> float:
    """Value of the cell containing ``p`` or ``raster.nodata`` outside the grid."""
    col = math.floor((p.x - raster.xll) / raster.cellsize)
    row_from_south = math.floor((p.y - raster.yll) / raster.cellsize)
    if not (0 <= col < raster.ncols and 0 <= row_from_south < raster.nrows):
        return raster.nodata
    v = float(raster.values[raster.nrows - 1 - row_from_south, col])
    return raster.nodata if math.isnan(v) else v
