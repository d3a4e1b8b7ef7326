"""The 52-column per-bridge feature matrix and its normalisation.

Columns come from a fixed registry in five groups: social (the indicator
scores), topology, spatial, facility and attribute.  Absent OSM tags encode as
0 for one-hot columns and -1 for numeric columns.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .config import FeatureOptions
from .hetgraph import HeteroGraph, betweenness, clustering_coefficient, make_closure_mask
from .hetgraph import two_hop_count
from .ingest import sample_elevation
from .scoring import SCORE_COLUMNS, ScoreCard
from .spatial import PlanarCoord, build_index, project

EPS_VAR = 1e-6
OUTLIER_Z = 3.0
OUTLIER_COUNT = 3
GROUP_SIZES = {"social": 5, "topology": 8, "spatial": 6, "facility": 15, "attribute": 18}

HIGHWAY_CLASSES = ("motorway", "trunk", "primary", "secondary", "tertiary", "residential",
                   "service", "footway")
BRIDGE_KINDS = ("yes", "viaduct", "aqueduct")
NUMERIC_TAGS = {"lanes": "lanes", "maxspeed": "maxspeed", "layer": "layer", "width": "width",
                "voltage": "voltage", "gauge": "gauge", "frequency": "frequency",
                "passenger": "passenger_lines"}
FACILITY_KINDS = ("hospital", "bus_stop", "park", "shop", "highway_node")

DEFAULT_ATTRIBUTES = (
    *(f"highway_{c}" for c in HIGHWAY_CLASSES),
    *(f"bridge_{k}" for k in BRIDGE_KINDS), "bridge_man_made",
    "railway", "lanes", "maxspeed", "layer", "width", "length",
)
OPTIONAL_ATTRIBUTES = ("voltage", "gauge", "frequency", "passenger")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    extractor: str


class FeatureRegistry:
    def __init__(self, specs: Sequence[FeatureSpec]):
        self.specs = tuple(specs)
        names = [s.name for s in self.specs]
        if len(names) != 52 or len(set(names)) != 52:
            raise ValueError(f"registry must hold 52 unique features, got {len(set(names))}")
        for g, n in GROUP_SIZES.items():
            got = sum(s.group == g for s in self.specs)
            if got != n:
                raise ValueError(f"group {g} has {got} features, expected {n}")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __len__(self):
        return len(self.specs)


def default_registry(attribute_features: Sequence[str] | None = None) -> FeatureRegistry:
    attrs = tuple(attribute_features) if attribute_features is not None else DEFAULT_ATTRIBUTES
    pool = set(DEFAULT_ATTRIBUTES) | set(OPTIONAL_ATTRIBUTES)
    bad = [a for a in attrs if a not in pool]
    if bad:
        raise ValueError(f"unknown attribute features {bad}")
    specs = [FeatureSpec(c, "social", f"score:{c}") for c in SCORE_COLUMNS]
    specs += [FeatureSpec(n, "topology", f"topo:{n}") for n in (
        "betweenness", "num_street_connections", "two_hop_count", "clustering_coeff",
        "degree_mean", "degree_max", "snap_distance_mean", "closure_edge_count")]
    specs += [FeatureSpec(n, "spatial", f"spatial:{n}") for n in (
        "latitude", "longitude", "elevation", "log_dist_water", "elevation_relief",
        "building_count_1km")]
    for kind in FACILITY_KINDS:
        specs += [FeatureSpec(f"{kind}_count_500m", "facility", f"count:{kind}:500"),
                  FeatureSpec(f"{kind}_count_1000m", "facility", f"count:{kind}:1000"),
                  FeatureSpec(f"{kind}_nearest_m", "facility", f"nearest:{kind}")]
    specs += [FeatureSpec(a, "attribute", f"attr:{a}") for a in attrs]
    return FeatureRegistry(specs)


@dataclass
class FeatureMatrix:
    bridge_ids: list[int]
    names: list[str]
    groups: list[str]
    raw: np.ndarray  # bridges x features
    cities: list[str] = field(default_factory=list)
    retained: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    normalized: np.ndarray | None = None  # bridges x retained features

    @property
    def retained_names(self) -> list[str]:
        if self.retained is None:
            return list(self.names)
        return [n for n, k in zip(self.names, self.retained) if k]


# ---------------------------------------------------------------------------
# extraction


def _number(text: str | None) -> float:
    if text is None:
        return -1.0
    m = re.match(r"\s*([-+]?\d+(?:\.\d+)?)", str(text))
    return float(m.group(1)) if m else -1.0


def _highway_class(tags) -> str | None:
    hw = tags.get("highway")
    if hw is None:
        return None
    return hw[:-5] if hw.endswith("_link") else hw


def _polyline_length(xy: np.ndarray) -> float:
    if len(xy) < 2:
        return -1.0
    return float(np.hypot(*np.diff(xy, axis=0).T).sum())


def _point_segment_distance(p: np.ndarray, line: np.ndarray) -> float:
    if len(line) == 1:
        return float(np.hypot(*(line[0] - p)))
    a, b = line[:-1], line[1:]
    ab = b - a
    denom = (ab * ab).sum(axis=1)
    t = np.where(denom > 0, ((p - a) * ab).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + ab * t[:, None]
    return float(np.hypot(*(proj - p).T).min())


class _Extractor:
    def __init__(self, h: HeteroGraph, cards: dict[int, ScoreCard], options: FeatureOptions,
                 seed: int):
        self.h = h
        self.cards = cards
        st = h.streets
        n = st.n
        sources = None if n < options.exact_betweenness_below else options.betweenness_sources
        self.bc = betweenness(st, sources, seed) if n else np.zeros(0)
        pts = {k: np.array([f.xy for f in h.facilities_of(k)], dtype=float).reshape(-1, 2)
               for k in FACILITY_KINDS[:-1]}
        pts["highway_node"] = st.xy[st.node_is_highway]
        self.fac = {k: (build_index(v), len(v)) for k, v in pts.items()}
        bxy = np.array([b.xy for b in h.buildings], dtype=float).reshape(-1, 2)
        self.buildings = build_index(bxy)

    def topology(self, b) -> dict[str, float]:
        if b.snap_failed:
            return dict.fromkeys(("betweenness", "num_street_connections", "two_hop_count",
                                  "clustering_coeff", "degree_mean", "degree_max",
                                  "snap_distance_mean", "closure_edge_count"), 0.0)
        st = self.h.streets
        nodes = [s for s, _ in b.snaps]
        deg = [st.degree(s) for s in nodes]
        return {
            "betweenness": float(np.mean(self.bc[nodes])),
            "num_street_connections": float(len(nodes)),
            "two_hop_count": float(max(two_hop_count(st, s) for s in nodes)),
            "clustering_coeff": float(np.mean([clustering_coefficient(st, s) for s in nodes])),
            "degree_mean": float(np.mean(deg)),
            "degree_max": float(max(deg)),
            "snap_distance_mean": float(np.mean([d for _, d in b.snaps])),
            "closure_edge_count": float(len(make_closure_mask(self.h, b.id).blocked_edges)),
        }

    def spatial(self, b) -> dict[str, float]:
        h = self.h
        c = b.record.centroid
        elev, relief = -1.0, 0.0
        r = h.raster
        if r is not None:
            v = sample_elevation(r, PlanarCoord(*b.xy))
            elev = -1.0 if r.is_nodata(v) else float(v)
            # cells whose centres fall inside a 500 m box around the bridge
            xs = r.xll + (np.arange(r.ncols) + 0.5) * r.cellsize
            ys = r.yll + (r.nrows - 1 - np.arange(r.nrows) + 0.5) * r.cellsize
            cols = np.flatnonzero(np.abs(xs - b.xy[0]) <= 250.0)
            rows = np.flatnonzero(np.abs(ys - b.xy[1]) <= 250.0)
            if len(cols) and len(rows):
                win = r.values[np.ix_(rows, cols)].ravel()
                win = win[~np.isclose(win, r.nodata)]
                if len(win):
                    relief = float(win.max() - win.min())
        water = -1.0
        if h.waterways:
            d = min(_point_segment_distance(b.xy, w) for w in h.waterways if len(w))
            water = math.log1p(d)
        return {
            "latitude": c.lat, "longitude": c.lon, "elevation": elev,
            "log_dist_water": water, "elevation_relief": relief,
            "building_count_1km": float(len(self.buildings.radius(b.xy, 1000.0))),
        }

    def facility(self, b) -> dict[str, float]:
        out = {}
        for kind in FACILITY_KINDS:
            idx, n = self.fac[kind]
            out[f"{kind}_count_500m"] = float(len(idx.radius(b.xy, 500.0)))
            out[f"{kind}_count_1000m"] = float(len(idx.radius(b.xy, 1000.0)))
            out[f"{kind}_nearest_m"] = idx.knn(b.xy, 1)[0][1] if n else -1.0
        return out

    def attributes(self, b) -> dict[str, float]:
        rec = b.record
        t = rec.tags
        hw = _highway_class(t)
        out = {f"highway_{c}": float(hw == c) for c in HIGHWAY_CLASSES}
        out.update({f"bridge_{k}": float(t.get("bridge") == k) for k in BRIDGE_KINDS})
        out["bridge_man_made"] = float(rec.source_pattern == "man_made" or t.get("man_made") == "bridge")
        out["railway"] = float("railway" in t)
        for name, key in NUMERIC_TAGS.items():
            out[name] = _number(t.get(key))
        proj = self.h.projection
        if len(rec.geometry) >= 2 and proj is not None:
            xy = np.array([(p.x, p.y) for p in (project(g, proj) for g in rec.geometry)])
            out["length"] = _polyline_length(xy)
        else:
            out["length"] = -1.0
        return out

    def row(self, b, names: list[str]) -> list[float]:
        card = self.cards.get(b.id)
        vals = {c: (getattr(card, c) if card is not None else 0.0) for c in SCORE_COLUMNS}
        vals.update(self.topology(b))
        vals.update(self.spatial(b))
        vals.update(self.facility(b))
        vals.update(self.attributes(b))
        return [float(vals[n]) for n in names]


def assemble_features(h: HeteroGraph, cards: Sequence[ScoreCard],
                      registry: FeatureRegistry | None = None,
                      options: FeatureOptions | None = None, seed: int = 0,
                      city: str = "") -> FeatureMatrix:
    options = options or FeatureOptions()
    registry = registry or default_registry(options.attribute_features)
    ex = _Extractor(h, {c.bridge_id: c for c in cards}, options, seed)
    names = registry.names
    rows = [ex.row(b, names) for b in h.bridges]
    return FeatureMatrix(
        bridge_ids=[b.id for b in h.bridges], names=names,
        groups=[s.group for s in registry.specs],
        raw=np.array(rows, dtype=float).reshape(-1, len(names)),
        cities=[b.record.city or city for b in h.bridges],
    )


def concat_matrices(ms: Sequence[FeatureMatrix]) -> FeatureMatrix:
    first = ms[0]
    for m in ms[1:]:
        if m.names != first.names:
            raise ValueError("feature matrices have different columns")
    return FeatureMatrix(
        bridge_ids=[i for m in ms for i in m.bridge_ids], names=list(first.names),
        groups=list(first.groups), raw=np.vstack([m.raw for m in ms]),
        cities=[c for m in ms for c in m.cities])


# ---------------------------------------------------------------------------
# normalisation


def drop_zero_variance(m: FeatureMatrix, eps: float = EPS_VAR) -> FeatureMatrix:
    var = m.raw.var(axis=0) if len(m.raw) else np.zeros(len(m.names))
    keep = var > eps
    if not keep.any():
        raise ValueError("every feature has zero variance")
    return replace(m, retained=keep)


def zscore_normalize(m: FeatureMatrix) -> FeatureMatrix:
    """Population z-scores of the retained columns."""
    keep = m.retained if m.retained is not None else np.ones(len(m.names), dtype=bool)
    x = m.raw[:, keep]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    z = (x - mu) / sd
    # a second centring pass removes the rounding residue of the first
    z -= z.mean(axis=0)
    z /= z.std(axis=0)
    mean = np.full(len(m.names), np.nan)
    std = np.full(len(m.names), np.nan)
    mean[keep], std[keep] = mu, sd
    return replace(m, retained=keep, mean=mean, std=std, normalized=z)


def flag_outliers(z: np.ndarray, threshold: float = OUTLIER_Z,
                  max_count: int = OUTLIER_COUNT) -> np.ndarray:
    """True where more than ``max_count`` features have |z| above ``threshold``."""
    z = np.asarray(z, dtype=float)
    return (np.abs(z) > threshold).sum(axis=1) > max_count


def prepare(m: FeatureMatrix) -> FeatureMatrix:
    return zscore_normalize(drop_zero_variance(m))


# ---------------------------------------------------------------------------
# CSV


def _fmt(v: float) -> str:
    return repr(float(v))


def write_features_raw(m: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bridge_id", "city", *m.names])
        for i, bid in enumerate(m.bridge_ids):
            w.writerow([bid, m.cities[i] if m.cities else "", *map(_fmt, m.raw[i])])


def read_features_raw(path) -> FeatureMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][2:]
    reg = {s.name: s.group for s in default_registry(
        [n for n in names if n in set(DEFAULT_ATTRIBUTES) | set(OPTIONAL_ATTRIBUTES)]).specs}
    body = rows[1:]
    raw = np.array([[float(v) for v in r[2:]] for r in body], dtype=float).reshape(-1, len(names))
    return FeatureMatrix([int(r[0]) for r in body], names, [reg[n] for n in names], raw,
                         [r[1] for r in body])


def write_features(m: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bridge_id", *m.retained_names])
        for bid, row in zip(m.bridge_ids, m.normalized):
            w.writerow([bid, *map(_fmt, row)])


def read_features(path) -> tuple[list[int], list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    ids = [int(r[0]) for r in rows[1:]]
    z = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=float).reshape(-1, len(names))
    return ids, names, z


def write_feature_stats(m: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "group", "mean", "std", "retained"])
        var_mean = m.raw.mean(axis=0)
        var_std = m.raw.std(axis=0)
        for j, name in enumerate(m.names):
            w.writerow([name, m.groups[j], _fmt(var_mean[j]), _fmt(var_std[j]),
                        "true" if m.retained[j] else "false"])


def write_outliers(m: FeatureMatrix, flags: np.ndarray, path) -> None:
    counts = (np.abs(m.normalized) > OUTLIER_Z).sum(axis=1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bridge_id", "exceedances", "outlier"])
        for bid, c, f in zip(m.bridge_ids, counts, flags):
            w.writerow([bid, int(c), "true" if f else "false"])
