"""Stage orchestration.

Stages run in a fixed order and talk to each other only through files in the
output directory, so any suffix of the chain can be re-run from persisted
artifacts and gives the same bytes as an end-to-end run.  Every file a stage
writes is recorded in ``run_manifest.json`` together with its inputs and wall
time.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import plots
from .cluster.hdbscan import hdbscan_fit
from .cluster.profile import (profile_clusters, read_cluster_statistics, read_embedding,
                              write_cluster_statistics, write_embedding)
from .cluster.umap import umap_embed
from .config import PipelineConfig, load_config
from .errors import BridgeGraphError, ConfigError, MissingArtifactError
from .features import (FeatureMatrix, assemble_features, concat_matrices, flag_outliers, prepare,
                       read_features, read_features_raw, write_feature_stats, write_features,
                       write_features_raw, write_outliers)
from .hetgraph import HeteroGraph, build_hetero_graph, build_street_graph, dump_graph, load_graph
from .ingest import (QUERIES, RawOsmElement, extract_buildings, extract_facilities,
                     extract_waterways, fetch_overpass, filter_named_bridges, read_ascii_grid)
from .interpret import (interpret_clusters, quality_metrics, request_from_profile,
                        write_quality_metrics, write_reports)
from .scoring import SCORE_COLUMNS, ScoreCard, read_scores_csv, score_all, write_scores_csv
from .spatial import GeoCoord, project

log = logging.getLogger(__name__)

STAGES = ("ingest", "graph", "score", "features", "cluster", "interpret", "report")
SWEEP_TEMPERATURES = (0.1, 0.3, 0.5, 0.7)
MANIFEST = "run_manifest.json"

ELEMENTS = "elements.json"
GRAPH_FILES = ("graph_nodes.txt", "graph_edges.txt", "graph_highway_nodes.txt")
SCORES = "bridges_scored.csv"
FEATURES_RAW = "features_raw.csv"
FEATURES = "features.csv"
EMBEDDING = "umap_embedding.csv"
CLUSTER_STATS = "cluster_statistics.csv"


@dataclass
class StageRecord:
    name: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    seconds: float = 0.0
    detail: dict = field(default_factory=dict)


class Run:
    """Output directory bookkeeping for one invocation."""

    def __init__(self, cfg: PipelineConfig, sweep: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.sweep = sweep
        self.records: dict[str, StageRecord] = {}
        self.current: StageRecord | None = None

    def _rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.out.resolve()).as_posix()
        except ValueError:
            return str(p)

    def need(self, rel) -> Path:
        p = rel if isinstance(rel, Path) and rel.is_absolute() else self.out / rel
        if not p.is_file():
            raise MissingArtifactError(p, self.current.name if self.current else None)
        self.current.inputs.append(self._rel(p))
        return p

    def output(self, rel) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.current.outputs.append(self._rel(p))
        return p

    def note(self, paths) -> None:
        for p in paths:
            self.current.outputs.append(self._rel(p))


# ---------------------------------------------------------------------------
# persisted OSM elements


def _element_json(el: RawOsmElement) -> dict:
    return {"id": el.id, "kind": el.kind, "tags": dict(sorted(el.tags.items())),
            "geometry": [[g.lat, g.lon] for g in el.geometry], "nodes": list(el.nodes)}


def write_elements(path, groups: dict[str, list[RawOsmElement]]) -> None:
    doc = {name: [_element_json(e) for e in groups[name]] for name in sorted(groups)}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n",
                          encoding="utf-8")


def read_elements(path) -> dict[str, list[RawOsmElement]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return {name: [RawOsmElement(d["id"], d["kind"], d["tags"],
                                 tuple(GeoCoord(a, b) for a, b in d["geometry"]), tuple(d["nodes"]))
                   for d in items]
            for name, items in doc.items()}


# ---------------------------------------------------------------------------
# GeoJSON


def export_geojson(cards: list[ScoreCard], path) -> None:
    """One WGS84 Point per bridge; properties mirror the scores CSV columns."""
    feats = []
    for c in cards:
        props = {"bridge_id": c.bridge_id, "name": c.name, "lat": round(c.lat, 7),
                 "lon": round(c.lon, 7)}
        props.update({k: round(v, 4) for k, v in zip(SCORE_COLUMNS, c.scores())})
        props["composite"] = round(c.composite, 4)
        props["snap_failed"] = c.snap_failed
        feats.append({"type": "Feature",
                      "geometry": {"type": "Point", "coordinates": [round(c.lon, 7), round(c.lat, 7)]},
                      "properties": props})
    doc = {"type": "FeatureCollection", "features": feats}
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def read_geojson(path) -> list[ScoreCard]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for f in doc["features"]:
        p = f["properties"]
        out.append(ScoreCard(p["bridge_id"], p["name"], p["lat"], p["lon"],
                             *(p[k] for k in SCORE_COLUMNS), p["composite"], p["snap_failed"]))
    return out


# ---------------------------------------------------------------------------
# shared loaders


def _raster(run: Run):
    path = Path(run.cfg.elevation_path)
    if not path.is_file():
        raise ConfigError(f"elevation file not found: {path}")
    run.current.inputs.append(str(path))
    return read_ascii_grid(path)


def _hetero(run: Run) -> HeteroGraph:
    cfg = run.cfg
    els = read_elements(run.need(ELEMENTS))
    nodes, edges, hw = (run.need(f) for f in GRAPH_FILES)
    streets = load_graph(nodes, edges, hw)
    raster = _raster(run)
    bridges = filter_named_bridges(els["bridges_man_made"] + els["bridges_tagged"], cfg.bbox, cfg.city)
    facilities = extract_facilities(els["facilities"])
    p = cfg.indicator_params
    buildings = extract_buildings(els["buildings"], cfg.projection, raster, p.population_per_residence)
    return build_hetero_graph(streets, bridges, facilities, buildings, cfg.projection, raster,
                              p.snap_k, p.snap_max_distance, extract_waterways(els["waterways"]))


def _raw_matrix(run: Run) -> tuple[FeatureMatrix, bool]:
    """This city's raw features plus any ``combine_with`` cities; flag says if combined."""
    m = read_features_raw(run.need(FEATURES_RAW))
    extra = []
    for p in run.cfg.cluster.combine_with:
        p = Path(p)
        f = p / FEATURES_RAW if p.is_dir() or not p.suffix else p
        extra.append(read_features_raw(run.need(f.resolve())))
    return (concat_matrices([m, *extra]), True) if extra else (m, False)


# ---------------------------------------------------------------------------
# stages


def stage_ingest(run: Run) -> None:
    cfg = run.cfg
    groups = {}
    for name in sorted(QUERIES):
        groups[name] = fetch_overpass(cfg, QUERIES[name])
    write_elements(run.output(ELEMENTS), groups)
    run.current.detail = {name: len(v) for name, v in groups.items()}


def stage_graph(run: Run) -> None:
    cfg = run.cfg
    els = read_elements(run.need(ELEMENTS))
    streets = build_street_graph(els["streets"], cfg.projection)
    if streets.n == 0:
        raise BridgeGraphError("no street network in the configured bbox")
    dump_graph(streets, *(run.output(f) for f in GRAPH_FILES))
    h = _hetero(run)
    failed = sum(b.snap_failed for b in h.bridges)
    run.current.detail = {"street_nodes": streets.n, "street_edges": int(len(streets.u)),
                          "degenerate_ways": streets.degenerate_ways, "bridges": len(h.bridges),
                          "snap_failed": failed}
    run.output("graph_summary.json").write_text(
        json.dumps(run.current.detail, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def stage_score(run: Run) -> None:
    cfg = run.cfg
    h = _hetero(run)
    cards, timing = score_all(h, cfg.indicator_params, cfg.weights, cfg.rng_seed)
    write_scores_csv(cards, run.output(SCORES))
    export_geojson(cards, run.output("bridges_scored.geojson"))
    run.current.detail = {"bridges": timing.n_bridges, "snap_failed": timing.n_snap_failed,
                          "indicator_seconds": {k: round(v, 4) for k, v in timing.seconds.items()}}


def stage_features(run: Run) -> None:
    cfg = run.cfg
    h = _hetero(run)
    cards = read_scores_csv(run.need(SCORES))
    m = assemble_features(h, cards, options=cfg.features, seed=cfg.rng_seed, city=cfg.city)
    write_features_raw(m, run.output(FEATURES_RAW))
    pm = prepare(m)
    flags = flag_outliers(pm.normalized)
    write_features(pm, run.output(FEATURES))
    write_feature_stats(pm, run.output("feature_stats.csv"))
    write_outliers(pm, flags, run.output("outliers.csv"))
    run.current.detail = {"features": len(m.names), "retained": int(pm.retained.sum()),
                          "outliers": int(flags.sum())}


def stage_cluster(run: Run) -> None:
    cfg = run.cfg
    ids, names, z = read_features(run.need(FEATURES))
    m, combined = _raw_matrix(run)
    pm = prepare(m)
    if combined:
        write_features(pm, run.output("features_combined.csv"))
        ids, z = pm.bridge_ids, pm.normalized
    elif ids != pm.bridge_ids or names != pm.retained_names:
        raise BridgeGraphError(f"{FEATURES} and {FEATURES_RAW} disagree; re-run the features stage")
    n = len(ids)
    if n < 3:
        raise BridgeGraphError(f"need at least 3 bridges to cluster, got {n}")
    up = cfg.cluster.umap
    if up.n_neighbors > n - 1:
        log.warning("n_neighbors %d reduced to %d for %d bridges", up.n_neighbors, n - 1, n)
        up = replace(up, n_neighbors=n - 1)
    emb = umap_embed(z, up)
    assign = hdbscan_fit(emb, cfg.cluster.hdbscan)
    write_embedding(ids, emb, assign.labels, run.output(EMBEDDING))
    table = profile_clusters(assign.labels, pm)
    write_cluster_statistics(table, run.output(CLUSTER_STATS))
    run.current.detail = {"bridges": n, "clusters": assign.n_clusters,
                          "noise": int((assign.labels < 0).sum()),
                          "noise_fraction": round(assign.noise_fraction, 4),
                          "n_neighbors": up.n_neighbors}


def stage_interpret(run: Run) -> None:
    cfg = run.cfg
    table = read_cluster_statistics(run.need(CLUSTER_STATS))
    reqs = [request_from_profile(p, table.names) for p in table.profiles]
    temps = sorted(set(SWEEP_TEMPERATURES) | {cfg.llm.temperature}) if run.sweep \
        else [cfg.llm.temperature]
    rows = []
    detail = {}
    for t in temps:
        llm = replace(cfg.llm, temperature=t)
        reports = interpret_clusters(llm, reqs)
        sub = "reports" if t == cfg.llm.temperature else f"reports/T{t}"
        run.note(write_reports(reports, run.out / sub))
        valid = sum(r.valid for r in reports)
        rows.append((t, quality_metrics(reports) if valid else None, len(reports)))
        detail[str(t)] = {"attempted": len(reports), "valid": valid}
    write_quality_metrics(rows, run.output("quality_metrics.csv"))
    run.current.detail = detail


def stage_report(run: Run) -> None:
    cfg = run.cfg
    cards = read_scores_csv(run.need(SCORES))
    streets = load_graph(*(run.need(f) for f in GRAPH_FILES))
    ids, emb, labels = read_embedding(run.need(EMBEDDING))
    table = read_cluster_statistics(run.need(CLUSTER_STATS))
    m, _ = _raw_matrix(run)
    city_of = dict(zip(m.bridge_ids, m.cities))

    pts = [project(GeoCoord(c.lat, c.lon), cfg.projection) for c in cards]
    xy = np.array([(p.x, p.y) for p in pts], dtype=float).reshape(-1, 2)
    segs = np.stack([streets.xy[streets.u], streets.xy[streets.v]], axis=1) if len(streets.u) \
        else np.zeros((0, 2, 2))
    failed = [c.snap_failed for c in cards]
    for col in (*SCORE_COLUMNS, "composite"):
        vals = [getattr(c, col) for c in cards]
        svg = plots.score_map(xy, vals, f"{cfg.city}: {col}", segs, failed)
        run.output(f"plots/score_map_{col}.svg").write_text(svg, encoding="utf-8")
    run.output("plots/umap_by_cluster.svg").write_text(
        plots.umap_scatter(emb, labels, f"{cfg.city}: UMAP by cluster"), encoding="utf-8")
    run.output("plots/umap_by_city.svg").write_text(
        plots.umap_scatter(emb, [city_of.get(i, "") for i in ids], f"{cfg.city}: UMAP by city",
                           by="city"), encoding="utf-8")
    sizes = {p.cluster_id: p.size for p in table.profiles}
    noise = int((labels < 0).sum())
    if noise:
        sizes[-1] = noise
    run.output("plots/cluster_sizes.svg").write_text(
        plots.cluster_bars(sizes, f"{cfg.city}: cluster sizes"), encoding="utf-8")

    def axis_values(p):
        pos = {n: j for j, n in enumerate(table.names)}
        return [float(p.z[pos[c]]) if c in pos else 0.0 for c in SCORE_COLUMNS]

    biggest = sorted(table.profiles, key=lambda p: (-p.size, p.cluster_id))[:4]
    run.output("plots/radar.svg").write_text(plots.radar(
        list(SCORE_COLUMNS), [(f"cluster {p.cluster_id}", axis_values(p)) for p in biggest],
        f"{cfg.city}: representative clusters"), encoding="utf-8")
    for p in table.profiles:
        run.output(f"plots/radar_cluster_{p.cluster_id}.svg").write_text(plots.radar(
            list(SCORE_COLUMNS), [(f"cluster {p.cluster_id}", axis_values(p))],
            f"{cfg.city}: cluster {p.cluster_id}"), encoding="utf-8")


STAGE_FUNCS = {
    "ingest": stage_ingest, "graph": stage_graph, "score": stage_score,
    "features": stage_features, "cluster": stage_cluster, "interpret": stage_interpret,
    "report": stage_report,
}


def parse_stages(text: str | None) -> list[str]:
    if not text:
        return list(STAGES)
    wanted = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in wanted if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; choose from {list(STAGES)}")
    return [s for s in STAGES if s in wanted]


def _write_manifest(run: Run) -> Path:
    path = run.out / MANIFEST
    old = {}
    if path.is_file():
        try:
            old = {s["name"]: s for s in json.loads(path.read_text(encoding="utf-8"))["stages"]}
        except (ValueError, KeyError, TypeError):
            old = {}
    for name, rec in run.records.items():
        old[name] = {"name": name, "inputs": rec.inputs, "outputs": rec.outputs,
                     "seconds": round(rec.seconds, 4), "detail": rec.detail}
    cfg = run.cfg
    doc = {"config": str(cfg.source_path) if cfg.source_path else None, "city": cfg.city,
           "seed": cfg.rng_seed, "stages": [old[s] for s in STAGES if s in old]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n", encoding="utf-8")
    return path


def run_pipeline(cfg: PipelineConfig, stages: list[str] | None = None, sweep: bool = False) -> dict:
    """Run ``stages`` (all by default) in chain order and return the manifest document."""
    run = Run(cfg, sweep)
    run.out.mkdir(parents=True, exist_ok=True)
    try:
        for name in stages or STAGES:
            run.current = run.records[name] = StageRecord(name)
            t0 = time.perf_counter()
            log.info("stage %s", name)
            STAGE_FUNCS[name](run)
            run.current.seconds = time.perf_counter() - t0
    finally:
        done = {k: v for k, v in run.records.items() if v.outputs}
        run.records = done
        path = _write_manifest(run)
    return json.loads(path.read_text(encoding="utf-8"))


def run(config_path, stages: str | None = None, seed: int | None = None,
        sweep: bool = False) -> dict:
    cfg = load_config(config_path)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return run_pipeline(cfg, parse_stages(stages), sweep)
