import csv
import json
import shutil
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from bridgegraph import pipeline
from bridgegraph.cli import main
from bridgegraph.fixtures import generate_city
from bridgegraph.scoring import read_scores_csv

CORE = ["elements.json", "graph_nodes.txt", "graph_edges.txt", "graph_highway_nodes.txt",
        "graph_summary.json", "bridges_scored.csv", "bridges_scored.geojson", "features_raw.csv",
        "features.csv", "feature_stats.csv", "outliers.csv", "umap_embedding.csv",
        "cluster_statistics.csv", "quality_metrics.csv", "run_manifest.json",
        "plots/score_map_composite.svg", "plots/umap_by_cluster.svg", "plots/umap_by_city.svg",
        "plots/cluster_sizes.svg", "plots/radar.svg"]


def out_dir(cfg: Path) -> Path:
    return cfg.parent / f"{cfg.stem}_out"


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".svg", ".txt", ".geojson")}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    cfg = generate_city("synthetic-small", tmp_path_factory.mktemp("small"))
    assert main(["run", "--config", str(cfg)]) == 0
    return cfg


def test_all_artifacts_written(small):
    out = out_dir(small)
    for rel in CORE:
        assert (out / rel).is_file(), rel
    assert list((out / "reports").glob("cluster_*.md"))


def test_geojson_matches_csv(small):
    out = out_dir(small)
    doc = json.loads((out / "bridges_scored.geojson").read_text())
    assert doc["type"] == "FeatureCollection" and len(doc["features"]) == 50
    assert any(f["properties"]["snap_failed"] for f in doc["features"])
    cards = pipeline.read_geojson(out / "bridges_scored.geojson")
    rows = read_scores_csv(out / "bridges_scored.csv")
    for a, b in zip(cards, rows):
        assert a.bridge_id == b.bridge_id
        assert a.composite == pytest.approx(b.composite, abs=5e-5)
        lon, lat = (f for f in doc["features"] if f["properties"]["bridge_id"] == a.bridge_id
                    ).__next__()["geometry"]["coordinates"]
        assert (lat, lon) == pytest.approx((b.lat, b.lon), abs=1e-7)


def test_manifest_lists_outputs(small):
    out = out_dir(small)
    man = json.loads((out / "run_manifest.json").read_text())
    assert [s["name"] for s in man["stages"]] == list(pipeline.STAGES)
    listed = {o for s in man["stages"] for o in s["outputs"]}
    for rel in CORE[:-6]:
        assert rel in listed, rel
    for s in man["stages"]:
        assert s["seconds"] >= 0
        for o in s["outputs"]:
            assert (out / o).is_file()


def test_svgs_are_xml(small):
    svgs = list((out_dir(small) / "plots").glob("*.svg"))
    assert len(svgs) >= 10
    for p in svgs:
        ET.parse(p)


def test_cluster_statistics_shape(small):
    with open(out_dir(small) / "cluster_statistics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {"cluster_id", "size", "synthetic-small_pct"} <= set(rows[0])
    assert all(float(r["synthetic-small_pct"]) == 100.0 for r in rows)


def test_rerun_is_byte_identical(small, tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    assert snapshot(out_dir(cfg)) == snapshot(out_dir(small))


def test_partial_rerun_and_manifest_merge(small, tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    shutil.copytree(out_dir(small), out_dir(cfg))
    before = snapshot(out_dir(cfg))
    assert main(["run", "--config", str(cfg), "--stages", "cluster,interpret,report"]) == 0
    assert snapshot(out_dir(cfg)) == before
    man = json.loads((out_dir(cfg) / "run_manifest.json").read_text())
    assert [s["name"] for s in man["stages"]] == list(pipeline.STAGES)


def test_missing_artifact_exit_3(tmp_path, capsys):
    cfg = generate_city("synthetic-small", tmp_path)
    assert main(["run", "--config", str(cfg), "--stages", "interpret"]) == 3
    assert "cluster_statistics.csv" in capsys.readouterr().err


def test_unknown_stage_and_bad_config(tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    assert main(["run", "--config", str(cfg), "--stages", "plot"]) == 2
    assert main(["run", "--config", str(tmp_path / "none.yaml")]) == 2


def test_cache_miss_exit_4(tmp_path, capsys):
    cfg = generate_city("synthetic-small", tmp_path)
    shutil.rmtree(tmp_path / "cache")
    assert main(["run", "--config", str(cfg), "--stages", "ingest"]) == 4
    assert capsys.readouterr().err


def test_missing_dem_is_config_error(tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    (tmp_path / "synthetic-small_dem.asc").unlink()
    assert main(["run", "--config", str(cfg), "--stages", "ingest,graph"]) == 2


def test_sweep_writes_one_row_per_temperature(small, tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    shutil.copytree(out_dir(small), out_dir(cfg))
    assert main(["run", "--config", str(cfg), "--stages", "interpret", "--sweep-temperatures"]) == 0
    with open(out_dir(cfg) / "quality_metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["temperature"]) for r in rows] == [0.1, 0.3, 0.5, 0.7]
    assert all(float(r["completeness_rate"]) == 1.0 for r in rows)
    assert (out_dir(cfg) / "reports" / "T0.7").is_dir()


def test_down_endpoint_reports_invalid(small, tmp_path):
    cfg = generate_city("synthetic-small", tmp_path)
    shutil.copytree(out_dir(small), out_dir(cfg))
    cfg.write_text(cfg.read_text().replace("mock://five-section", "mock://down"))
    assert main(["run", "--config", str(cfg), "--stages", "interpret"]) == 0
    with open(out_dir(cfg) / "quality_metrics.csv", newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    assert float(row["completeness_rate"]) == 0.0 and int(row["n_valid"]) == 0
    assert row["length_variance_ratio"] == "" and int(row["n_attempted"]) > 0


def test_second_city_and_combined_clustering(small, tmp_path):
    cfg = generate_city("synthetic-hill", tmp_path)
    text = cfg.read_text()
    assert main(["run", "--config", str(cfg)]) == 0
    combined = tmp_path / "combined.yaml"
    combined.write_text(text + f"cluster:\n  combine_with: [{out_dir(small)}]\n")
    shutil.copytree(out_dir(cfg), out_dir(combined))
    assert main(["run", "--config", str(combined), "--stages", "cluster,interpret,report"]) == 0
    with open(out_dir(combined) / "cluster_statistics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {"synthetic-hill_pct", "synthetic-small_pct"} <= set(rows[0])
    n_emb = sum(1 for _ in open(out_dir(combined) / "umap_embedding.csv")) - 1
    assert n_emb == 100
    assert (out_dir(combined) / "features_combined.csv").is_file()


def test_fixtures_cli(tmp_path, capsys):
    assert main(["fixtures", "gen", "--city", "synthetic-hill", "--out", str(tmp_path)]) == 0
    assert Path(capsys.readouterr().out.strip()).is_file()
