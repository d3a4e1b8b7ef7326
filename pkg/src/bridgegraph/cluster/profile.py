from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..features import FeatureMatrix


@dataclass
class ClusterProfile:
    cluster_id: int
    size: int
    city_pct: dict[str, float]
    mean: np.ndarray
    std: np.ndarray
    z: np.ndarray  # cluster mean under the global statistics

    def top_features(self, names: list[str], k: int = 8) -> list[tuple[str, float]]:
        order = sorted(range(len(names)), key=lambda j: (-abs(self.z[j]), j))[:k]
        return [(names[j], float(self.z[j])) for j in order]


@dataclass
class ClusterProfileTable:
    names: list[str]
    cities: list[str]
    profiles: list[ClusterProfile]
    noise: int


def profile_clusters(labels: np.ndarray, m: FeatureMatrix) -> ClusterProfileTable:
    """Per-cluster raw-value mean/std and the z-score of each cluster mean."""
    labels = np.asarray(labels)
    if len(labels) != len(m.raw):
        raise ValueError("labels and feature rows are not aligned")
    keep = m.retained if m.retained is not None else np.ones(len(m.names), dtype=bool)
    names = [n for n, k in zip(m.names, keep) if k]
    x = m.raw[:, keep]
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    cities = sorted(set(m.cities)) if m.cities else []
    city_arr = np.array(m.cities) if m.cities else np.array([""] * len(labels))
    out = []
    for c in sorted(set(labels.tolist()) - {-1}):
        rows = labels == c
        sub = x[rows]
        cm = sub.mean(axis=0)
        pct = {city: 100.0 * float((city_arr[rows] == city).sum()) / int(rows.sum())
               for city in cities}
        z = np.where(sd > 0, (cm - mu) / np.where(sd > 0, sd, 1.0), 0.0)
        out.append(ClusterProfile(int(c), int(rows.sum()), pct, cm, sub.std(axis=0), z))
    return ClusterProfileTable(names, cities, out, int((labels == -1).sum()))


def write_cluster_statistics(t: ClusterProfileTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["cluster_id", "size", *(f"{c}_pct" for c in t.cities)]
        for n in t.names:
            head += [f"{n}_mean", f"{n}_std", f"{n}_z"]
        w.writerow(head)
        for p in t.profiles:
            row = [p.cluster_id, p.size, *(f"{p.city_pct[c]:.4f}" for c in t.cities)]
            for j in range(len(t.names)):
                row += [repr(float(p.mean[j])), repr(float(p.std[j])), repr(float(p.z[j]))]
            w.writerow(row)


def write_embedding(ids, emb: np.ndarray, labels: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bridge_id", "x", "y", "cluster"])
        for bid, (x, y), c in zip(ids, emb, labels):
            w.writerow([bid, repr(float(x)), repr(float(y)), int(c)])


def read_embedding(path) -> tuple[list[int], np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [int(r["bridge_id"]) for r in rows]
    emb = np.array([(float(r["x"]), float(r["y"])) for r in rows]).reshape(-1, 2)
    return ids, emb, np.array([int(r["cluster"]) for r in rows], dtype=np.int64)


def read_cluster_statistics(path) -> ClusterProfileTable:
    """Inverse of ``write_cluster_statistics``; the noise count is not stored and reads as 0."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    head = rows[0]
    cities = [h[:-4] for h in head[2:] if h.endswith("_pct")]
    start = 2 + len(cities)
    names = [h[:-5] for h in head[start::3]]
    profiles = []
    for r in rows[1:]:
        vals = np.array([float(v) for v in r[start:]], dtype=float).reshape(-1, 3)
        pct = {c: float(v) for c, v in zip(cities, r[2:start])}
        profiles.append(ClusterProfile(int(r[0]), int(r[1]), pct, vals[:, 0], vals[:, 1], vals[:, 2]))
    return ClusterProfileTable(names, cities, profiles, 0)
