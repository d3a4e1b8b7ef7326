"""Planar projection and exact nearest-neighbour queries.

Geographic coordinates are projected with a Transverse Mercator (Krueger
n-series, 6th order, GRS80 ellipsoid) so every downstream distance is in
metres.  :class:`SpatialIndex` is a 2-D KD-tree built by recursive median
splits; queries are exact and ties are broken by ascending point index.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# GRS80 (JGD2011 uses it)
GRS80_A = 6378137.0
GRS80_F = 1.0 / 298.257222101

MAX_LON_OFFSET_DEG = 4.0


class ProjectionDomainError(ValueError):
    """Point too far from the central meridian for the series expansion."""


@dataclass(frozen=True)
class GeoCoord:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"invalid geographic coordinate ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class PlanarCoord:
    x: float
    y: float


@dataclass(frozen=True)
class ProjectionParams:
    lat0: float
    lon0: float
    k0: float = 0.9999
    false_easting: float = 0.0
    false_northing: float = 0.0

    def __post_init__(self):
        if not (0.9 < self.k0 < 1.1):
            raise ValueError(f"scale factor k0={self.k0} outside (0.9, 1.1)")


def _series_coefficients(f: float):
    n = f / (2.0 - f)
    n2, n3, n4, n5, n6 = n**2, n**3, n**4, n**5, n**6
    big_a = (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0) / (1.0 + n)
    alpha = (
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    )
    beta = (
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512 + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105 - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    )
    e = math.sqrt(f * (2.0 - f))
    return big_a, alpha, beta, e


_A_RECT, _ALPHA, _BETA, _ECC = _series_coefficients(GRS80_F)


def _conformal_tan(phi: float) -> float:
    s = math.sin(phi)
    return math.sinh(math.atanh(s) - _ECC * math.atanh(_ECC * s))


def _meridian_xi(phi: float) -> float:
    # rectifying-like coordinate on the central meridian (eta = 0)
    xi_p = math.atan(_conformal_tan(phi))
    return xi_p + sum(a * math.sin(2 * (j + 1) * xi_p) for j, a in enumerate(_ALPHA))


def project(g: GeoCoord, p: ProjectionParams) -> PlanarCoord:
    """Forward Transverse Mercator; x is easting, y is northing (metres)."""
    dlon = g.lon - p.lon0
    if abs(dlon) > MAX_LON_OFFSET_DEG:
        raise ProjectionDomainError(
            f"longitude {g.lon} is {abs(dlon):.3f} deg from central meridian {p.lon0}"
        )
    phi = math.radians(g.lat)
    lam = math.radians(dlon)
    t = _conformal_tan(phi)
    xi_p = math.atan2(t, math.cos(lam))
    eta_p = math.atanh(math.sin(lam) / math.sqrt(1.0 + t * t))
    xi, eta = xi_p, eta_p
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += a * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)
    scale = p.k0 * GRS80_A * _A_RECT
    x = p.false_easting + scale * eta
    y = p.false_northing + scale * (xi - _meridian_xi(math.radians(p.lat0)))
    return PlanarCoord(x, y)


def _tau_from_conformal(tau_p: float) -> float:
    # Newton solve for tan(phi) given tan(conformal latitude)
    e2 = _ECC * _ECC
    tau = tau_p / (1.0 - e2)
    for _ in range(8):
        sig = math.sinh(_ECC * math.atanh(_ECC * tau / math.hypot(1.0, tau)))
        tau_p_i = tau * math.hypot(1.0, sig) - sig * math.hypot(1.0, tau)
        d_tau = ((tau_p - tau_p_i) / math.hypot(1.0, tau_p_i)
                 * (1.0 + (1.0 - e2) * tau * tau) / ((1.0 - e2) * math.hypot(1.0, tau)))
        tau += d_tau
        if abs(d_tau) < 1e-15 * max(1.0, abs(tau)):
            break
    return tau


def unproject(c: PlanarCoord, p: ProjectionParams) -> GeoCoord:
    """Inverse Transverse Mercator."""
    scale = p.k0 * GRS80_A * _A_RECT
    xi = (c.y - p.false_northing) / scale + _meridian_xi(math.radians(p.lat0))
    eta = (c.x - p.false_easting) / scale
    xi_p, eta_p = xi, eta
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= b * math.cos(2 * j * xi) * math.sinh(2 * j * eta)
    tau_p = math.sin(xi_p) / math.hypot(math.sinh(eta_p), math.cos(xi_p))
    lam = math.atan2(math.sinh(eta_p), math.cos(xi_p))
    phi = math.atan(_tau_from_conformal(tau_p))
    return GeoCoord(math.degrees(phi), p.lon0 + math.degrees(lam))


def project_many(coords: Iterable[GeoCoord], p: ProjectionParams) -> np.ndarray:
    pts = [project(g, p) for g in coords]
    if not pts:
        return np.empty((0, 2))
    return np.array([(q.x, q.y) for q in pts], dtype=float)


# ---------------------------------------------------------------------------
# KD-tree


@dataclass(frozen=True)
class _Node:
    lo: int  # slice into SpatialIndex.order
    hi: int
    left: int  # child node ids, -1 for a leaf
    right: int
    bbox: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


class SpatialIndex:
    """Immutable 2-D KD-tree over a fixed point list.

    The split dimension alternates x, y with depth; each split sorts the
    node's points by (coordinate, point index) and cuts at the median, so
    construction is deterministic for a fixed input order.
    """

    def __init__(self, points: np.ndarray, leaf_capacity: int = 16):
        if leaf_capacity < 1:
            raise ValueError("leaf_capacity must be >= 1")
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        self.points = pts
        self.leaf_capacity = leaf_capacity
        self.order = np.arange(len(pts), dtype=np.int64)
        self.nodes: list[_Node] = []
        if len(pts):
            self._build(0, len(pts), 0)

    def __len__(self) -> int:
        return len(self.points)

    def _build(self, lo: int, hi: int, depth: int) -> int:
        idx = self.order[lo:hi]
        sub = self.points[idx]
        bbox = (float(sub[:, 0].min()), float(sub[:, 1].min()),
                float(sub[:, 0].max()), float(sub[:, 1].max()))
        node_id = len(self.nodes)
        self.nodes.append(_Node(lo, hi, -1, -1, bbox))
        if hi - lo <= self.leaf_capacity:
            return node_id
        dim = depth % 2
        perm = np.lexsort((idx, sub[:, dim]))
        self.order[lo:hi] = idx[perm]
        mid = lo + (hi - lo) // 2
        left = self._build(lo, mid, depth + 1)
        right = self._build(mid, hi, depth + 1)
        self.nodes[node_id] = _Node(lo, hi, left, right, bbox)
        return node_id

    def depth(self) -> int:
        def walk(i: int) -> int:
            nd = self.nodes[i]
            if nd.left < 0:
                return 0
            return 1 + max(walk(nd.left), walk(nd.right))
        return walk(0) if self.nodes else 0

    def leaves(self) -> list[np.ndarray]:
        return [self.order[nd.lo:nd.hi] for nd in self.nodes if nd.left < 0]

    @staticmethod
    def _box_d2(bbox, qx: float, qy: float) -> float:
        dx = max(bbox[0] - qx, 0.0, qx - bbox[2])
        dy = max(bbox[1] - qy, 0.0, qy - bbox[3])
        return dx * dx + dy * dy

    def _leaf_d2(self, nd: _Node, qx: float, qy: float):
        idx = self.order[nd.lo:nd.hi]
        sub = self.points[idx]
        dx = sub[:, 0] - qx
        dy = sub[:, 1] - qy
        return idx, dx * dx + dy * dy

    def knn(self, q: Sequence[float], k: int) -> list[tuple[int, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if not self.nodes:
            return []
        qx, qy = float(q[0]), float(q[1])
        k = min(k, len(self.points))
        # max-heap of the k best as (-d2, -index)
        best: list[tuple[float, int]] = []
        frontier = [(0.0, 0)]
        while frontier:
            bd2, ni = heapq.heappop(frontier)
            if len(best) == k and bd2 > -best[0][0]:
                break
            nd = self.nodes[ni]
            if nd.left >= 0:
                for child in (nd.left, nd.right):
                    cd2 = self._box_d2(self.nodes[child].bbox, qx, qy)
                    if len(best) < k or cd2 <= -best[0][0]:
                        heapq.heappush(frontier, (cd2, child))
                continue
            idx, d2 = self._leaf_d2(nd, qx, qy)
            for i, dd in zip(idx.tolist(), d2.tolist()):
                if len(best) < k:
                    heapq.heappush(best, (-dd, -i))
                elif (dd, i) < (-best[0][0], -best[0][1]):
                    heapq.heapreplace(best, (-dd, -i))
        out = sorted((-nd2, -ni) for nd2, ni in best)
        return [(i, math.sqrt(d2)) for d2, i in out]

    def radius(self, q: Sequence[float], r: float) -> list[int]:
        if r < 0:
            raise ValueError("radius must be >= 0")
        if not self.nodes:
            return []
        qx, qy = float(q[0]), float(q[1])
        r2 = r * r if math.isfinite(r) else math.inf
        hits: list[int] = []
        stack = [0]
        while stack:
            nd = self.nodes[stack.pop()]
            if self._box_d2(nd.bbox, qx, qy) > r2:
                continue
            if nd.left >= 0:
                stack.append(nd.right)
                stack.append(nd.left)
                continue
            idx, d2 = self._leaf_d2(nd, qx, qy)
            hits.extend(idx[d2 <= r2].tolist())
        hits.sort()
        return hits


def build_index(points, leaf_capacity: int = 16) -> SpatialIndex:
    """Build a KD-tree over planar points (PlanarCoords or an (n, 2) array)."""
    if isinstance(points, np.ndarray):
        arr = points
    else:
        pts = list(points)
        arr = np.array([(p.x, p.y) if isinstance(p, PlanarCoord) else tuple(p) for p in pts],
                       dtype=float).reshape(-1, 2)
    return SpatialIndex(arr, leaf_capacity=leaf_capacity)


def _xy(q) -> tuple[float, float]:
    if isinstance(q, PlanarCoord):
        return q.x, q.y
    return float(q[0]), float(q[1])


def knn_query(idx: SpatialIndex, q, k: int) -> list[tuple[int, float]]:
    """``min(k, n)`` nearest points as (index, distance), ascending, ties by index."""
    return idx.knn(_xy(q), k)


def radius_query(idx: SpatialIndex, q, r: float) -> list[int]:
    """Indices of all points within distance ``r`` (inclusive), ascending."""
    return idx.radius(_xy(q), r)


def haversine_m(a: GeoCoord, b: GeoCoord, radius: float = 6371008.8) -> float:
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(h))
