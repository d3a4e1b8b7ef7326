"""Static SVG charts written as plain text.

Every coordinate is printed with two decimals, so the output is byte-stable
for a given input.  Four kinds exist: score maps, UMAP scatter plots coloured
by cluster or city, cluster-size bars and per-cluster radar charts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

PLOT_KINDS = ("score_map", "umap_scatter", "cluster_bars", "radar")
SCORE_GRADIENT = ("#2c7bb6", "#abd9e9", "#ffffbf", "#fdae61", "#d7191c")
NOISE_COLOR = "#9e9e9e"
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
           "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173",
           "#3182bd", "#e6550d", "#31a354", "#756bb1", "#636363", "#9c9ede")
STREET_COLOR = "#d9d9d9"

W, H, MARGIN = 640, 640, 40


@dataclass(frozen=True)
class PlotSpec:
    kind: str
    color_key: str = ""
    path: str | Path = ""

    def __post_init__(self):
        if self.kind not in PLOT_KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")


def _f(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def _hex(rgb) -> str:
    return "#" + "".join(f"{int(round(c)):02x}" for c in rgb)


def _rgb(h: str) -> tuple[int, int, int]:
    return int(h[1:3], 16), int(h[3:5], 16), int(h[5:7], 16)


def score_color(score: float) -> str:
    """Piecewise-linear colour on the five-stop gradient; 0 and 100 hit the end stops."""
    t = min(max(float(score), 0.0), 100.0) / 100.0 * (len(SCORE_GRADIENT) - 1)
    i = min(int(math.floor(t)), len(SCORE_GRADIENT) - 2)
    f = t - i
    if f == 0.0:
        return SCORE_GRADIENT[i]
    if f == 1.0:
        return SCORE_GRADIENT[i + 1]
    a, b = _rgb(SCORE_GRADIENT[i]), _rgb(SCORE_GRADIENT[i + 1])
    return _hex(tuple(x + (y - x) * f for x, y in zip(a, b)))


def cluster_color(label: int) -> str:
    return NOISE_COLOR if label < 0 else PALETTE[label % len(PALETTE)]


def category_colors(values) -> dict[str, str]:
    return {v: PALETTE[i % len(PALETTE)] for i, v in enumerate(sorted(set(values)))}


class _Frame:
    """Affine map from data coordinates to the drawing area, y pointing up."""

    def __init__(self, pts: np.ndarray):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        if len(pts):
            lo, hi = pts.min(axis=0), pts.max(axis=0)
        else:
            lo, hi = np.zeros(2), np.ones(2)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        self.lo = lo
        self.scale = min((W - 2 * MARGIN) / span[0], (H - 2 * MARGIN) / span[1])

    def __call__(self, x, y):
        return (MARGIN + (x - self.lo[0]) * self.scale,
                H - MARGIN - (y - self.lo[1]) * self.scale)


def _doc(body: list[str], title: str) -> str:
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>',
        f'<text x="{W // 2}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="16">{escape(title)}</text>',
        *body,
        "</svg>",
    ]) + "\n"


def _legend(entries: list[tuple[str, str]]) -> list[str]:
    out = []
    for i, (label, color) in enumerate(entries):
        y = 44 + 16 * i
        out.append(f'<rect x="{W - 150}" y="{y - 10}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - 134}" y="{y}" font-family="sans-serif" font-size="11">'
                   f'{escape(label)}</text>')
    return out


def score_map(points: np.ndarray, scores, title: str,
              segments: np.ndarray | None = None, snap_failed=None) -> str:
    """Bridges coloured by score over an optional street underlay.

    ``segments`` is an (m, 2, 2) array of street edges in the same planar frame.
    Snap-failed bridges are drawn hollow.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    segs = np.zeros((0, 2, 2)) if segments is None else np.asarray(segments, dtype=float)
    frame = _Frame(np.vstack([points, segs.reshape(-1, 2)]))
    failed = snap_failed if snap_failed is not None else [False] * len(points)
    body = ['<g stroke="%s" stroke-width="1">' % STREET_COLOR]
    for (x0, y0), (x1, y1) in segs:
        a, b = frame(x0, y0), frame(x1, y1)
        body.append(f'<line x1="{_f(a[0])}" y1="{_f(a[1])}" x2="{_f(b[0])}" y2="{_f(b[1])}"/>')
    body.append("</g>")
    for (x, y), s, bad in zip(points, scores, failed):
        px, py = frame(x, y)
        c = score_color(s)
        fill = f'fill="none" stroke="{c}"' if bad else f'fill="{c}" stroke="#333333"'
        body.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="5" {fill} stroke-width="0.5"/>')
    stops = [("0", SCORE_GRADIENT[0]), ("25", SCORE_GRADIENT[1]), ("50", SCORE_GRADIENT[2]),
             ("75", SCORE_GRADIENT[3]), ("100", SCORE_GRADIENT[4])]
    return _doc(body + _legend(stops), title)


def umap_scatter(emb: np.ndarray, keys, title: str, by: str = "cluster") -> str:
    """Embedding scatter; ``keys`` are cluster labels (by="cluster") or city names (by="city")."""
    emb = np.asarray(emb, dtype=float).reshape(-1, 2)
    frame = _Frame(emb)
    if by == "cluster":
        labels = [int(k) for k in keys]
        colors = [cluster_color(k) for k in labels]
        legend = [("noise" if k < 0 else f"cluster {k}", cluster_color(k)) for k in sorted(set(labels))]
    elif by == "city":
        cmap = category_colors(keys)
        colors = [cmap[k] for k in keys]
        legend = list(cmap.items())
    else:
        raise ValueError(f"unknown colour key {by!r}")
    body = []
    for (x, y), c in zip(emb, colors):
        px, py = frame(x, y)
        body.append(f'<circle cx="{_f(px)}" cy="{_f(py)}" r="4" fill="{c}" fill-opacity="0.85"/>')
    return _doc(body + _legend(legend), title)


def cluster_bars(sizes: dict[int, int], title: str) -> str:
    """One bar per cluster id, noise (-1) last in grey."""
    order = sorted((k for k in sizes if k >= 0)) + ([-1] if -1 in sizes else [])
    top = max(sizes.values()) if sizes else 1
    n = max(len(order), 1)
    bw = (W - 2 * MARGIN) / n
    body = []
    for i, k in enumerate(order):
        h = (H - 2 * MARGIN - 20) * sizes[k] / top
        x = MARGIN + i * bw
        y = H - MARGIN - h
        body.append(f'<rect x="{_f(x + 0.1 * bw)}" y="{_f(y)}" width="{_f(0.8 * bw)}" '
                    f'height="{_f(h)}" fill="{cluster_color(k)}"/>')
        label = "noise" if k < 0 else str(k)
        body.append(f'<text x="{_f(x + bw / 2)}" y="{H - MARGIN + 14}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{escape(label)}</text>')
        body.append(f'<text x="{_f(x + bw / 2)}" y="{_f(y - 3)}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="10">{sizes[k]}</text>')
    return _doc(body, title)


def radar(axes: list[str], series: list[tuple[str, list[float]]], title: str,
          limit: float = 3.0) -> str:
    """Polygon per series over ``axes``; values are clipped to [-limit, limit]."""
    cx, cy, rmax = W / 2, H / 2 + 10, (min(W, H) - 2 * MARGIN) / 2 - 30
    k = len(axes)

    def pt(j, v):
        r = rmax * (min(max(v, -limit), limit) + limit) / (2 * limit)
        ang = -math.pi / 2 + 2 * math.pi * j / k
        return cx + r * math.cos(ang), cy + r * math.sin(ang)

    body = []
    for ring in (-limit, 0.0, limit):
        ring_pts = " ".join(f"{_f(x)},{_f(y)}" for x, y in (pt(j, ring) for j in range(k)))
        body.append(f'<polygon points="{ring_pts}" fill="none" stroke="#cccccc"/>')
    for j, name in enumerate(axes):
        x, y = pt(j, limit)
        lx, ly = pt(j, limit * 1.15)
        body.append(f'<line x1="{_f(cx)}" y1="{_f(cy)}" x2="{_f(x)}" y2="{_f(y)}" stroke="#cccccc"/>')
        body.append(f'<text x="{_f(lx)}" y="{_f(ly)}" text-anchor="middle" '
                    f'font-family="sans-serif" font-size="11">{escape(name)}</text>')
    legend = []
    for i, (label, values) in enumerate(series):
        c = PALETTE[i % len(PALETTE)]
        poly = " ".join(f"{_f(x)},{_f(y)}" for x, y in (pt(j, v) for j, v in enumerate(values)))
        body.append(f'<polygon points="{poly}" fill="{c}" fill-opacity="0.2" stroke="{c}" '
                    f'stroke-width="2" data-series={quoteattr(label)}/>')
        legend.append((label, c))
    return _doc(body + _legend(legend), title)


def emit_plot(spec: PlotSpec, data: dict) -> Path:
    """Render ``spec.kind`` from keyword ``data`` and write it to ``spec.path``."""
    renderers = {"score_map": score_map, "umap_scatter": umap_scatter,
                 "cluster_bars": cluster_bars, "radar": radar}
    kwargs = dict(data)
    if spec.kind == "umap_scatter" and spec.color_key:
        kwargs.setdefault("by", spec.color_key)
    svg = renderers[spec.kind](**kwargs)
    path = Path(spec.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path
