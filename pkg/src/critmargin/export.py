"""CSV and SVG exports of fitted densities, margin heatmaps and proxy histograms."""
from __future__ import annotations

import os
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .collect import DataTuple
from .margins import KdeGrid, MarginTable

__all__ = [
    "HEATMAP_ZETAS",
    "HISTOGRAM_BINS",
    "heatmap_zetas",
    "write_kde_csv",
    "write_heatmap_csv",
    "write_histogram_csv",
    "heatmap_svg",
    "write_heatmap_svg",
]

HEATMAP_ZETAS = 100
HISTOGRAM_BINS = 50

# one colour per margin rank; 0 is the "no safe perturbation" region
_PALETTE = ["#b2182b", "#ef8a62", "#fddbc7", "#d1e5f0", "#67a9cf", "#2166ac", "#053061", "#40004b"]


def _num(x: float) -> str:
    return repr(float(x))


def heatmap_zetas(table: MarginTable, count: int = HEATMAP_ZETAS) -> np.ndarray:
    top = table.max_curve_value()
    if not top > 0:
        top = 1.0
    return np.linspace(0.0, top, count)


def write_kde_csv(grid: KdeGrid, path: str | os.PathLike) -> None:
    """One row per grid cell: proxy bin center, criticality bin center, density."""
    pc, cc = grid.p_centers, grid.c_centers
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("proxy_center,c_center,density\n")
        for j, p in enumerate(pc):
            ps = _num(p)
            col = grid.density[:, j]
            fh.writelines(f"{ps},{_num(c)},{_num(d)}\n" for c, d in zip(cc, col))


def write_heatmap_csv(table: MarginTable, path: str | os.PathLike, zetas: Sequence[float] | None = None) -> None:
    z = heatmap_zetas(table) if zetas is None else np.asarray(zetas, dtype=float)
    grid = table.margin_grid(z)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("proxy_bin_center,zeta,margin\n")
        for j, p in enumerate(table.p_centers):
            ps = _num(p)
            fh.writelines(f"{ps},{_num(zz)},{int(m)}\n" for zz, m in zip(z, grid[j]))


def write_histogram_csv(tuples: Sequence[DataTuple], path: str | os.PathLike, bins: int = HISTOGRAM_BINS) -> None:
    """Proxy histogram with equal-width bins, split by collection mode."""
    p = np.array([t.proxy for t in tuples], dtype=float)
    lo, hi = (float(p.min()), float(p.max())) if p.size else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {}
    for mode in ("natural", "uniform"):
        sel = np.array([t.proxy for t in tuples if t.mode == mode], dtype=float)
        counts[mode] = np.histogram(sel, bins=edges)[0]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_left,bin_right,count,count_natural,count_uniform\n")
        for k in range(bins):
            a, b = int(counts["natural"][k]), int(counts["uniform"][k])
            fh.write(f"{_num(edges[k])},{_num(edges[k + 1])},{a + b},{a},{b}\n")


def heatmap_svg(table: MarginTable, title: str = "", zetas: Sequence[float] | None = None) -> str:
    """Standalone SVG of the margin over (proxy, tolerance) space."""
    z = heatmap_zetas(table) if zetas is None else np.asarray(zetas, dtype=float)
    grid = table.margin_grid(z)
    bins, rows = grid.shape
    left, top, pw, ph = 70, 30, 600, 400
    cw, rh = pw / bins, ph / rows
    colour = {0: _PALETTE[0]}
    for i, n in enumerate(table.s_set, start=1):
        colour[n] = _PALETTE[min(i, len(_PALETTE) - 1)]

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + pw + 140}" height="{top + ph + 60}" '
        'font-family="sans-serif" font-size="12">',
        f'<text x="{left}" y="18">{escape(title)}</text>',
    ]
    for j in range(bins):
        # merge runs of equal margin within a proxy column
        k = 0
        while k < rows:
            m = grid[j, k]
            end = k
            while end + 1 < rows and grid[j, end + 1] == m:
                end += 1
            y = top + ph - (end + 1) * rh
            out.append(
                f'<rect x="{left + j * cw:.3f}" y="{y:.3f}" width="{cw:.3f}" '
                f'height="{(end - k + 1) * rh:.3f}" fill="{colour[int(m)]}"/>'
            )
            k = end + 1
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    p0, p1 = float(table.p_edges[0]), float(table.p_edges[-1])
    out.append(f'<text x="{left}" y="{top + ph + 16}">{p0:.4g}</text>')
    out.append(f'<text x="{left + pw}" y="{top + ph + 16}" text-anchor="end">{p1:.4g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{top + ph + 40}" text-anchor="middle">proxy criticality</text>')
    out.append(f'<text x="{left - 6}" y="{top + ph}" text-anchor="end">{float(z[0]):.4g}</text>')
    out.append(f'<text x="{left - 6}" y="{top + 10}" text-anchor="end">{float(z[-1]):.4g}</text>')
    out.append(
        f'<text x="20" y="{top + ph / 2}" transform="rotate(-90 20 {top + ph / 2})" '
        'text-anchor="middle">tolerance (reward units)</text>'
    )
    lx = left + pw + 20
    for i, (n, col) in enumerate(sorted(colour.items())):
        y = top + i * 20
        out.append(f'<rect x="{lx}" y="{y}" width="14" height="14" fill="{col}"/>')
        out.append(f'<text x="{lx + 20}" y="{y + 12}">margin {n}</text>')
    out.append("</svg>\n")
    return "\n".join(out)


def write_heatmap_svg(table: MarginTable, path: str | os.PathLike, title: str = "") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(heatmap_svg(table, title))
