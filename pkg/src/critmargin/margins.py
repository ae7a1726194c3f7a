"""
Proxy-to-criticality density fits, percentile curves and safety-margin tables.

For each perturbation length n the (proxy, c_star) tuples are smoothed by a
2-D Gaussian KDE on a 200 x 200 grid.  Every proxy column is normalized to a
conditional distribution of true criticality, from which mean, median and
beta-percentile curves are read.  The percentile curves are made
non-decreasing in the proxy and compiled into a lookup table answering
"largest n whose every prefix length keeps the percentile below zeta".
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .collect import DataTuple
from .errors import BuildError, FitError, SnapshotFormatError
from .stats import (
    effective_sample_size,
    percentile_error_bounds,
    sample_stdev_bessel,
    scott_bandwidth,
    t_quantile_two_sided,
)
from .truecrit import SamplingConfig

__all__ = [
    "GRID_BINS",
    "KdeGrid",
    "CurveSet",
    "MarginTable",
    "filter_top_proxy",
    "fit_kde",
    "enforce_monotone",
    "build_margin_table",
    "query_margin",
    "margin_error_report",
    "fit_margin_table",
    "config_digest",
]

GRID_BINS = 200
PAD_BANDWIDTHS = 3.0
FLOOR_DOF = 10**6  # "large N" for the vertical bandwidth floor
MIN_TUPLES = 10
TABLE_FORMAT = "critmargin.margin_table"
TABLE_VERSION = 1


@dataclass(frozen=True)
class KdeGrid:
    p_edges: np.ndarray  # 201
    c_edges: np.ndarray  # 201
    h_p: float
    h_c: float
    density: np.ndarray  # [c_bin, p_bin]; each column sums to 1

    @property
    def p_centers(self) -> np.ndarray:
        return 0.5 * (self.p_edges[:-1] + self.p_edges[1:])

    @property
    def c_centers(self) -> np.ndarray:
        return 0.5 * (self.c_edges[:-1] + self.c_edges[1:])


@dataclass(frozen=True)
class CurveSet:
    n: int
    mean_curve: np.ndarray
    median_curve: np.ndarray
    percentile_curve: np.ndarray
    beta: float


def filter_top_proxy(tuples: Sequence[DataTuple], fraction: float) -> list[DataTuple]:
    """Drop the ceil(fraction * count) tuples with the largest proxies.

    Equal proxies are ordered by (episode_id, t), lowest removed first.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    k = math.ceil(fraction * len(tuples) - 1e-9)
    if k <= 0:
        return list(tuples)
    order = sorted(range(len(tuples)), key=lambda i: (-tuples[i].proxy, tuples[i].episode_id, tuples[i].t))
    drop = set(order[:k])
    return [tup for i, tup in enumerate(tuples) if i not in drop]


def _column_quantile(cdf: np.ndarray, centers: np.ndarray, q: float) -> np.ndarray:
    # smallest bin center whose cumulative mass reaches q; the last bin
    # absorbs rounding shortfalls
    hit = cdf >= q
    idx = np.where(hit.any(axis=0), hit.argmax(axis=0), cdf.shape[0] - 1)
    return centers[idx]


def fit_kde(
    tuples: Sequence[DataTuple],
    n: int,
    beta: float = 0.95,
    sampling: SamplingConfig | None = None,
    bandwidth_overrides: Mapping[str, float] | None = None,
) -> tuple[KdeGrid, CurveSet]:
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    sampling = sampling or SamplingConfig()
    if len(tuples) < MIN_TUPLES:
        raise FitError(f"need at least {MIN_TUPLES} tuples to fit a density, got {len(tuples)}")
    try:
        est = [tup.per_n[n] for tup in tuples]
    except KeyError:
        raise FitError(f"some tuples lack an estimate for n={n}") from None
    p = np.array([tup.proxy for tup in tuples], dtype=float)
    c = np.array([e.c_star for e in est], dtype=float)
    m = len(p)
    p_min, p_max = float(p.min()), float(p.max())
    if not p_max > p_min:
        raise FitError(
            f"all {m} proxies equal {p_min:.6g}; collect more data (uniform-mode episodes spread the proxy axis)"
        )

    overrides = dict(bandwidth_overrides or {})
    unknown = set(overrides) - {"h_p", "h_c"}
    if unknown:
        raise ValueError(f"unknown bandwidth override(s): {sorted(unknown)}")
    h_p = overrides.get("h_p") or scott_bandwidth(sample_stdev_bessel(p), m)
    if "h_c" in overrides:
        h_c = overrides["h_c"]
    else:
        floor = sampling.eps_sampling_target / t_quantile_two_sided(sampling.alpha, FLOOR_DOF)
        h_c = max(scott_bandwidth(sample_stdev_bessel(c), m), floor)
        loose = [sampling.half_width(e.stdev, e.trials) for e in est if not e.converged and e.trials >= 2]
        if loose:
            h_c = max(h_c, max(loose))
    if not (h_p > 0 and h_c > 0 and math.isfinite(h_p) and math.isfinite(h_c)):
        raise FitError(f"bandwidths must be positive and finite (h_p={h_p}, h_c={h_c})")

    pad = PAD_BANDWIDTHS * h_c
    p_edges = np.linspace(p_min, p_max, GRID_BINS + 1)
    c_edges = np.linspace(float(c.min()) - pad, float(c.max()) + pad, GRID_BINS + 1)
    grid = KdeGrid(p_edges, c_edges, float(h_p), float(h_c), np.empty(0))
    pc, cc = grid.p_centers, grid.c_centers

    # Separable kernels.  Each proxy column is rescaled by its largest
    # kernel weight so far-away columns never underflow to zero mass.
    log_wp = -0.5 * ((pc[None, :] - p[:, None]) / h_p) ** 2  # [tuple, p_bin]
    wp = np.exp(log_wp - log_wp.max(axis=0, keepdims=True))
    wc = np.exp(-0.5 * ((cc[None, :] - c[:, None]) / h_c) ** 2)  # [tuple, c_bin]
    raw = wc.T @ wp  # [c_bin, p_bin]
    density = raw / raw.sum(axis=0, keepdims=True)

    grid = KdeGrid(p_edges, c_edges, float(h_p), float(h_c), density)
    cdf = np.cumsum(density, axis=0)
    curves = CurveSet(
        n=n,
        mean_curve=cc @ density,
        median_curve=_column_quantile(cdf, cc, 0.5),
        percentile_curve=_column_quantile(cdf, cc, beta),
        beta=beta,
    )
    return grid, curves


def enforce_monotone(curve: Sequence[float]) -> np.ndarray:
    """Running maximum from the lowest proxy bin upward."""
    return np.maximum.accumulate(np.asarray(curve, dtype=float))


@dataclass(frozen=True)
class MarginTable:
    beta: float
    s_set: tuple[int, ...]
    p_edges: np.ndarray
    adjusted_curves: dict[int, np.ndarray]
    provenance: dict = field(default_factory=dict)
    bandwidths: dict[int, dict[str, float]] = field(default_factory=dict)

    @property
    def p_centers(self) -> np.ndarray:
        return 0.5 * (self.p_edges[:-1] + self.p_edges[1:])

    def bin_index(self, proxy: float) -> int | None:
        """Nearest proxy bin, or None above the fitted range."""
        lo, hi = float(self.p_edges[0]), float(self.p_edges[-1])
        if math.isnan(proxy) or proxy > hi:
            return None
        if proxy <= lo:
            return 0
        bins = len(self.p_edges) - 1
        return min(int((proxy - lo) / (hi - lo) * bins), bins - 1)

    def margin_at_bin(self, j: int, zeta: float) -> int:
        margin = 0
        for n in self.s_set:
            if self.adjusted_curves[n][j] <= zeta:
                margin = n
            else:
                break
        return margin

    def margin_grid(self, zetas: Sequence[float]) -> np.ndarray:
        """Margins for every (proxy bin, zeta) pair, shape [bins, len(zetas)]."""
        z = np.asarray(zetas, dtype=float)
        out = np.zeros((len(self.p_edges) - 1, z.size), dtype=np.int64)
        ok = np.ones_like(out, dtype=bool)
        for n in self.s_set:
            ok &= self.adjusted_curves[n][:, None] <= z[None, :]
            out[ok] = n
        return out

    def max_curve_value(self) -> float:
        return float(max(np.max(c) for c in self.adjusted_curves.values()))

    def to_json(self) -> str:
        doc = {
            "format": TABLE_FORMAT,
            "version": TABLE_VERSION,
            "beta": self.beta,
            "s_set": list(self.s_set),
            "p_edges": [float(x) for x in self.p_edges],
            "adjusted_curves": {str(n): [float(x) for x in self.adjusted_curves[n]] for n in self.s_set},
            "bandwidths": {str(n): dict(sorted(b.items())) for n, b in sorted(self.bandwidths.items())},
            "provenance": self.provenance,
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MarginTable":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SnapshotFormatError(f"margin table is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != TABLE_FORMAT:
            raise SnapshotFormatError("not a critmargin margin table")
        if doc.get("version") != TABLE_VERSION:
            raise SnapshotFormatError(f"unsupported margin table version {doc.get('version')!r}")
        try:
            s_set = tuple(int(n) for n in doc["s_set"])
            p_edges = np.array(doc["p_edges"], dtype=float)
            curves = {int(n): np.array(v, dtype=float) for n, v in doc["adjusted_curves"].items()}
            bandwidths = {int(n): {k: float(x) for k, x in b.items()} for n, b in doc.get("bandwidths", {}).items()}
            table = cls(float(doc["beta"]), s_set, p_edges, curves, doc.get("provenance", {}), bandwidths)
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotFormatError(f"malformed margin table: {exc}") from exc
        _check_table(table)
        return table

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MarginTable":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _check_table(table: MarginTable) -> None:
    bins = len(table.p_edges) - 1
    if bins < 1 or np.any(np.diff(table.p_edges) <= 0):
        raise BuildError("p_edges must be strictly ascending with at least two entries")
    if not table.s_set or any(a >= b for a, b in zip(table.s_set, table.s_set[1:])) or table.s_set[0] < 1:
        raise BuildError(f"s_set must be strictly ascending positive integers, got {table.s_set}")
    for n in table.s_set:
        curve = table.adjusted_curves.get(n)
        if curve is None or curve.shape != (bins,):
            raise BuildError(f"curve for n={n} missing or not of length {bins}")
        if np.any(np.diff(curve) < 0):
            raise BuildError(f"curve for n={n} is not non-decreasing")


def build_margin_table(
    curves: Mapping[int, CurveSet | Sequence[float]],
    s_set: Iterable[int],
    p_edges: Sequence[float],
    beta: float = 0.95,
    provenance: Mapping | None = None,
    bandwidths: Mapping[int, Mapping[str, float]] | None = None,
    curve_edges: Mapping[int, Sequence[float]] | None = None,
) -> MarginTable:
    """Compile per-n percentile curves into a margin lookup.

    Curves are passed through :func:`enforce_monotone`, which leaves
    already-adjusted curves unchanged.  ``curve_edges`` optionally gives the
    proxy edges each curve was fitted on; any mismatch with ``p_edges`` is a
    :class:`BuildError`.
    """
    s = tuple(int(n) for n in s_set)
    edges = np.asarray(p_edges, dtype=float)
    if curve_edges:
        for n, e in curve_edges.items():
            e = np.asarray(e, dtype=float)
            if e.shape != edges.shape or not np.array_equal(e, edges):
                raise BuildError(f"curve for n={n} was fitted on different proxy edges")
    adjusted = {}
    for n in s:
        if n not in curves:
            raise BuildError(f"no percentile curve for n={n}")
        cv = curves[n]
        raw = cv.percentile_curve if isinstance(cv, CurveSet) else cv
        adjusted[n] = enforce_monotone(raw)
    table = MarginTable(
        float(beta), s, edges, adjusted, dict(provenance or {}),
        {int(n): dict(b) for n, b in (bandwidths or {}).items()},
    )
    _check_table(table)
    return table


def query_margin(table: MarginTable, proxy: float, zeta: float) -> int:
    """Largest n in S whose every prefix length keeps the percentile <= zeta.

    Proxies above the fitted range return 0; proxies below it use the first bin.
    """
    j = table.bin_index(float(proxy))
    if j is None:
        return 0
    return table.margin_at_bin(j, float(zeta))


def margin_error_report(
    table: MarginTable, tuples: Sequence[DataTuple], alpha: float = 0.95
) -> dict[int, dict]:
    """Percentile-error bound per n from the uniform-mode tuple count."""
    m_uniform = sum(1 for tup in tuples if tup.mode == "uniform")
    p_range = float(table.p_edges[-1] - table.p_edges[0])
    report = {}
    for n in table.s_set:
        h_p = table.bandwidths.get(n, {}).get("h_p")
        entry = {"h_p": h_p, "m_uniform": m_uniform, "d_estimate": None,
                 "epsilon_percentile_bound": None, "epsilon_percentile_loose": None,
                 "normal_approx_ok": False}
        if h_p and m_uniform > 0:
            d = effective_sample_size(m_uniform, h_p, p_range, "gaussian", boundary_halving=True)
            b = percentile_error_bounds(d, table.beta, alpha)
            entry.update(d_estimate=d, epsilon_percentile_bound=b.tight,
                         epsilon_percentile_loose=b.loose, normal_approx_ok=b.normal_approx_ok)
        report[n] = entry
    return report


def config_digest(config: Mapping) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def fit_margin_table(
    tuples: Sequence[DataTuple],
    s_set: Iterable[int],
    beta: float = 0.95,
    sampling: SamplingConfig | None = None,
    filter_fraction: float = 0.05,
    provenance: Mapping | None = None,
    bandwidth_overrides: Mapping[str, float] | None = None,
) -> tuple[MarginTable, dict[int, tuple[KdeGrid, CurveSet]]]:
    """Filter, fit every n, and build the table; also returns the per-n fits."""
    kept = filter_top_proxy(tuples, filter_fraction)
    fits = {n: fit_kde(kept, n, beta, sampling, bandwidth_overrides) for n in s_set}
    first = next(iter(fits.values()))[0]
    table = build_margin_table(
        {n: cs for n, (_, cs) in fits.items()},
        s_set,
        first.p_edges,
        beta,
        provenance,
        {n: {"h_p": g.h_p, "h_c": g.h_c} for n, (g, _) in fits.items()},
        {n: g.p_edges for n, (g, _) in fits.items()},
    )
    return table, fits
