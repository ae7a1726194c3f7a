"""
Empirical checks of fitted margins.

* ``cross_validate`` measures how often held-out true criticalities fall
  under the beta-percentile curve fitted on the rest of the data.
* ``failure_proximity`` reads margins just before the agent fails and
  compares them with the average margin over whole episodes.
* ``gap_error_measure`` compares margins from a sparse set of perturbation
  lengths with margins from a denser set.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .agents import proxy_score_gap
from .collect import CollectionConfig, DataTuple, NEstimate, collect
from .envs import Env, EnvSpec
from .errors import ValidationError
from .margins import (
    MarginTable,
    build_margin_table,
    filter_top_proxy,
    fit_kde,
    fit_margin_table,
    query_margin,
)
from .stats import effective_sample_size, percentile_error_bounds
from .truecrit import SamplingConfig

__all__ = [
    "CoverageEntry",
    "CoverageReport",
    "ProximityStats",
    "ProximityReport",
    "GapReport",
    "cross_validate",
    "failure_proximity",
    "gap_errors",
    "gap_error_measure",
    "synthetic_tuples",
    "build_report",
    "coverage_text_table",
    "proximity_text_table",
    "REPORT_SCHEMA",
]


@dataclass(frozen=True)
class CoverageEntry:
    success_rate: float
    estimated_epsilon_percentile: float
    test_count: int
    successes: int
    epsilon_percentile_bound: float | None = None


@dataclass(frozen=True)
class CoverageReport:
    beta: float
    train_count: int
    per_n: dict[int, CoverageEntry]

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "train_count": self.train_count,
            "per_n": {str(n): asdict(e) for n, e in sorted(self.per_n.items())},
        }


def _split_by_mode(tuples: Sequence[DataTuple], train_fraction: float, seed: int | None):
    train, test = [], []
    for mode in ("natural", "uniform"):
        group = sorted((t for t in tuples if t.mode == mode), key=lambda t: (t.episode_id, t.t))
        if not group:
            continue
        if seed is not None:
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0 if mode == "natural" else 1]))
            group = [group[i] for i in rng.permutation(len(group))]
        k = int(round(train_fraction * len(group)))
        if k == 0 or k == len(group):
            raise ValidationError(f"{mode}-mode split is empty ({len(group)} tuples, train fraction {train_fraction})")
        train += group[:k]
        test += group[k:]
    if not train or not test:
        raise ValidationError("no tuples to split")
    return train, test


def cross_validate(
    tuples: Sequence[DataTuple],
    train_fraction: float = 0.8,
    beta: float = 0.95,
    filter_fraction: float = 0.05,
    seed: int | None = None,
    s_set: Iterable[int] | None = None,
    sampling: SamplingConfig | None = None,
    alpha: float = 0.95,
) -> CoverageReport:
    """Held-out coverage of raw (unadjusted) beta-percentile curves.

    The split is stratified by collection mode.  With ``seed=None`` the
    lowest episode ids of each mode form the training set; an integer seed
    shuffles each mode first.  The top-proxy filter touches the training
    split only.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    train, test = _split_by_mode(tuples, train_fraction, seed)
    ns = sorted(s_set) if s_set is not None else sorted(set.intersection(*(set(t.per_n) for t in tuples)))
    kept = filter_top_proxy(train, filter_fraction)
    m_uniform = sum(1 for t in kept if t.mode == "uniform")
    per_n = {}
    for n in ns:
        grid, curves = fit_kde(kept, n, beta, sampling)
        centers = grid.p_centers
        tp = np.array([t.proxy for t in test])
        j = np.abs(tp[:, None] - centers[None, :]).argmin(axis=1)
        tc = np.array([t.per_n[n].c_star for t in test])
        successes = int(np.count_nonzero(tc <= curves.percentile_curve[j]))
        rate = successes / len(test)
        bound = None
        if m_uniform:
            d = effective_sample_size(
                m_uniform, grid.h_p, float(grid.p_edges[-1] - grid.p_edges[0]), "gaussian", boundary_halving=True
            )
            bound = percentile_error_bounds(d, beta, alpha).tight
        per_n[n] = CoverageEntry(rate, beta - rate, len(test), successes, bound)
    return CoverageReport(beta, len(train), per_n)


@dataclass(frozen=True)
class ProximityStats:
    mean_margin: float
    stdev_margin: float
    count: int


@dataclass
class ProximityReport:
    zetas: list[float]
    offsets: list[int]
    episodes: int
    failures: int
    no_failures: bool
    per_offset: dict[tuple[float, int], ProximityStats]
    episode_average: dict[float, ProximityStats]
    top_fraction: float
    top_fraction_before_failure: float | None
    skipped_offsets: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def stats(s: ProximityStats | None):
            return None if s is None else asdict(s)

        return {
            "episodes": self.episodes,
            "failures": self.failures,
            "no_failures": self.no_failures,
            "top_fraction": self.top_fraction,
            "top_fraction_before_failure": self.top_fraction_before_failure,
            "skipped_offsets": {str(k): v for k, v in sorted(self.skipped_offsets.items())},
            "per_zeta": [
                {
                    "zeta": z,
                    "episode_average": stats(self.episode_average.get(z)),
                    "offsets": {str(k): stats(self.per_offset.get((z, k))) for k in self.offsets},
                }
                for z in self.zetas
            ],
        }


def _summary(values: Sequence[float]) -> ProximityStats:
    v = np.asarray(values, dtype=float)
    sd = float(np.std(v, ddof=1)) if v.size >= 2 else 0.0
    return ProximityStats(float(np.mean(v)), sd, int(v.size))


def failure_proximity(
    env_factory: Callable[[], Env] | EnvSpec,
    policy,
    table: MarginTable,
    episodes: int = 100,
    zetas: Sequence[float] = (),
    offsets: Sequence[int] = (1, 2, 4),
    top_fraction: float = 0.05,
    seed: int = 0,
    explore: float = 0.0,
) -> ProximityReport:
    """Margins at fixed step counts before each failure.

    Offset 1 is the decision whose action caused the failure.  With
    ``explore > 0`` each executed action is replaced by a uniform random one
    with that probability, which gives a deterministic policy on a
    deterministic environment varied episodes.  Proxies always come from
    ``policy``'s own scores.
    """
    if isinstance(env_factory, EnvSpec):
        env_factory = env_factory.make
    if not zetas:
        raise ValueError("at least one zeta is required")
    if not 0.0 <= explore <= 1.0:
        raise ValueError("explore must lie in [0, 1]")
    env = env_factory()
    offsets = sorted(int(k) for k in offsets)
    zetas = [float(z) for z in zetas]
    all_proxies: list[float] = []
    failure_traces: list[list[float]] = []
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), ep]))
        obs = env.reset(int(rng.integers(2**31)))
        proxies = []
        failed = False
        while not env.done:
            proxies.append(proxy_score_gap(policy.scores(obs)))
            a = policy.act(obs, rng)
            if explore and rng.random() < explore:
                a = int(rng.integers(env.action_count))
            out = env.step(a)
            failed = out.failure
            obs = out.observation
        all_proxies += proxies
        if failed:
            failure_traces.append(proxies)

    per_offset: dict[tuple[float, int], ProximityStats] = {}
    episode_average: dict[float, ProximityStats] = {}
    skipped = {k: 0 for k in offsets}
    top_stat = None
    if failure_traces:
        for z in zetas:
            pooled = [query_margin(table, p, z) for tr in failure_traces for p in tr]
            episode_average[z] = _summary(pooled)
            for k in offsets:
                vals = [query_margin(table, tr[-k], z) for tr in failure_traces if k <= len(tr)]
                if vals:
                    per_offset[(z, k)] = _summary(vals)
        for k in offsets:
            skipped[k] = sum(1 for tr in failure_traces if k > len(tr))
        ranked = sorted(all_proxies, reverse=True)
        threshold = ranked[max(1, math.ceil(top_fraction * len(ranked) - 1e-9)) - 1]
        top_stat = sum(1 for tr in failure_traces if tr[-1] >= threshold) / len(failure_traces)
    return ProximityReport(
        zetas, offsets, episodes, len(failure_traces), not failure_traces,
        per_offset, episode_average, top_fraction, top_stat, skipped,
    )


@dataclass(frozen=True)
class GapReport:
    zeta: float
    proxies: list[float]
    sparse_margins: list[int]
    dense_margins: list[int]

    @property
    def errors(self) -> list[int]:
        return [a - b for a, b in zip(self.sparse_margins, self.dense_margins)]

    def summary(self) -> dict:
        e = np.array(self.errors, dtype=float)
        values, counts = np.unique(e.astype(int), return_counts=True)
        return {
            "zeta": self.zeta,
            "points": len(self.errors),
            "mean": float(e.mean()) if e.size else None,
            "min": int(e.min()) if e.size else None,
            "max": int(e.max()) if e.size else None,
            "counts": {str(int(v)): int(c) for v, c in zip(values, counts)},
        }


def gap_errors(sparse: MarginTable, dense: MarginTable, proxies: Sequence[float], zeta: float) -> GapReport:
    """Sparse-minus-dense margin at each proxy."""
    ps = [float(p) for p in proxies]
    return GapReport(
        float(zeta), ps,
        [query_margin(sparse, p, zeta) for p in ps],
        [query_margin(dense, p, zeta) for p in ps],
    )


def gap_error_measure(
    env_factory: Callable[[], Env] | EnvSpec,
    policy,
    sparse_s: Sequence[int],
    dense_s: Sequence[int],
    sample_points: int,
    zeta: float,
    config: CollectionConfig,
    seed: int = 0,
    beta: float = 0.95,
    filter_fraction: float = 0.05,
    workers: int = 1,
    tuples: Sequence[DataTuple] | None = None,
) -> GapReport:
    """Collect for ``dense_s`` once, fit both sets, and compare margins.

    Pass ``tuples`` to reuse an existing dense collection.
    """
    if not set(sparse_s) <= set(dense_s):
        raise ValueError("sparse_s must be a subset of dense_s")
    if sample_points < 10:
        raise ValueError("sample_points must be at least 10")
    if tuples is None:
        cfg = CollectionConfig(
            tuple(sorted(dense_s)), config.episodes_natural, config.episodes_uniform,
            max(config.exclude_tail_steps, max(dense_s)), config.horizon, config.sampling, config.seed,
        )
        tuples = collect(env_factory, policy, cfg, workers).tuples
    sparse, _ = fit_margin_table(tuples, sorted(sparse_s), beta, config.sampling, filter_fraction)
    dense, _ = fit_margin_table(tuples, sorted(dense_s), beta, config.sampling, filter_fraction)
    rng = np.random.default_rng(seed)
    lo, hi = float(dense.p_edges[0]), float(dense.p_edges[-1])
    return gap_errors(sparse, dense, np.sort(rng.uniform(lo, hi, sample_points)), zeta)


def synthetic_tuples(
    m: int = 1000,
    s_set: Sequence[int] = (1, 2, 4, 8, 16, 32),
    seed: int = 0,
    uniform_share: float = 0.5,
) -> list[DataTuple]:
    """Tuples with a known conditional law of c_star given the proxy.

    Natural-mode proxies are Gamma(2, 0.15) clipped to [0, 1] (right-skewed);
    uniform-mode proxies are Uniform(0, 1).  For each n the criticality is
    Normal(mu, sigma) with mu = 0.5 * log2(2n) * p and sigma = 0.1 + 0.2 * p.
    """
    rng = np.random.default_rng(seed)
    m_uni = int(round(uniform_share * m))
    m_nat = m - m_uni
    p = np.concatenate([np.clip(rng.gamma(2.0, 0.15, m_nat), 0.0, 1.0), rng.uniform(0.0, 1.0, m_uni)])
    modes = ["natural"] * m_nat + ["uniform"] * m_uni
    out = []
    noise = {n: rng.standard_normal(m) for n in s_set}
    for i in range(m):
        per_n = {}
        for n in s_set:
            mu, sigma = synthetic_mean(p[i], n), synthetic_sigma(p[i])
            per_n[n] = NEstimate(float(mu + sigma * noise[n][i]), 1000, float(sigma), True)
        out.append(DataTuple(i, 0, modes[i], float(p[i]), per_n))
    return out


def synthetic_mean(p, n):
    return 0.5 * math.log2(2 * n) * p


def synthetic_sigma(p):
    return 0.1 + 0.2 * p


def coverage_text_table(report: CoverageReport, environment: str, policy: str) -> str:
    rows = [f"{'environment':<20} {'policy':<16} {'n':>4} {'est. eps_percentile':>20} {'tests':>6}"]
    for n, e in sorted(report.per_n.items()):
        rows.append(f"{environment:<20} {policy:<16} {n:>4} {e.estimated_epsilon_percentile:>20.3f} {e.test_count:>6}")
    return "\n".join(rows) + "\n"


def proximity_text_table(report: ProximityReport) -> str:
    if report.no_failures:
        return f"no failures in {report.episodes} episodes\n"
    head = f"{'zeta':>10} {'steps before failure':>22} {'mean margin':>12} {'stdev':>8}"
    rows = [head]
    for z in report.zetas:
        for k in report.offsets:
            s = report.per_offset.get((z, k))
            if s is not None:
                rows.append(f"{z:>10.4g} {k:>22} {s.mean_margin:>12.3f} {s.stdev_margin:>8.3f}")
        s = report.episode_average[z]
        rows.append(f"{z:>10.4g} {'average':>22} {s.mean_margin:>12.3f} {s.stdev_margin:>8.3f}")
    if report.top_fraction_before_failure is not None:
        rows.append(
            f"failures preceded by a top-{report.top_fraction:.0%} proxy: {report.top_fraction_before_failure:.3f}"
        )
    return "\n".join(rows) + "\n"


REPORT_FORMAT = "critmargin.report"

_NUM_OR_NULL = {"type": ["number", "null"]}
_STATS = {
    "type": ["object", "null"],
    "required": ["mean_margin", "stdev_margin", "count"],
    "properties": {"mean_margin": {"type": "number"}, "stdev_margin": {"type": "number"},
                   "count": {"type": "integer"}},
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "version", "environment", "policy", "coverage", "error_bounds", "proximity"],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "version": {"const": 1},
        "environment": {"type": "string"},
        "policy": {"type": "string"},
        "coverage": {
            "type": ["object", "null"],
            "required": ["beta", "train_count", "per_n"],
            "properties": {
                "beta": {"type": "number"},
                "train_count": {"type": "integer"},
                "per_n": {
                    "type": "object",
                    "additionalProperties": {
                        "type": "object",
                        "required": ["success_rate", "estimated_epsilon_percentile", "test_count"],
                        "properties": {
                            "success_rate": {"type": "number", "minimum": 0, "maximum": 1},
                            "estimated_epsilon_percentile": {"type": "number"},
                            "test_count": {"type": "integer", "minimum": 1},
                            "successes": {"type": "integer"},
                            "epsilon_percentile_bound": _NUM_OR_NULL,
                        },
                    },
                },
            },
        },
        "error_bounds": {
            "type": ["object", "null"],
            "additionalProperties": {
                "type": "object",
                "required": ["h_p", "m_uniform", "d_estimate", "epsilon_percentile_bound"],
                "properties": {
                    "h_p": _NUM_OR_NULL,
                    "m_uniform": {"type": "integer"},
                    "d_estimate": _NUM_OR_NULL,
                    "epsilon_percentile_bound": _NUM_OR_NULL,
                    "epsilon_percentile_loose": _NUM_OR_NULL,
                    "normal_approx_ok": {"type": "boolean"},
                },
            },
        },
        "proximity": {
            "type": ["object", "null"],
            "required": ["episodes", "failures", "no_failures", "per_zeta", "top_fraction_before_failure"],
            "properties": {
                "episodes": {"type": "integer"},
                "failures": {"type": "integer"},
                "no_failures": {"type": "boolean"},
                "top_fraction": {"type": "number"},
                "top_fraction_before_failure": _NUM_OR_NULL,
                "skipped_offsets": {"type": "object"},
                "per_zeta": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["zeta", "episode_average", "offsets"],
                        "properties": {
                            "zeta": {"type": "number"},
                            "episode_average": _STATS,
                            "offsets": {"type": "object", "additionalProperties": _STATS},
                        },
                    },
                },
            },
        },
    },
}


def build_report(
    environment: str,
    policy: str,
    coverage: CoverageReport | None = None,
    error_bounds: Mapping[int, Mapping] | None = None,
    proximity: ProximityReport | None = None,
) -> dict:
    return {
        "format": REPORT_FORMAT,
        "version": 1,
        "environment": environment,
        "policy": policy,
        "coverage": coverage.to_dict() if coverage else None,
        "error_bounds": {str(n): dict(v) for n, v in sorted(error_bounds.items())} if error_bounds else None,
        "proximity": proximity.to_dict() if proximity else None,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def table_from_curves(curves: Mapping[int, Sequence[float]], p_edges: Sequence[float], beta: float = 0.95) -> MarginTable:
    """Margin table straight from per-n percentile curves (for constructed examples)."""
    return build_margin_table(curves, sorted(curves), p_edges, beta)
