"""Command-line front end: ``critmargin {train,collect,fit,margin,validate,report}``.

Exit codes: 0 success, 1 internal error, 2 missing or invalid input
artifact (including the config file), 3 statistical degeneracy.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .agents import QTable, SoftmaxPolicy, GreedyPolicy, evaluate_policy, train_q_learning
from .collect import collect, read_tuples, write_tuples
from .config import RunConfig, load_config
from .errors import (
    CritMarginError,
    FitError,
    SnapshotFormatError,
    TupleFormatError,
    ValidationError,
    ConfigurationError,
)
from .export import write_heatmap_csv, write_heatmap_svg, write_histogram_csv, write_kde_csv
from .margins import MarginTable, config_digest, fit_margin_table, margin_error_report, query_margin
from .validate import (
    REPORT_SCHEMA,
    build_report,
    coverage_text_table,
    cross_validate,
    failure_proximity,
    proximity_text_table,
    report_json,
)

log = logging.getLogger("critmargin")

EXIT_OK, EXIT_INTERNAL, EXIT_ARTIFACT, EXIT_DEGENERATE = 0, 1, 2, 3

QTABLE_FILE = "qtable.json"
TUPLES_FILE = "tuples.jsonl"
TABLE_FILE = "margin_table.json"
REPORT_FILE = "report.json"


class ArtifactError(CritMarginError):
    """A required input file is missing or unreadable."""


def _configure_logging() -> None:
    level = os.environ.get("CRITMARGIN_LOG", "WARNING").strip().upper()
    value = int(level) if level.isdigit() else getattr(logging, level, logging.WARNING)
    logging.basicConfig(level=value, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    return cfg.with_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out", None))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _input(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ArtifactError(f"{what} not found: {path}")
    return path


def _load_policy(cfg: RunConfig, path: Path):
    q = QTable.load(_input(path, "q-table"))
    pol = cfg["policy"]
    if pol["kind"] == "softmax":
        return q, SoftmaxPolicy(q, pol["temperature"])
    return q, GreedyPolicy(q)


def _qtable_path(cfg: RunConfig, args) -> Path:
    explicit = getattr(args, "qtable", None) or cfg["policy"]["table"]
    return Path(explicit) if explicit else Path(cfg["out"]) / QTABLE_FILE


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    pol = cfg["policy"]
    log.info("training on %s for %d episodes", cfg.env_spec, pol["episodes"])
    q = train_q_learning(cfg.env_spec, pol["episodes"], pol["learning_rate"], cfg["gamma"], cfg.exploration(), cfg["seed"])
    q.save(out / QTABLE_FILE)
    policy = SoftmaxPolicy(q, pol["temperature"]) if pol["kind"] == "softmax" else GreedyPolicy(q)
    summary = {
        "env": str(cfg.env_spec),
        "episodes": pol["episodes"],
        "evaluation_episodes": 100,
        "mean_return": evaluate_policy(cfg.env_spec, policy, 100, cfg["seed"]),
        "states": len(q.values),
    }
    log.info("mean evaluation return %.4g", summary["mean_return"])
    _write_text(out / "train_summary.json", _json(summary))
    print(_json(summary), end="")
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = _config(args)
    _, policy = _load_policy(cfg, _qtable_path(cfg, args))
    out = _out_dir(cfg)
    result = collect(cfg.env_spec, policy, cfg.collection_config(), workers=args.workers)
    write_tuples(result.tuples, out / TUPLES_FILE)
    summary = {
        "tuples": len(result.tuples),
        "skipped_episodes": result.skipped,
        "total_trials": result.total_trials,
        "total_simulation_steps": result.sim_steps,
        "unconverged_estimates": sum(
            1 for t in result.tuples for e in t.per_n.values() if not e.converged
        ),
    }
    _write_text(out / "collect_summary.json", _json(summary))
    print(_json(summary), end="")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    tuples_path = _input(Path(args.tuples) if args.tuples else Path(cfg["out"]) / TUPLES_FILE, "tuples file")
    tuples = read_tuples(tuples_path)
    out = _out_dir(cfg)
    provenance = {"config_sha256": config_digest(cfg.digest_doc()), "tuples": len(tuples), "env": str(cfg.env_spec)}
    table, fits = fit_margin_table(
        tuples, cfg["s_set"], cfg["beta"], cfg.sampling(), cfg["filter_fraction"], provenance
    )
    table.save(out / TABLE_FILE)
    for n, (grid, _) in fits.items():
        write_kde_csv(grid, out / f"kde_n{n}.csv")
    write_heatmap_csv(table, out / "heatmap.csv")
    write_heatmap_svg(table, out / "heatmap.svg", f"{cfg.env_spec} safety margins (beta={cfg['beta']})")
    write_histogram_csv(tuples, out / "histogram.csv")
    bounds = margin_error_report(table, tuples, cfg["alpha"])
    _write_text(out / "error_bounds.json", _json({str(n): v for n, v in bounds.items()}))
    print(_json({"table": str(out / TABLE_FILE), "s_set": list(table.s_set),
                 "proxy_range": [float(table.p_edges[0]), float(table.p_edges[-1])]}), end="")
    return EXIT_OK


def cmd_margin(args) -> int:
    table_path = Path(args.table) if args.table else Path(_config(args)["out"]) / TABLE_FILE
    table = MarginTable.load(_input(table_path, "margin table"))
    if args.batch:
        for lineno, line in enumerate(sys.stdin, start=1):
            fields = line.replace(",", " ").split()
            if not fields:
                continue
            try:
                proxy, zeta = (float(x) for x in fields)
            except ValueError:
                raise ArtifactError(f"stdin line {lineno}: expected 'proxy zeta', got {line.strip()!r}") from None
            print(query_margin(table, proxy, zeta))
        return EXIT_OK
    if args.proxy is None or args.zeta is None:
        raise ConfigurationError("margin needs PROXY and ZETA, or --batch")
    print(query_margin(table, args.proxy, args.zeta))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    tuples = read_tuples(_input(Path(args.tuples) if args.tuples else out / TUPLES_FILE, "tuples file"))
    table = MarginTable.load(_input(Path(args.table) if args.table else out / TABLE_FILE, "margin table"))
    _, policy = _load_policy(cfg, _qtable_path(cfg, args))
    v = cfg["validate"]
    coverage = cross_validate(
        tuples, v["train_fraction"], cfg["beta"], cfg["filter_fraction"], v["split_seed"],
        table.s_set, cfg.sampling(), cfg["alpha"],
    )
    bounds = margin_error_report(table, tuples, cfg["alpha"])
    top = table.max_curve_value()
    zetas = v["zetas"] or [top * f for f in (0.25, 0.5, 0.75)]
    proximity = failure_proximity(
        cfg.env_spec, policy, table, v["episodes"], zetas, v["offsets"], v["top_fraction"], cfg["seed"], v["explore"]
    )
    report = build_report(str(cfg.env_spec), cfg["policy"]["kind"], coverage, bounds, proximity)
    _write_text(out / REPORT_FILE, report_json(report))
    text = coverage_text_table(coverage, str(cfg.env_spec), cfg["policy"]["kind"]) + "\n" + proximity_text_table(proximity)
    _write_text(out / "report.txt", text)
    print(text, end="")
    if proximity.no_failures:
        log.warning("no failures in %d validation episodes; proximity statistics are empty", proximity.episodes)
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    path = _input(Path(args.report) if args.report else Path(cfg["out"]) / REPORT_FILE, "report")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != REPORT_SCHEMA["properties"]["format"]["const"]:
        raise ArtifactError(f"{path}: not a critmargin report")
    lines = [f"{'environment':<20} {'policy':<16} {'n':>4} {'est. eps_percentile':>20} {'bound':>8}"]
    bounds = doc.get("error_bounds") or {}
    for n, e in sorted((doc.get("coverage") or {}).get("per_n", {}).items(), key=lambda kv: int(kv[0])):
        b = (bounds.get(n) or {}).get("epsilon_percentile_bound")
        lines.append(
            f"{doc['environment']:<20} {doc['policy']:<16} {int(n):>4} "
            f"{e['estimated_epsilon_percentile']:>20.3f} {'' if b is None else f'{b:.3f}':>8}"
        )
    prox = doc.get("proximity")
    if prox:
        lines.append("")
        if prox["no_failures"]:
            lines.append(f"no failures in {prox['episodes']} episodes")
        for row in prox["per_zeta"]:
            parts = [f"zeta={row['zeta']:.4g}"]
            for k, s in row["offsets"].items():
                if s:
                    parts.append(f"{k} before failure: {s['mean_margin']:.3f}")
            if row["episode_average"]:
                parts.append(f"average: {row['episode_average']['mean_margin']:.3f}")
            lines.append("  ".join(parts))
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="run config JSON")
    common.add_argument("--seed", type=int, metavar="U64", default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--workers", type=int, metavar="K", default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="critmargin", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a tabular Q-learning policy")
    p = sub.add_parser("collect", parents=[common], help="collect (proxy, criticality) tuples")
    p.add_argument("--qtable", metavar="PATH")
    p = sub.add_parser("fit", parents=[common], help="fit densities and build the margin table")
    p.add_argument("--tuples", metavar="PATH")
    p = sub.add_parser("margin", parents=[common], help="query a margin table")
    p.add_argument("--table", metavar="PATH")
    p.add_argument("--batch", action="store_true", help="read 'proxy zeta' pairs from standard input")
    p.add_argument("proxy", type=float, nargs="?")
    p.add_argument("zeta", type=float, nargs="?")
    p = sub.add_parser("validate", parents=[common], help="coverage and failure-proximity validation")
    p.add_argument("--tuples", metavar="PATH")
    p.add_argument("--table", metavar="PATH")
    p.add_argument("--qtable", metavar="PATH")
    p = sub.add_parser("report", parents=[common], help="print a validation report")
    p.add_argument("--report", metavar="PATH")
    return parser


COMMANDS = {
    "train": cmd_train,
    "collect": cmd_collect,
    "fit": cmd_fit,
    "margin": cmd_margin,
    "validate": cmd_validate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if not hasattr(args, "workers"):
        args.workers = 1
    if args.workers < 1:
        print("critmargin: --workers must be at least 1", file=sys.stderr)
        return EXIT_ARTIFACT
    try:
        return COMMANDS[args.command](args)
    except (ArtifactError, ConfigurationError, SnapshotFormatError, TupleFormatError, FileNotFoundError) as exc:
        print(f"critmargin {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (FitError, ValidationError) as exc:
        print(f"critmargin {args.command}: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"critmargin {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
