"""Command-line surface: run experiments, validate configs, draw comparisons.

Verbs:
  run <config> [--out DIR] [--force]   execute an experiment file
  plot <summaries...> --out DIR        cross-run comparison charts
  validate <config>                    parse and check a config, no run

Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .seeds import derive_seed
from .sim import DATA_DIR_ENV, ExperimentReport, run_experiment

CSV_HEADER = "round,node,benign,f1,test_loss,asr_lf,ba,n_filtered"


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def _dump_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"


def _fmt(value) -> str:
    # absent metrics stay absent rather than masquerading as 0
    return "" if value is None else f"{value:.6f}"


def rows_csv(report: ExperimentReport) -> str:
    """Per-node rows for the training rounds; round 0 stays report-only."""
    lines = [CSV_HEADER]
    for rr in report.rounds:
        if rr.round_index == 0:
            continue
        for m in rr.nodes:
            lines.append(f"{rr.round_index},{m.node},{1 if m.benign else 0},"
                         f"{_fmt(m.f1)},{_fmt(m.test_loss)},{_fmt(m.asr_lf)},"
                         f"{_fmt(m.ba)},{m.n_filtered}")
    return "\n".join(lines) + "\n"


def write_run_dir(run_dir: Path, report: ExperimentReport) -> None:
    from . import plots  # heavy import deferred so validate stays snappy

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "rounds.csv").write_text(rows_csv(report))
    (run_dir / "summary.json").write_text(_dump_json(report.summary))
    with open(run_dir / "trace.jsonl", "w") as fh:
        for entry in report.trace:
            fh.write(json.dumps(entry, sort_keys=True, default=_json_default))
            fh.write("\n")
    manifest = {"seed": report.seed,
                "malicious": list(report.malicious),
                "nodes": [{"node": i, **splits}
                          for i, splits in enumerate(report.partition_indices)]}
    (run_dir / "partition.json").write_text(_dump_json(manifest))
    plots.render_round_metrics(report, run_dir / "round_metrics.svg")


def pooled_summary(cfg: ExperimentConfig, reports: list[ExperimentReport]) -> dict:
    """Across-repeat aggregate: statistics of the per-repeat benign means."""
    keys = sorted({k for rep in reports for k in rep.summary["metrics"]})
    metrics = {}
    for key in keys:
        means = [rep.summary["metrics"][key]["mean"] for rep in reports
                 if key in rep.summary["metrics"]]
        metrics[key] = {"mean": float(np.mean(means)),
                        "std": float(np.std(means)),
                        "n": len(means)}
    base = dict(reports[0].summary)
    base.update({"metrics": metrics,
                 "repeats": len(reports),
                 "seed": cfg.seed,
                 "repeat_seeds": [rep.seed for rep in reports],
                 "malicious": sorted({nid for rep in reports
                                      for nid in rep.malicious})})
    return base


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for line in exc.errors:
            print(line, file=sys.stderr)
        return 2

    out = Path(args.out) if args.out else Path("runs") / (
        cfg.name or Path(args.config).stem)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"refusing to overwrite non-empty {out} (use --force)",
                  file=sys.stderr)
            return 1
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    (out / "config.yaml").write_text(dump_config(cfg))
    reports = []
    for rep in range(cfg.repeats):
        seed = cfg.seed if rep == 0 else derive_seed(cfg.seed, "repeat", rep)
        report = run_experiment(cfg, seed=seed)
        write_run_dir(out / f"run_{rep}", report)
        reports.append(report)
        final = report.summary["metrics"]
        shown = ", ".join(f"{k}={v['mean']:.4f}±{v['std']:.4f}"
                          for k, v in sorted(final.items()))
        print(f"run_{rep} seed={seed}: {shown}")
    (out / "pooled_summary.json").write_text(_dump_json(pooled_summary(cfg, reports)))
    print(f"wrote {out}")
    return 0


def cmd_plot(args) -> int:
    summaries = []
    for path in args.summaries:
        with open(path) as fh:
            summaries.append(json.load(fh))
    try:
        from . import plots
        written = plots.render_comparisons(summaries, args.out)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_validate(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for line in exc.errors:
            print(line, file=sys.stderr)
        return 2
    print(f"ok: {args.config} "
          f"({cfg.federation.n_nodes} nodes, {cfg.federation.rounds} rounds, "
          f"aggregator={cfg.aggregator.kind}, attack={cfg.attack.kind})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dflsim",
        description="Decentralized federated learning simulator with robust "
                    "aggregation and poisoning attacks.",
        epilog=f"Relative dataset paths resolve against ${DATA_DIR_ENV} when set.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="YAML experiment file")
    p_run.add_argument("--out", help="output directory (default runs/<name>)")
    p_run.add_argument("--force", action="store_true",
                       help="overwrite an existing non-empty output directory")
    p_run.set_defaults(fn=cmd_run)

    p_plot = sub.add_parser("plot", help="comparison charts from summary files")
    p_plot.add_argument("summaries", nargs="+", help="summary.json files")
    p_plot.add_argument("--out", required=True, help="directory for SVG output")
    p_plot.set_defaults(fn=cmd_plot)

    p_val = sub.add_parser("validate", help="check a config without running")
    p_val.add_argument("config", help="YAML experiment file")
    p_val.set_defaults(fn=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for line in exc.errors:
            print(line, file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  single surface for diagnostics
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
