"""SVG figure rendering for run reports and cross-run comparisons.

Figures are written deterministically: fixed hash salt, no timestamp
metadata, and text kept as text so chart annotations can be checked by
string search.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

_RC = {
    "svg.fonttype": "none",
    "svg.hashsalt": "dflsim",
    "figure.max_open_warning": 0,
}

_METRIC_LABELS = {
    "f1": "macro F1",
    "test_loss": "test loss",
    "asr_lf": "attack success rate",
    "ba": "backdoor accuracy",
}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def render_round_metrics(report, path) -> Path:
    """Per-run figure: F1 and test loss against the round index.

    Benign nodes are solid with a bold mean line; malicious nodes dashed.
    """
    path = Path(path)
    rounds = [rr.round_index for rr in report.rounds]
    with plt.rc_context(_RC):
        fig, (ax_f1, ax_loss) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        for ax, key in ((ax_f1, "f1"), (ax_loss, "test_loss")):
            for node_idx in range(len(report.rounds[0].nodes)):
                series = [getattr(rr.nodes[node_idx], key) for rr in report.rounds]
                benign = report.rounds[0].nodes[node_idx].benign
                ax.plot(rounds, series, linewidth=0.8, alpha=0.45,
                        linestyle="-" if benign else "--",
                        color="tab:blue" if benign else "tab:red")
            benign_mean = [
                sum(m.f1 if key == "f1" else m.test_loss
                    for m in rr.nodes if m.benign) /
                max(1, sum(1 for m in rr.nodes if m.benign))
                for rr in report.rounds
            ]
            ax.plot(rounds, benign_mean, linewidth=2.2, color="tab:blue",
                    label="benign mean")
            ax.set_xlabel("round")
            ax.set_ylabel(_METRIC_LABELS[key])
            ax.legend(loc="best", fontsize=8)
        title = report.summary.get("name") or (
            f"{report.summary.get('aggregator', '?')} / "
            f"{report.summary.get('attack', '?')}")
        fig.suptitle(title, fontsize=10)
        fig.tight_layout()
        _save(fig, path)
    return path


def _group_key(summary: dict) -> tuple[str, str]:
    return str(summary.get("dataset", "?")), str(summary.get("attack", "?"))


def render_comparisons(summaries: list[dict], out_dir) -> list[Path]:
    """One chart per (dataset, attack, metric): PNR on the x-axis, one
    error-bar series per aggregator, every point annotated with its mean.

    Raises ValueError when summaries in the same group disagree on which
    metrics they carry.
    """
    out_dir = Path(out_dir)
    groups: dict[tuple[str, str], list[dict]] = {}
    for summary in summaries:
        groups.setdefault(_group_key(summary), []).append(summary)

    written: list[Path] = []
    for (dataset, attack), members in sorted(groups.items()):
        metric_sets = {tuple(sorted(m.get("metrics", {}))) for m in members}
        if len(metric_sets) > 1:
            raise ValueError(
                f"summaries for dataset={dataset!r} attack={attack!r} carry "
                f"mismatched metric sets: {sorted(metric_sets)}")
        metrics = sorted(metric_sets.pop()) if metric_sets else []
        for metric in metrics:
            path = out_dir / f"compare_{dataset}_{attack}_{metric}.svg"
            _render_one_comparison(members, dataset, attack, metric, path)
            written.append(path)
    return written


def _render_one_comparison(members: list[dict], dataset: str, attack: str,
                           metric: str, path: Path) -> None:
    by_agg: dict[str, list[tuple[float, float, float]]] = {}
    for summary in members:
        agg = str(summary.get("aggregator", "?"))
        stats = summary["metrics"][metric]
        by_agg.setdefault(agg, []).append(
            (float(summary.get("pnr", 0.0)), float(stats["mean"]),
             float(stats["std"])))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for agg in sorted(by_agg):
            points = sorted(by_agg[agg])
            xs = [p[0] for p in points]
            ys = [p[1] for p in points]
            errs = [p[2] for p in points]
            ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=agg)
            for x, y, _ in points:
                # annotation text mirrors the summary value so the chart can
                # be verified against the JSON by exact string match
                ax.annotate(f"{y:.3f}", (x, y), textcoords="offset points",
                            xytext=(4, 6), fontsize=8)
        ax.set_xlabel("poisoned node ratio")
        ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
        ax.set_title(f"{dataset} / {attack}")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save(fig, path)
