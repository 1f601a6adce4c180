"""Matplotlib renderings of quality and evaluation reports (SVG by default)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "postmortem_pad"
_SAVE_KW = {"metadata": {"Date": None}}

COVARIATE_TITLES = {
    "average_intensity": "average intensity",
    "entropy": "grayscale utilization [bits]",
    "sharpness": "sharpness",
}


def _bxp_entry(stats, label):
    return {
        "label": label,
        "med": stats.median,
        "q1": stats.q1,
        "q3": stats.q3,
        "whislo": stats.whisker_low,
        "whishi": stats.whisker_high,
        "fliers": stats.outliers,
    }


def _boxes(ax, entries):
    ax.bxp(
        entries,
        showfliers=True,
        medianprops={"color": "red"},
        flierprops={"marker": "x", "markeredgecolor": "black"},
    )


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def quality_boxplots(report, path) -> Path:
    covs = list(COVARIATE_TITLES)
    fig, axes = plt.subplots(1, len(covs), figsize=(4 * len(covs), 3.5))
    for ax, cov in zip(axes, covs):
        entries = [_bxp_entry(stats[cov], label) for label, stats in report.per_class.items() if stats[cov].n]
        if entries:
            _boxes(ax, entries)
        title = COVARIATE_TITLES[cov]
        if report.rank_sum is not None:
            title += f"\np = {report.rank_sum[cov].p_value:.3g}"
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def accuracy_per_split(report, path) -> Path:
    accs = np.asarray(report.per_split_accuracy) * 100
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(1, len(accs) + 1), accs, "o-", color="black")
    ax.axhline(report.mean_accuracy * 100, color="grey", linestyle="--", label=f"mean {report.mean_accuracy:.2%}")
    ax.set_xlabel("split")
    ax.set_ylabel("accuracy [%]")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def time_boxplots(report, path) -> Path:
    bins = [b for b in report.time_bins if b.n]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(bins) + 2), 3.5))
    _boxes(ax, [_bxp_entry(b.box, b.label) for b in bins])
    ax.set_ylabel("liveness score")
    ax.set_xlabel("hours post-mortem")
    ax.set_ylim(-0.05, 1.05)
    plt.setp(ax.get_xticklabels(), rotation=45, ha="right")
    fig.tight_layout()
    return _save(fig, path)


def roc_curve(report, path) -> Path:
    x = [p.false_live_rate for p in report.roc_points]
    y = [p.true_live_rate for p in report.roc_points]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(x, y, color="black", label=f"AUC = {report.auc:.4f}")
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlabel("post-mortem accepted as live (APCER)")
    ax.set_ylabel("live accepted as live (1 - BPCER)")
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def time_mean_std(report, path) -> Path:
    bins = [b for b in report.time_bins if b.n]
    fig, ax = plt.subplots(figsize=(6, 3))
    idx = np.arange(len(bins))
    mean = np.array([b.mean for b in bins])
    std = np.array([b.std for b in bins])
    ax.fill_between(idx, mean - std, mean + std, color="lightgrey")
    ax.plot(idx, mean, color="black")
    ax.set_xticks(idx, [b.label for b in bins], rotation=45, ha="right")
    ax.set_ylabel("liveness score")
    ax.set_ylim(-0.05, 1.05)
    fig.tight_layout()
    return _save(fig, path)


def evaluation_plots(report, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        accuracy_per_split(report, out_dir / "accuracy_per_split.svg"),
        time_boxplots(report, out_dir / "scores_by_hours_boxplot.svg"),
        roc_curve(report, out_dir / "roc.svg"),
        time_mean_std(report, out_dir / "scores_by_hours_mean_std.svg"),
    ]
