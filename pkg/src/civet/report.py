"""Delimited report output plus the matplotlib figures rendered next to it."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .certify import SuiteReport  # noqa: E402
from .training import TrainingLog  # noqa: E402


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_suite_csv(report: SuiteReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(report.columns) + "\n")
        for row in report.rows:
            fh.write(",".join(_fmt(row.get(col)) for col in report.columns) + "\n")


def write_suite_summary(report: SuiteReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_suite_figure(report: SuiteReport, path) -> None:
    """Mean of every report column as one bar chart."""
    means = report.means()
    labels = [k for k, v in means.items() if v == v]  # drop NaN columns
    values = [means[k] for k in labels]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(labels, values, color="#4878cf")
    ax.bar_label(bars, fmt="%.4g", padding=2, fontsize=8)
    unit = "dB" if report.metric == "snr" else "MSE"
    ax.set_ylabel(f"mean {unit}")
    ax.set_title(f"eps={report.epsilon:g}, delta={report.delta:g}, n={len(report.rows)}")
    if report.metric == "mse" and values and min(values) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_figure(log: TrainingLog, path) -> None:
    """Standard and robust loss traces over training iterations."""
    iters = [r.iteration for r in log.rows]
    std = [r.std_loss for r in log.rows]
    rob = [r.civet_loss for r in log.rows]
    eps = [r.epsilon_current for r in log.rows]
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                  height_ratios=[3, 1])
    ax.plot(iters, std, label="standard loss", lw=1.0)
    if any(v > 0 for v in rob):
        ax.plot(iters, rob, label="robust loss", lw=1.0)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax2.plot(iters, eps, color="#d65f5f", lw=1.0)
    ax2.set_ylabel("epsilon")
    ax2.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
