"""Figure rendering for the report paths.

Training runs render a loss curve and the validation-metric trajectory;
evaluation runs render a metric bar chart. Figures land next to the
delimited (CSV) outputs in the run's output directory.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

_METRIC_KEYS = ("hr1", "hr5", "mrr", "f1", "bleu4")
_DPI = 140


def save_training_curves(rows: list[dict], loss_png: str, metrics_png: str) -> None:
    """rows: training-log records ({step, loss, ...} and eval records with
    metric fields). Missing eval rows just thin the metric curves."""
    steps = [r["step"] for r in rows if "loss" in r]
    losses = [r["loss"] for r in rows if "loss" in r]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(steps, losses, lw=1.0, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(loss_png, dpi=_DPI)
    plt.close(fig)

    evals = [r for r in rows if "hr1" in r]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    if evals:
        xs = [r["step"] for r in evals]
        for key, style in zip(_METRIC_KEYS, ("-o", "-s", "-^", "-v", "-d")):
            ax.plot(xs, [r[key] for r in evals], style, ms=3, lw=1.0, label=key)
        ax.legend(loc="lower right", fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("validation metric")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(metrics_png, dpi=_DPI)
    plt.close(fig)


def save_metric_bars(report: MetricReport, png: str, title: str = "") -> None:
    values = [getattr(report, k) for k in _METRIC_KEYS]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    bars = ax.bar(_METRIC_KEYS, values, color="tab:blue", width=0.6)
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}",
                ha="center", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("value")
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(png, dpi=_DPI)
    plt.close(fig)
