"""Figure rendering for the reporting commands (SVG via the Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import LogisticFit, PhaseBoundaries, logistic_value


def plot_phase_fit(xs, ys, fit: LogisticFit, bounds: PhaseBoundaries,
                   path, ylabel: str = "relative validation accuracy") -> None:
    """Data, fitted curve, and the three shaded growth phases."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    grid = np.linspace(xs[0], xs[-1], 400)
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    lo, hi = xs[0], xs[-1]
    spans = [
        (lo, min(bounds.learn_x, hi), "#d9d9d9", "memorization"),
        (max(bounds.learn_x, lo), min(bounds.gen_x, hi), "#ffe8b3", "learning"),
        (max(bounds.gen_x, lo), hi, "#cde7cd", "generalization"),
    ]
    for left, right, color, label in spans:
        if right > left:
            ax.axvspan(left, right, color=color, alpha=0.6, label=label, lw=0)
    ax.plot(grid, logistic_value(fit, grid), color="tab:blue", label="logistic fit")
    ax.plot(xs, ys, "o", ms=3.5, color="tab:orange", label="data")
    for x, name in ((bounds.learn_x, "learn"), (fit.x0, "x0"), (bounds.gen_x, "gen")):
        ax.axvline(x, color="k", ls=":", lw=0.8)
        ax.annotate(f"{name}={x:.1f}", (x, ax.get_ylim()[0]),
                    textcoords="offset points", xytext=(3, 6), fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(metrics_columns: dict[str, np.ndarray], path) -> None:
    """Loss plus one validation-accuracy band per dataset, against epoch."""
    epochs = metrics_columns["epoch"]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9.6, 3.8))
    ax_loss.plot(epochs, metrics_columns["loss"], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean episode loss")
    acc_cols = [c for c in metrics_columns if c.startswith("acc_")]
    for col in acc_cols:
        ds_id = col[len("acc_"):]
        acc = metrics_columns[col]
        se = metrics_columns.get(f"se_{ds_id}")
        line, = ax_acc.plot(epochs, acc, label=ds_id)
        if se is not None:
            ax_acc.fill_between(epochs, acc - se, acc + se,
                                color=line.get_color(), alpha=0.25, lw=0)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    if acc_cols:
        ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
