"""Figure rendering for evaluation reports (Bland-Altman and agreement scatter)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {
    "ggo": "Ground-glass opacity volume (mL)",
    "high_opacity": "High-opacity volume (mL)",
    "pneumonia": "Total pneumonia volume (mL)",
    "burden": "Pneumonia burden (%)",
}


def set_style(width: float = 4.0, height: float = 3.2):
    """Compact rc settings shared by every report figure."""
    matplotlib.rcParams.update({
        "figure.figsize": (width, height),
        "figure.dpi": 120,
        "font.size": 9,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "axes.titlesize": 9,
        "legend.frameon": False,
    })


def bland_altman_figure(means, diffs, bias, loa_low, loa_high, label=""):
    fig, ax = plt.subplots()
    ax.scatter(means, diffs, s=14, color="0.2", alpha=0.8)
    ax.axhline(bias, color="k", lw=1)
    for v in (loa_low, loa_high):
        ax.axhline(v, color="0.5", lw=1, ls="--")
    x1 = max(means) if len(means) else 1.0
    ax.text(x1, bias, f" bias {bias:.2f}", va="bottom", ha="right", fontsize=8)
    ax.text(x1, loa_high, f" +1.96 SD {loa_high:.2f}", va="bottom", ha="right", fontsize=8)
    ax.text(x1, loa_low, f" -1.96 SD {loa_low:.2f}", va="top", ha="right", fontsize=8)
    ax.set_xlabel(f"Mean of automatic and expert: {label}")
    ax.set_ylabel("Automatic - expert")
    fig.tight_layout()
    return fig


def scatter_figure(expert, auto, rho=None, p=None, label=""):
    fig, ax = plt.subplots()
    ax.scatter(expert, auto, s=14, color="0.2", alpha=0.8)
    lim = max(max(expert, default=1.0), max(auto, default=1.0)) * 1.05 or 1.0
    ax.plot([0, lim], [0, lim], color="0.6", lw=1, ls=":")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel(f"Expert: {label}")
    ax.set_ylabel(f"Automatic: {label}")
    if rho is not None:
        ax.set_title(f"Spearman rho = {rho:.3f}, p = {p:.3g}")
    fig.tight_layout()
    return fig


def render_report_figures(report, out_dir) -> list[Path]:
    """Write ``ba_<kind>.png`` and ``scatter_<kind>.png`` for each volume type."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_style()
    written = []
    for kind, ba in report.bland_altman.items():
        label = LABELS.get(kind, kind)
        if ba:
            fig = bland_altman_figure(ba["means"], ba["diffs"], ba["bias"], ba["loa_low"], ba["loa_high"], label)
            path = out / f"ba_{kind}.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
        sp = report.spearman.get(kind)
        fig = scatter_figure([r.expert_ml[kind] for r in report.rows], [r.auto_ml[kind] for r in report.rows],
                             sp["rho"] if sp else None, sp["p"] if sp else None, label)
        path = out / f"scatter_{kind}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_history(history, path) -> Path:
    set_style(4.5, 3.0)
    fig, ax = plt.subplots()
    epochs = [r[0] for r in history.records]
    ax.plot(epochs, [r[1] for r in history.records], label="train")
    ax.plot(epochs, [r[2] for r in history.records], label="validation")
    for e in history.reductions:
        ax.axvline(e, color="0.7", lw=0.8, ls=":")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
