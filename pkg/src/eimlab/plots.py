"""SVG line and bar charts, byte-stable across runs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "eimlab",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def line_chart(path, x, series: dict, xlabel: str = "", ylabel: str = "", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, ys in series.items():
            ax.plot(x, ys, marker="o", ms=3, lw=1.2, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)


def bar_chart(path, labels, groups: dict, ylabel: str = "", title: str = "", hline: float | None = None) -> Path:
    """Grouped bars: one group per label, one bar per entry of ``groups``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        n = max(len(groups), 1)
        width = 0.8 / n
        for i, (name, vals) in enumerate(groups.items()):
            xs = [j + (i - (n - 1) / 2) * width for j in range(len(labels))]
            ax.bar(xs, vals, width=width, label=name)
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels)
        ax.set_ylabel(ylabel)
        if hline is not None:
            ax.axhline(hline, color="0.4", lw=0.8, ls="--")
        if title:
            ax.set_title(title)
        if len(groups) > 1:
            ax.legend(frameon=False)
        return _save(fig, path)
