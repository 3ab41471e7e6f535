"""Offline figure rendering for score reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#0072b2", "#e69f00", "#009e72", "#d55c00", "#cc79a7", "#56b4e9"]

# fixed element ids and no timestamp, so identical inputs give identical bytes
STYLE = {
    "svg.hashsalt": "dmf2mel",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def violin_svg(groups: list[tuple[str, list[float]]], path, title: str = "") -> Path:
    """One violin per (label, values) group, median marked, points overlaid."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(groups), 3.2))
        pos = np.arange(1, len(groups) + 1)
        for k, (p, (_, vals), color) in enumerate(zip(pos, groups, COLORS * len(groups))):
            vals = np.asarray(vals, dtype=float)
            if len(vals) > 1 and np.ptp(vals) > 0:
                body = ax.violinplot(vals, positions=[p], widths=0.7, showextrema=False)["bodies"][0]
                body.set_facecolor(color)
                body.set_edgecolor("#222222")
                body.set_alpha(0.45)
                body.set_gid(f"violin-{k}")
            jitter = np.linspace(-0.08, 0.08, len(vals)) if len(vals) > 1 else np.zeros(1)
            ax.scatter(p + jitter, vals, s=9, color=color, edgecolors="none", zorder=3)
            ax.hlines(np.median(vals), p - 0.25, p + 0.25, color="#222222", lw=1.6, zorder=4).set_gid(f"median-{k}")
        ax.set_xticks(pos)
        ax.set_xticklabels([label for label, _ in groups])
        ax.set_xlim(0.4, len(groups) + 0.6)
        ax.set_ylabel("Pearson r per subject")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
