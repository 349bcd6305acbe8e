"""Figures for ``fedidm report``: TER curves per attack and a final-TER bar chart."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

# (attack, aggregator) -> list of per-seed TER series
Curves = Mapping[tuple[str, str], Sequence[Sequence[float]]]


def _save(fig, path: Path) -> Path:
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_ter_curves(curves: Curves, attacks: Sequence[str], aggregators: Sequence[str],
                    path: Path, stage_switch: int | None = None) -> Path:
    """One panel per attack; mean TER over seeds with a min/max band per aggregator."""
    with plt.rc_context(STYLE):
        ncols = min(3, len(attacks))
        nrows = int(np.ceil(len(attacks) / ncols))
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.4 * nrows),
                                 squeeze=False, sharey=True)
        for ax, attack in zip(axes.flat, attacks):
            for agg in aggregators:
                series = curves.get((attack, agg))
                if not series:
                    continue
                ter = np.array(series, dtype=np.float64)
                x = np.arange(1, ter.shape[1] + 1)
                line, = ax.plot(x, ter.mean(axis=0), lw=1.2, label=agg)
                if ter.shape[0] > 1:
                    ax.fill_between(x, ter.min(axis=0), ter.max(axis=0), alpha=0.2,
                                    color=line.get_color(), lw=0)
            if stage_switch:
                ax.axvline(stage_switch + 0.5, color="0.6", lw=0.8, ls="--")
            ax.set_title(attack)
            ax.set_xlabel("round")
            ax.set_ylim(-0.02, 1.02)
        for ax in axes[:, 0]:
            ax.set_ylabel("TER")
        for ax in list(axes.flat)[len(attacks):]:
            ax.set_visible(False)
        axes.flat[0].legend(frameon=False, loc="upper left")
        fig.tight_layout()
        return _save(fig, path)


def plot_final_ter(cells: Mapping[tuple[str, str], Sequence[float]], attacks: Sequence[str],
                   aggregators: Sequence[str], path: Path) -> Path:
    """Grouped bars of final TER (mean with std error bars) per attack."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(attacks) * max(1, len(aggregators)) / 2), 2.8))
        width = 0.8 / max(1, len(aggregators))
        x = np.arange(len(attacks))
        for j, agg in enumerate(aggregators):
            means = [np.mean(cells[(a, agg)]) if (a, agg) in cells else np.nan for a in attacks]
            stds = [np.std(cells[(a, agg)]) if (a, agg) in cells else 0.0 for a in attacks]
            ax.bar(x + (j - (len(aggregators) - 1) / 2) * width, means, width, yerr=stds,
                   capsize=2, label=agg)
        ax.set_xticks(x)
        ax.set_xticklabels(attacks)
        ax.set_ylabel("final TER")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=min(3, len(aggregators)))
        fig.tight_layout()
        return _save(fig, path)
