"""Figures for resiliency reports, written next to the CSV they are drawn from."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

TIER_LABELS = {"no_failure": "No Failure", "normal": "Normal", "poor": "Poor", "hazardous": "Hazardous"}
VARIANT_STYLE = {
    "vanilla": {"label": "Vanilla", "color": "#9e9e9e", "hatch": ""},
    "deepfogguard": {"label": "deepFogGuard", "color": "#1f5fa8", "hatch": "//"},
}

RC = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _size(scale: float = 1.0):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    width = 6.0 * scale
    return width, width * golden


def resiliency_bars(rows: Sequence[Mapping], path, title: str = "", metadata: Mapping | None = None) -> Path:
    """Grouped bars of mean average accuracy (%) per reliability tier and variant.

    ``rows`` carry ``variant``, ``tier``, ``mean`` and ``std`` (fractions).
    """
    tiers = [t for t in TIER_LABELS if any(r["tier"] == t for r in rows)]
    tiers += sorted({r["tier"] for r in rows} - set(tiers))
    variants = [v for v in VARIANT_STYLE if any(r["variant"] == v for r in rows)]
    lookup = {(r["variant"], r["tier"]): r for r in rows}
    x = np.arange(len(tiers))
    width = 0.8 / max(len(variants), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        for i, v in enumerate(variants):
            style = VARIANT_STYLE[v]
            means = [100 * float(lookup[(v, t)]["mean"]) if (v, t) in lookup else np.nan for t in tiers]
            errs = [100 * float(lookup[(v, t)]["std"]) if (v, t) in lookup else 0 for t in tiers]
            bars = ax.bar(
                x + (i - (len(variants) - 1) / 2) * width, means, width, yerr=errs, capsize=3,
                label=style["label"], color=style["color"], hatch=style["hatch"], edgecolor="black", linewidth=0.6,
            )
            ax.bar_label(bars, fmt="%.1f", fontsize=7, padding=2)
        ax.set_xticks(x, [TIER_LABELS.get(t, t) for t in tiers])
        ax.set_xlabel("Reliability setting")
        ax.set_ylabel("Average accuracy (%)")
        ax.set_ylim(0, 105)
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None, **{k: str(v) for k, v in (metadata or {}).items()}})
        plt.close(fig)
    return path


def training_curves(histories: Mapping[str, Sequence[Mapping]], path) -> Path:
    """Validation accuracy per epoch, one line per run."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        for label, hist in sorted(histories.items()):
            ax.plot([h["epoch"] for h in hist], [100 * h["val_accuracy"] for h in hist], label=label, lw=1.2)
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("Epoch")
        ax.set_ylabel("Validation accuracy (%)")
        ax.legend(loc="upper left", bbox_to_anchor=(1.0, 1.0), frameon=False, fontsize=7)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
        plt.close(fig)
    return path
