"""Report figures. Rendered off-screen to PNG next to the CSV tables."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .solver import Importance  # noqa: E402
from .sync import FollowupStat  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
# PNG metadata without version strings keeps figures byte-stable across installs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="png", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def plot_importance(per_question: Mapping[int, Sequence[Importance]], path, top: int = 8) -> Path:
    """One horizontal bar panel per question with its largest |coefficients|."""
    qs = sorted(per_question)
    ncols = 4
    nrows = max(1, math.ceil(len(qs) / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.2 * nrows), squeeze=False)
        for ax in axes.flat[len(qs):]:
            ax.set_visible(False)
        for ax, q in zip(axes.flat, qs):
            imp = [i for i in per_question[q] if i.importance > 0][:top]
            names = [i.feature for i in imp][::-1]
            vals = [i.importance for i in imp][::-1]
            ax.barh(range(len(vals)), vals, color="#4c72b0")
            ax.set_yticks(range(len(vals)))
            ax.set_yticklabels(names, fontsize=6)
            ax.set_title(f"q{q}")
        fig.suptitle("Feature importance (|standardized coefficient|)")
        fig.tight_layout()
        return _save(fig, path)


def plot_followup(counts: Sequence[int], stats: Sequence[FollowupStat], path) -> Path:
    """Patients per follow-up (top) and mean score per question with 95% intervals (bottom)."""
    with plt.rc_context(STYLE):
        fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 6), sharex=True,
                                          gridspec_kw={"height_ratios": [1, 2]})
        top.bar(range(len(counts)), counts, color="#888888")
        top.set_ylabel("patients")
        cmap = plt.get_cmap("tab20")
        for q in sorted({s.question for s in stats}):
            rows = [s for s in stats if s.question == q]
            x = [s.followup_index for s in rows]
            y = [s.mean for s in rows]
            bottom.plot(x, y, marker="o", ms=2, lw=1, color=cmap(q - 1), label=f"q{q}")
            ci = [s for s in rows if s.ci_low is not None]
            if ci:
                bottom.fill_between([s.followup_index for s in ci], [s.ci_low for s in ci],
                                    [s.ci_high for s in ci], color=cmap(q - 1), alpha=0.12, lw=0)
        bottom.set_xlabel("follow-up index")
        bottom.set_ylabel("mean score")
        bottom.set_ylim(-0.1, 4.1)
        bottom.legend(ncol=6, fontsize=6, frameon=False, loc="lower left")
        fig.tight_layout()
        return _save(fig, path)
