"""PNG figures for benchmark reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
# no Software/date chunks so identical data gives identical bytes
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_fixed_length(runs: Sequence, path) -> Path:
    """Test accuracy against token budget, one line per method."""
    by_method: Dict[str, List] = {}
    for r in runs:
        by_method.setdefault(r.method, []).append(r)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for method, rs in by_method.items():
            rs = sorted(rs, key=lambda r: r.budget)
            ax.plot([r.budget for r in rs], [r.accuracy for r in rs], marker="o", label=method)
        ax.axhline(100.0 / 4, color="0.6", lw=0.8, ls="--", label="chance")
        ax.set_xscale("log", base=2)
        budgets = sorted({r.budget for r in runs})
        ax.set_xticks(budgets)
        ax.set_xticklabels([str(b) for b in budgets])
        ax.set_xlabel("token budget")
        ax.set_ylabel("test accuracy (%)")
        ax.set_ylim(0, 105)
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_tokdense(runs: Sequence, path, title: str = "adaptive length") -> Path:
    """Bars of TokDense, annotated with the average token count."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        names = [r.method for r in runs]
        vals = [r.tok_dense for r in runs]
        bars = ax.bar(names, vals, color="0.45")
        for b, r in zip(bars, runs):
            ax.annotate(f"{r.avg_tokens:.1f} tok", (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("TokDense (acc. % per token)")
        ax.set_title(title)
        return _save(fig, Path(path))


def plot_ablation(runs: Sequence, path) -> Path:
    """Horizontal accuracy bars for the ablation rows."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        names = [r.method.split(":", 1)[-1] for r in runs]
        ax.barh(names, [r.accuracy for r in runs], color="0.45")
        ax.axvline(100.0 / 4, color="0.6", lw=0.8, ls="--")
        ax.invert_yaxis()
        ax.set_xlim(0, 105)
        ax.set_xlabel("test accuracy (%)")
        return _save(fig, Path(path))


def render_report(runs: Sequence, out_dir) -> List[Path]:
    """Write whichever figures the runs support; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    fixed = [r for r in runs if r.subtask == "fixed"]
    adaptive = [r for r in runs if r.subtask == "adaptive"]
    ablation = [r for r in runs if r.subtask == "ablation"]
    if fixed:
        written.append(plot_fixed_length(fixed, out_dir / "fixed_length.png"))
    if adaptive:
        written.append(plot_tokdense(adaptive, out_dir / "adaptive_tokdense.png"))
    if ablation:
        written.append(plot_ablation(ablation, out_dir / "ablation.png"))
    return written
