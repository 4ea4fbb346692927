"""Figures written next to the JSON/TSV reports.

Uses the object-oriented matplotlib API with the Agg canvas so nothing
depends on pyplot's global state or a display.
"""

import io

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .data import atomic_write

# PNG text chunks would otherwise carry the matplotlib version
_PNG_META = {"Software": None}


def _save(fig, path):
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=_PNG_META)
    atomic_write(path, buf.getvalue())


def metric_comparison(reports, path, title=""):
    """Grouped bars per metric for each method; CIDEr gets its own panel."""
    fig = Figure(figsize=(8, 3.6))
    ax, axc = fig.subplots(1, 2, gridspec_kw={"width_ratios": [5, 1]})
    fields = ("B1", "B2", "B3", "B4", "R")
    names = list(reports)
    width = 0.8 / max(len(names), 1)
    for k, name in enumerate(names):
        rep = reports[name]
        xs = [i + (k - (len(names) - 1) / 2) * width for i in range(len(fields))]
        ax.bar(xs, [getattr(rep, f) for f in fields], width, label=name)
        axc.bar([(k - (len(names) - 1) / 2) * width], [rep.C], width)
    ax.set_xticks(range(len(fields)), fields)
    ax.set_ylim(0, 1)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8)
    axc.set_xticks([0], ["C"])
    axc.set_ylim(0, 10)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def training_curve(values, path, ylabel, reference=None, reference_label=None):
    fig = Figure(figsize=(5, 3.2))
    ax = fig.subplots()
    ax.plot(range(1, len(values) + 1), values, lw=1.2)
    if reference is not None:
        ax.axhline(reference, ls="--", lw=0.8, color="gray", label=reference_label)
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
