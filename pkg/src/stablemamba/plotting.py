"""SVG line charts for metrics logs and corruption sweeps."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed id salt and no date stamp so the same data gives the same bytes
_RC = {
    "svg.hashsalt": "stablemamba",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.linewidth": 0.6,
    "lines.linewidth": 1.2,
    "figure.figsize": (5.0, 3.2),
}


def read_csv_columns(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    cols: dict[str, list[float]] = {k: [] for k in rows[0]}
    for r in rows:
        for k, v in r.items():
            try:
                cols[k].append(float(v))
            except (TypeError, ValueError):
                cols[k].append(float("nan"))
    return cols


def line_chart(x: Sequence[float], series: dict[str, Sequence[float]], path: str | Path,
               xlabel: str = "", ylabel: str = "", title: str = "", logy: bool = False,
               markers: bool = False) -> Path:
    path = Path(path)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, y in series.items():
            ax.plot(x, y, marker="o" if markers else None, markersize=3, label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        ax.spines[["top", "right"]].set_visible(False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def plot_csv(csv_path: str | Path, svg_path: str | Path | None = None) -> Path:
    """Pick the chart from the columns: loss curve for metrics, accuracy curve for sweeps."""
    csv_path = Path(csv_path)
    svg_path = Path(svg_path) if svg_path is not None else csv_path.with_suffix(".svg")
    cols = read_csv_columns(csv_path)
    if {"step", "loss"} <= set(cols):
        return line_chart(cols["step"], {"loss": cols["loss"]}, svg_path, "step", "training loss",
                          logy=all(v > 0 for v in cols["loss"]))
    if {"severity", "accuracy"} <= set(cols):
        return line_chart(cols["severity"], {"top-1": cols["accuracy"]}, svg_path, "severity",
                          "top-1 accuracy", markers=True)
    if {"epoch", "top1"} <= set(cols):
        return line_chart(cols["epoch"], {"top-1": cols["top1"]}, svg_path, "epoch", "top-1 accuracy")
    raise ValueError(f"{csv_path}: expected metrics (step,loss), sweep (severity,accuracy) or eval (epoch,top1) columns")
