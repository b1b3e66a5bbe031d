"""SVG charts drawn only from emitted CSV files, so every chart can be regenerated."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import read_series_csv  # noqa: E402

# fixed salt and no date keep SVG output byte-stable
matplotlib.rcParams["svg.hashsalt"] = "bdtd"


def chart_lines(csv_path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """The (x, y) data a chart of ``csv_path`` shows, one entry per column."""
    cols = read_series_csv(csv_path)
    x = cols.pop("round")
    return {name: (x, y) for name, y in cols.items()}


def plot_csv(csv_path, svg_path=None, *, title: str | None = None, ylabel: str | None = None):
    """Draw one line per non-round column of ``csv_path`` and save as SVG.

    Returns the SVG path. The y axis is logarithmic when every value is positive.
    """
    csv_path = Path(csv_path)
    svg_path = Path(svg_path) if svg_path is not None else csv_path.with_suffix(".svg")
    lines = chart_lines(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (x, y) in lines.items():
        ax.plot(x, y, label=name, gid=name)
    values = np.concatenate([y for _, y in lines.values()]) if lines else np.array([])
    if values.size and np.all(values > 0) and np.all(np.isfinite(values)):
        ax.set_yscale("log")
    ax.set_xlabel("round")
    if ylabel:
        ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if lines:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return svg_path
