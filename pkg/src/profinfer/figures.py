"""Render plot specs to image files with matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_plot_spec(spec: dict, path) -> None:
    """Draw one plot-spec dict (see profinfer.stats) to ``path``.

    Series with axis "right" go on a twin y-axis.  A series may carry its
    own "x" vector (scatter/fit lines); otherwise the shared x values apply.
    """
    fig, ax_left = plt.subplots(figsize=(8, 4.5))
    ax_right = None
    shared_x = spec["x"]["values"]
    y_labels = spec.get("y", {})

    for series in spec["series"]:
        if series.get("axis") == "right":
            if ax_right is None:
                ax_right = ax_left.twinx()
            ax = ax_right
        else:
            ax = ax_left
        xs = series.get("x", shared_x)
        ys = series["values"]
        kind = series.get("kind", "line")
        if kind == "scatter":
            ax.scatter(xs, ys, label=series["label"], s=12, alpha=0.7)
        elif kind == "bar":
            ax.bar(xs, ys, label=series["label"], alpha=0.6)
        else:
            ax.plot(xs, ys, label=series["label"], marker="o", markersize=3)

    ax_left.set_title(spec["title"])
    ax_left.set_xlabel(spec["x"]["label"])
    if "left" in y_labels:
        ax_left.set_ylabel(y_labels["left"])
    if ax_right is not None and "right" in y_labels:
        ax_right.set_ylabel(y_labels["right"])

    handles, labels = ax_left.get_legend_handles_labels()
    if ax_right is not None:
        h2, l2 = ax_right.get_legend_handles_labels()
        handles += h2
        labels += l2
    if labels:
        ax_left.legend(handles, labels, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
