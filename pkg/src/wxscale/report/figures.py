"""Deterministic SVG figure rendering.

Every renderer is a pure function from plotted numbers to SVG bytes, so a
figure can be re-rendered from its paired CSV and byte-compared. Determinism
comes from a fixed ``svg.hashsalt``, no Date metadata, and fixed figure
geometry; rerunning with identical inputs reproduces identical bytes.

Heatmaps use a linear grayscale-to-warm ramp (dark gray through light gray
into amber and red); cells without a fit (NaN) are drawn hatched.
"""

from __future__ import annotations

import io
from contextlib import contextmanager

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

_HASHSALT = "wxscale"

GRAY_WARM = LinearSegmentedColormap.from_list(
    "gray_warm", ["#262626", "#9a9a9a", "#e8c468", "#d94524"]
)

_LEVEL_CMAP = matplotlib.colormaps["viridis"]


@contextmanager
def _deterministic_style():
    with matplotlib.rc_context(
        {
            "svg.hashsalt": _HASHSALT,
            "svg.fonttype": "none",
            "font.family": "DejaVu Sans",
            "font.size": 9,
            "axes.grid": True,
            "grid.alpha": 0.3,
            "figure.dpi": 100,
        }
    ):
        yield


def _to_svg(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def render_heatmap(
    leads: list[int],
    channels: list[str],
    matrix: np.ndarray,
    title: str,
    value_label: str,
) -> bytes:
    """Channel (rows) x lead (columns) heatmap; NaN cells hatched."""
    with _deterministic_style():
        height = max(2.2, 0.22 * len(channels) + 1.2)
        width = max(4.0, 0.16 * len(leads) + 2.0)
        fig, ax = plt.subplots(figsize=(width, height))
        ax.grid(False)
        masked = np.ma.masked_invalid(matrix)
        im = ax.imshow(
            masked, aspect="auto", cmap=GRAY_WARM, interpolation="nearest",
            origin="upper",
        )
        bad = ~np.isfinite(matrix)
        for i, j in zip(*np.nonzero(bad)):
            ax.add_patch(
                Rectangle(
                    (j - 0.5, i - 0.5), 1, 1,
                    fill=False, hatch="///", edgecolor="#777777", linewidth=0.4,
                )
            )
        ax.set_xticks(range(len(leads)))
        ax.set_xticklabels([str(h) for h in leads], rotation=90, fontsize=6)
        ax.set_yticks(range(len(channels)))
        ax.set_yticklabels(channels, fontsize=6)
        ax.set_xlabel("lead time [h]")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, label=value_label, fraction=0.04, pad=0.02)
        return _to_svg(fig)


def render_pooled_curves(
    leads: list[int],
    curves: dict[str, tuple[np.ndarray, np.ndarray]],
) -> bytes:
    """Two panels vs lead time: fit R^2 (left) and fitted slope (right).

    ``curves`` maps covariate name to (r2, slope) arrays over ``leads``;
    missing values are NaN and break the line.
    """
    with _deterministic_style():
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.2, 2.8))
        for name in sorted(curves):
            r2, slope = curves[name]
            ax1.plot(leads, r2, marker="o", markersize=3, label=name)
            ax2.plot(leads, slope, marker="o", markersize=3, label=name)
        ax1.set_xlabel("lead time [h]")
        ax1.set_ylabel("fit R$^2$")
        ax1.set_title("pooled log-log fit quality")
        ax2.set_xlabel("lead time [h]")
        ax2.set_ylabel("fitted slope")
        ax2.set_title("pooled scaling exponent")
        ax2.axhline(0.0, color="#888888", linewidth=0.8)
        ax1.legend(fontsize=7)
        fig.tight_layout()
        return _to_svg(fig)


def _paneled_lines(
    groups: list[tuple[str, list[tuple[str, int | None, list[int], list[float]]]]],
    ylabel: str,
    suptitle: str,
) -> bytes:
    """One panel per unit; pressure-level channels colored by level."""
    with _deterministic_style():
        n = max(1, len(groups))
        ncols = min(3, n)
        nrows = -(-n // ncols)
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(3.0 * ncols, 2.4 * nrows), squeeze=False
        )
        levels_present = sorted(
            {lev for _, chans in groups for _, lev, _, _ in chans if lev is not None}
        )
        for k, (unit, chans) in enumerate(groups):
            ax = axes[k // ncols][k % ncols]
            for name, level, xs, ys in chans:
                if level is not None and levels_present:
                    frac = levels_present.index(level) / max(1, len(levels_present) - 1)
                    color = _LEVEL_CMAP(frac)
                    ax.plot(xs, ys, color=color, linewidth=1.0)
                else:
                    ax.plot(xs, ys, linewidth=1.2, label=name)
            ax.set_title(f"[{unit}]", fontsize=8)
            ax.set_xlabel("lead time [h]", fontsize=7)
            ax.set_ylabel(ylabel, fontsize=7)
            ax.tick_params(labelsize=6)
            handles, labels = ax.get_legend_handles_labels()
            if handles:
                ax.legend(fontsize=6)
        for k in range(len(groups), nrows * ncols):
            axes[k // ncols][k % ncols].set_visible(False)
        fig.suptitle(suptitle, fontsize=10)
        fig.tight_layout(rect=(0, 0, 1, 0.94))
        return _to_svg(fig)


def render_derivative_panels(
    groups: list[tuple[str, list[tuple[str, int | None, list[int], list[float]]]]],
) -> bytes:
    """d(RMSE)/dt vs lead, one panel per unit group."""
    return _paneled_lines(groups, "d(RMSE)/dt [1/h]", "error growth rate over rollout")


def render_box_panels(
    groups: list[tuple[str, list[tuple[str, list[float]]]]],
    title: str,
) -> bytes:
    """Per-channel RMSE distributions (one value per IC) as box plots by unit."""
    with _deterministic_style():
        n = max(1, len(groups))
        ncols = min(3, n)
        nrows = -(-n // ncols)
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(3.0 * ncols, 2.4 * nrows), squeeze=False
        )
        for k, (unit, chans) in enumerate(groups):
            ax = axes[k // ncols][k % ncols]
            data = [vals for _, vals in chans]
            names = [name for name, _ in chans]
            ax.boxplot(data, tick_labels=names)
            for i, vals in enumerate(data, start=1):
                ax.plot([i] * len(vals), vals, linestyle="none", marker=".",
                        markersize=2.5, color="#d94524", alpha=0.6)
            ax.set_title(f"[{unit}]", fontsize=8)
            ax.set_ylabel("RMSE", fontsize=7)
            ax.tick_params(labelsize=6)
            ax.tick_params(axis="x", rotation=90)
        for k in range(len(groups), nrows * ncols):
            axes[k // ncols][k % ncols].set_visible(False)
        fig.suptitle(title, fontsize=10)
        fig.tight_layout(rect=(0, 0, 1, 0.94))
        return _to_svg(fig)
