"""SVG figures for simulation, PCA and phase reports.

All figures are written with a fixed SVG hash salt and no date metadata so
identical inputs give identical bytes. Series carry ``gid`` attributes
(``hit-rate``, ``pc0`` ... ``pcN``, ``rate-<policy>``, ``phase-<id>``) so the
files can be inspected programmatically.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

HIT_COLOR = "#2a9d8f"
MISS_COLOR = "#e76f51"
PHASE_COLORS = ("#e63946", "#457b9d", "#f4a261", "#2a9d8f", "#8d99ae", "#6a4c93",
                "#ffb703", "#588157")
PC_COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
             "#e377c2", "#7f7f7f")

_RC = {
    "svg.hashsalt": "cacheprobe",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
}


def _save(fig, path: str | os.PathLike) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _address_panel(ax, addresses, hits, marker_size=2.0):
    t = np.arange(len(addresses))
    hits = np.asarray(hits, dtype=bool)
    ax.scatter(t[hits], addresses[hits], s=marker_size, c=HIT_COLOR, marker="s",
               linewidths=0, label="hit", gid="hits")
    ax.scatter(t[~hits], addresses[~hits], s=marker_size, c=MISS_COLOR, marker="s",
               linewidths=0, label="miss", gid="misses")
    ax.set_ylabel("address")
    ax.ticklabel_format(axis="y", style="sci", scilimits=(0, 0))
    ax.legend(loc="upper right", markerscale=3, frameon=False, ncol=2)


def access_scatter(path, addresses, hits, rolling, title: str = "") -> None:
    """Per-access address scatter colored by hit/miss, rolling hit rate on top."""
    addresses = np.asarray(addresses)
    with plt.rc_context(_RC):
        fig, (top, bottom) = plt.subplots(2, 1, sharex=True, figsize=(8, 4),
                                          gridspec_kw={"height_ratios": [1, 3]})
        top.plot(np.arange(len(rolling)), rolling, color="black", gid="hit-rate")
        top.set_ylim(-0.05, 1.05)
        top.set_ylabel("hit rate")
        if title:
            top.set_title(title)
        _address_panel(bottom, addresses, hits)
        bottom.set_xlabel("access")
        fig.tight_layout()
        _save(fig, path)


def pca_overview(path, addresses, hits, projections, rates: dict[str, np.ndarray],
                 labels=None, title: str = "") -> None:
    """Trace on top, principal-component series in the middle, per-policy
    rolling hit rates at the bottom. Optional phase labels shade the top panel."""
    addresses = np.asarray(addresses)
    projections = np.asarray(projections)
    with plt.rc_context(_RC):
        fig, (top, mid, bottom) = plt.subplots(3, 1, sharex=True, figsize=(8, 6),
                                               gridspec_kw={"height_ratios": [2, 2, 1]})
        if labels is not None:
            _shade_phases(top, labels)
        _address_panel(top, addresses, hits, marker_size=1.0)
        if title:
            top.set_title(title)
        t = np.arange(len(projections))
        for c in range(projections.shape[1]):
            mid.plot(t, projections[:, c], color=PC_COLORS[c % len(PC_COLORS)],
                     label=f"PC{c}", gid=f"pc{c}")
        mid.set_ylabel("projection")
        mid.legend(loc="upper right", frameon=False, ncol=projections.shape[1])
        for name, series in rates.items():
            bottom.plot(np.arange(len(series)), series, label=name, gid=f"rate-{name}")
        bottom.set_ylim(-0.05, 1.05)
        bottom.set_ylabel("hit rate")
        bottom.set_xlabel("access")
        bottom.legend(loc="upper right", frameon=False, ncol=max(1, len(rates)))
        fig.tight_layout()
        _save(fig, path)


def _spans(labels):
    labels = np.asarray(labels).tolist()
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            yield start, i, labels[start]
            start = i


def _shade_phases(ax, labels):
    for start, end, phase in _spans(labels):
        ax.axvspan(start, end, color=PHASE_COLORS[phase % len(PHASE_COLORS)],
                   alpha=0.12, linewidth=0)


def phase_bands(path, labels, truth=None, title: str = "") -> None:
    """Timeline of phase ids as colored bands; optional ground truth below."""
    rows = [("found", labels)] + ([("planted", truth)] if truth is not None else [])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(8, 0.6 + 0.5 * len(rows)))
        for y, (name, lab) in enumerate(reversed(rows)):
            for start, end, phase in _spans(lab):
                ax.broken_barh([(start, end - start)], (y + 0.1, 0.8),
                               facecolors=PHASE_COLORS[phase % len(PHASE_COLORS)],
                               gid=f"phase-{name}-{phase}-{start}")
        ax.set_yticks([y + 0.5 for y in range(len(rows))])
        ax.set_yticklabels([name for name, _ in reversed(rows)])
        ax.set_xlim(0, len(labels))
        ax.set_xlabel("access")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def histogram_panel(path, reuse: np.ndarray, dpc: np.ndarray, labels=None) -> None:
    """Per-slice reuse-distance and delta-PC histograms as heat maps."""
    with plt.rc_context(_RC):
        n_rows = 3 if labels is not None else 2
        fig, axes = plt.subplots(n_rows, 1, figsize=(8, 1.6 * n_rows), sharex=True)
        axes[0].imshow(np.asarray(reuse).T, aspect="auto", origin="lower",
                       interpolation="nearest", cmap="viridis")
        axes[0].set_ylabel("reuse bin")
        axes[1].imshow(np.asarray(dpc).T, aspect="auto", origin="lower",
                       interpolation="nearest", cmap="viridis")
        axes[1].set_ylabel("delta-pc bin")
        if labels is not None:
            labels = np.asarray(labels)
            axes[2].imshow(labels[None, :], aspect="auto", interpolation="nearest",
                           cmap=matplotlib.colors.ListedColormap(PHASE_COLORS),
                           vmin=0, vmax=len(PHASE_COLORS) - 1)
            axes[2].set_yticks([])
            axes[2].set_ylabel("phase")
        axes[-1].set_xlabel("slice")
        fig.tight_layout()
        _save(fig, path)
