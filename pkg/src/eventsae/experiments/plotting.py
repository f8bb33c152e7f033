"""Deterministic SVG figures (heatmap, dose-response curves) via matplotlib's
SVG canvas. No pyplot state is touched."""

from __future__ import annotations

import io

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

_RC = {"svg.hashsalt": "eventsae", "svg.fonttype": "none", "font.size": 8}


def _render(fig):
    buf = io.StringIO()
    with matplotlib.rc_context(_RC):
        FigureCanvasSVG(fig)
        fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    return buf.getvalue().encode("utf-8")


def _color(cmap, v):
    return tuple(float(c) for c in cmap(v))


def heatmap_svg(values, row_labels, col_labels, row_strips=None, title=""):
    """Cells carry ids ``cell-r-c``; row labels ``rowlabel-r``.

    ``row_strips`` is an optional list of ``(name, labels)`` coloured side strips
    (for example task identity and phase).
    """
    V = np.asarray(values, dtype=np.float64)
    n_r, n_c = V.shape
    strips = row_strips or []
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(1.8 + 0.45 * (n_c + len(strips)), 0.9 + 0.3 * n_r))
        ax = fig.add_axes([0.3, 0.12, 0.6, 0.78])
        cmap = matplotlib.colormaps["viridis"]
        hi = V.max() if V.size and V.max() > 0 else 1.0
        tab = matplotlib.colormaps["tab10"]
        for s, (_, labels) in enumerate(strips):
            levels = sorted(set(labels))
            for r, lab in enumerate(labels):
                ax.add_patch(Rectangle((-len(strips) + s - 0.2, n_r - 1 - r), 0.9, 1,
                                       facecolor=_color(tab, levels.index(lab) % 10),
                                       gid=f"strip-{s}-{r}"))
        for r in range(n_r):
            for c in range(n_c):
                ax.add_patch(Rectangle((c, n_r - 1 - r), 1, 1, facecolor=_color(cmap, V[r, c] / hi),
                                       edgecolor="white", linewidth=0.5, gid=f"cell-{r}-{c}"))
        ax.set_xlim(-len(strips) - 0.3, n_c)
        ax.set_ylim(0, n_r)
        ax.set_xticks(np.arange(n_c) + 0.5)
        ax.set_xticklabels([str(c) for c in col_labels], rotation=90)
        ax.set_yticks([])
        for r, lab in enumerate(row_labels):
            ax.text(-len(strips) - 0.4, n_r - 1 - r + 0.5, str(lab), ha="right", va="center",
                    gid=f"rowlabel-{r}")
        for side in ("top", "right", "left"):
            ax.spines[side].set_visible(False)
        ax.set_title(title)
        return _render(fig)


def curves_svg(curves, title="SR vs alpha"):
    """One line per dose-response curve; ``curves`` is ``[(label, alphas, srs)]``."""
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(4.0, 3.0))
        ax = fig.add_axes([0.15, 0.15, 0.8, 0.75])
        for i, (label, alphas, srs) in enumerate(curves):
            ax.plot(alphas, 100 * np.asarray(srs), marker="o", label=str(label), gid=f"curve-{i}")
        ax.set_xlabel("alpha")
        ax.set_ylabel("success rate (%)")
        ax.set_ylim(-5, 105)
        ax.set_title(title)
        if curves:
            ax.legend(loc="lower right")
        return _render(fig)
