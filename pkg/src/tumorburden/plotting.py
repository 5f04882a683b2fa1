"""Figures rendered next to the delimited reports.

Uses the object-oriented Agg API (no pyplot state), so figures can be drawn
from batch worker threads.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .agreement import BlandAltman
from .segments import RanoMeasurement
from .volume import BinaryMask

DPI = 120
_MAJOR = "#d62728"
_PERP = "#1f77b4"
_UNITLESS = ("dice", "iou", "sensitivity", "specificity")


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    return path


def rano_overlay(et: BinaryMask, measurement: RanoMeasurement, path, max_panels: int = 5) -> Path:
    """One panel per measured lesion: its best slice with both diameters drawn in mm."""
    lesions = [m for m in measurement.lesions if m.slice_index is not None][:max_panels]
    dx, dy = et.spacing.dx, et.spacing.dy
    ncols = max(1, len(lesions))
    fig = Figure(figsize=(3.2 * ncols, 3.4))
    if not lesions:
        ax = fig.add_subplot(1, 1, 1)
        ax.text(0.5, 0.5, "no measurable lesion", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
        return _save(fig, path)
    for idx, lesion in enumerate(lesions):
        ax = fig.add_subplot(1, ncols, idx + 1)
        plane = et.data[:, :, lesion.slice_index]
        nx, ny = plane.shape
        extent = (-0.5 * dx, (nx - 0.5) * dx, (ny - 0.5) * dy, -0.5 * dy)
        ax.imshow(plane.T, cmap="gray", extent=extent, interpolation="nearest")
        for seg, colour in ((lesion.major, _MAJOR), (lesion.perpendicular, _PERP)):
            if seg is not None:
                ax.plot([seg.p0_mm[0], seg.p1_mm[0]], [seg.p0_mm[1], seg.p1_mm[1]], color=colour, lw=1.5)
        state = "" if lesion.measurable else " (not measurable)"
        ax.set_title(f"lesion {lesion.component_id}, z={lesion.slice_index}\n"
                     f"{lesion.product_mm2:.1f} mm$^2${state}", fontsize=8)
        ax.set_xlabel("x (mm)", fontsize=7)
        ax.set_ylabel("y (mm)", fontsize=7)
        ax.tick_params(labelsize=6)
    fig.suptitle(f"RANO ({measurement.algorithm}): {measurement.sum_product_mm2:.1f} mm$^2$", fontsize=9)
    return _save(fig, path)


def bland_altman_plot(ba: BlandAltman, path, labels=("A", "B"), units: str = "") -> Path:
    fig = Figure(figsize=(4.5, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    ax.scatter(ba.means, ba.differences, s=14, color="k", alpha=0.7)
    for y, style in ((ba.bias, "-"), (ba.loa_low, "--"), (ba.loa_high, "--")):
        ax.axhline(y, color=_MAJOR, ls=style, lw=1)
    x_right = float(np.max(ba.means)) if len(ba.means) else 0.0
    ax.annotate(f"bias {ba.bias:.3g}", (x_right, ba.bias), fontsize=7, ha="right", va="bottom")
    ax.annotate(f"+1.96 SD {ba.loa_high:.3g}", (x_right, ba.loa_high), fontsize=7, ha="right", va="bottom")
    ax.annotate(f"-1.96 SD {ba.loa_low:.3g}", (x_right, ba.loa_low), fontsize=7, ha="right", va="top")
    suffix = f" ({units})" if units else ""
    ax.set_xlabel(f"mean of {labels[0]} and {labels[1]}{suffix}")
    ax.set_ylabel(f"{labels[0]} - {labels[1]}{suffix}")
    return _save(fig, path)


def cohort_summary_plot(rows, path) -> Path:
    """Median with interquartile whiskers for the unitless per-class metrics."""
    rows = [r for r in rows if r.get("kind") == "metric" and r.get("n") and r.get("name") in _UNITLESS]
    fig = Figure(figsize=(max(4.0, 0.45 * len(rows) + 1.5), 3.5))
    ax = fig.add_subplot(1, 1, 1)
    if not rows:
        ax.text(0.5, 0.5, "no cohort statistics", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
        return _save(fig, path)
    x = np.arange(len(rows))
    med = np.array([r["median"] for r in rows], dtype=float)
    lo = med - np.array([r["p25"] for r in rows], dtype=float)
    hi = np.array([r["p75"] for r in rows], dtype=float) - med
    ax.errorbar(x, med, yerr=[lo, hi], fmt="o", color="k", ms=4, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r['name']}\n{r['class']}" for r in rows], fontsize=6, rotation=90)
    ax.set_ylabel("median (IQR)")
    return _save(fig, path)
