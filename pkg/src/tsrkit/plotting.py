"""PNG renderings of interpolation maps, annotations and evaluation reports.

Interpolation maps use a ramp from pale grey to red driven by how close a
value is to an integer: ``s = 1 - 2 * |v - round(v)|``. Pixels with
``s >= SATURATION`` are drawn in pure red, so every logical boundary shows
up as a saturated band. Pixels outside the mask take the background colour.
"""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .core import TableAnnotation  # noqa: E402
from .raster import atomic_write  # noqa: E402

SATURATION = 0.9
BACKGROUND = (1.0, 1.0, 1.0)
RED = (0.85, 0.0, 0.0)
NEAR_INTEGER = LinearSegmentedColormap.from_list(
    "near_integer", [(0.0, (0.93, 0.93, 0.93)), (0.5, (0.98, 0.75, 0.55)), (1.0, RED)])


def integer_closeness(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    return 1.0 - 2.0 * np.abs(v - np.round(v))


def map_to_rgb(values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """(H, W) map -> (H, W, 3) uint8 image."""
    s = integer_closeness(values)
    # everything at or above the threshold lands on the top of the ramp
    rgb = NEAR_INTEGER(np.clip(s / SATURATION, 0.0, 1.0))[:, :, :3]
    if mask is not None:
        rgb[np.asarray(mask) <= 0.5] = BACKGROUND
    return np.round(rgb * 255).astype(np.uint8)


def saturated(rgb: np.ndarray) -> np.ndarray:
    """Boolean mask of pixels drawn in the saturated colour."""
    return np.all(rgb[:, :, :3] == np.round(np.array(RED) * 255).astype(np.uint8), axis=2)


def save_map_png(values: np.ndarray, path: str | Path, mask: np.ndarray | None = None) -> None:
    """One image pixel per map pixel."""
    buf = io.BytesIO()
    plt.imsave(buf, map_to_rgb(values, mask), format="png", metadata={"Software": None})
    atomic_write(path, buf.getvalue())


def _save(fig: Figure, path, dpi: int) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, dpi=dpi, format="png", metadata={"Software": None})
    atomic_write(path, buf.getvalue())


def plot_annotation(ann: TableAnnotation, path: str | Path, title: str | None = None, dpi: int = 100) -> int:
    """Cell polygons over the image frame; returns the number of polygons drawn."""
    W, H = ann.image_width, ann.image_height
    # Figure rather than pyplot: safe to call from worker threads
    fig = Figure(figsize=(6, 6 * H / max(W, 1)))
    ax = fig.add_subplot()
    ax.set_xlim(0, W)
    ax.set_ylim(H, 0)
    ax.set_aspect("equal")
    for i, cell in enumerate(ann.cells):
        ax.add_patch(Polygon(cell.quad.as_array(), closed=True, fill=False, lw=0.8, ec=f"C{i % 10}"))
    if title:
        ax.set_title(title, fontsize=9)
    n = len(ax.patches)
    _save(fig, path, dpi)
    return n


def plot_report(docs: dict[str, dict], path: str | Path) -> None:
    """Per-document bars for physical F1, logical accuracy and TEDS."""
    names = sorted(docs)
    keys = (("physical F1", lambda d: d["physical"]["f1"]),
            ("logical Acc", lambda d: d["logical"]["acc"]),
            ("TEDS", lambda d: d["teds"]))
    x = np.arange(len(names))
    fig = Figure(figsize=(max(4.0, 0.35 * len(names) + 2), 3.2))
    ax = fig.add_subplot()
    width = 0.27
    for k, (label, get) in enumerate(keys):
        ax.bar(x + (k - 1) * width, [get(docs[n]) for n in names], width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    _save(fig, path, 120)
