"""Selective gridding: split spanning cells into unit grid cells.

Every cell corner votes for the row and column divider at its logical
boundary. Each divider is fitted with a total-least-squares line, missing
dividers are interpolated from their fitted neighbours, and grid corners are
the row/column divider intersections.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Cell, LogicalLoc, Point2, Quad, TableAnnotation

# mean perpendicular residual (px) above which a table counts as deformed
MAX_RESIDUAL = 3.0
MIN_DET = 1e-9


class GridifyError(ValueError):
    pass


@dataclass
class DividerLine:
    axis: str  # "row" | "column"
    index: int
    support: list[Point2] = field(default_factory=list)
    model: tuple[float, float, float] | None = None  # a*x + b*y + c = 0, a^2 + b^2 = 1
    residual: float = 0.0
    synthesized: bool = False


def group_dividers(ann: TableAnnotation) -> tuple[list[DividerLine], list[DividerLine]]:
    R, C = ann.n_rows, ann.n_cols
    rows = [DividerLine("row", i) for i in range(R + 1)]
    cols = [DividerLine("column", j) for j in range(C + 1)]
    for cell in ann.cells:
        lg = cell.logical
        p1, p2, p3, p4 = cell.quad.corners
        top, bottom = lg.row_start, lg.row_end + 1
        left, right = lg.col_start, lg.col_end + 1
        rows[top].support += [p1, p2]
        rows[bottom].support += [p4, p3]
        cols[left].support += [p1, p4]
        cols[right].support += [p2, p3]
    return rows, cols


def _normalise(a: float, b: float, c: float, axis: str) -> tuple[float, float, float]:
    n = math.hypot(a, b)
    a, b, c = a / n, b / n, c / n
    # row dividers get a normal pointing down (+y), column dividers one pointing right (+x)
    key = (b, a) if axis == "row" else (a, b)
    if key[0] < 0 or (key[0] == 0 and key[1] < 0):
        a, b, c = -a, -b, -c
    return a, b, c


def fit_line(points, axis: str = "row") -> tuple[tuple[float, float, float], float]:
    """Total-least-squares line through ``points``; returns (model, mean residual)."""
    pts = np.asarray([(p[0], p[1]) for p in points], dtype=np.float64)
    mx, my = pts.mean(axis=0)
    dx, dy = pts[:, 0] - mx, pts[:, 1] - my
    sxx, syy, sxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    if sxy == 0.0:
        # axis-parallel spread: take the normal straight from the smaller variance, no trig round-off
        horizontal = sxx > syy or (sxx == syy and axis == "row")
        a, b = (0.0, 1.0) if horizontal else (1.0, 0.0)
    else:
        theta = 0.5 * math.atan2(2 * sxy, sxx - syy)
        a, b = -math.sin(theta), math.cos(theta)
    model = _normalise(a, b, -(a * mx + b * my), axis)
    residual = float(np.abs(pts @ np.array(model[:2]) + model[2]).mean())
    return model, residual


def _distinct(points) -> int:
    return len({(float(p[0]), float(p[1])) for p in points})


def fit_and_complete(dividers: list[DividerLine], max_residual: float = MAX_RESIDUAL) -> list[DividerLine]:
    """Fit every supported divider and interpolate the rest by index."""
    if not dividers:
        raise GridifyError("ungriddable annotation: no dividers")
    axis = dividers[0].axis
    out = [DividerLine(d.axis, d.index, list(d.support)) for d in dividers]
    fitted = []
    for d in out:
        if _distinct(d.support) >= 2:
            d.model, d.residual = fit_line(d.support, axis)
            if d.residual > max_residual:
                raise GridifyError(
                    f"{axis} divider {d.index} deviates from a line by {d.residual:.2f} px on average "
                    f"(limit {max_residual:g}); table too deformed to gridify")
            fitted.append(d.index)
    if not fitted or fitted[0] != out[0].index or fitted[-1] != out[-1].index:
        raise GridifyError(f"ungriddable annotation: outer {axis} dividers lack support")
    pos = {d.index: k for k, d in enumerate(out)}
    for d in out:
        if d.model is not None:
            continue
        lo = max(i for i in fitted if i < d.index)
        hi = min(i for i in fitted if i > d.index)
        t = (d.index - lo) / (hi - lo)
        m_lo = np.array(out[pos[lo]].model)
        m_hi = np.array(out[pos[hi]].model)
        mix = (1 - t) * m_lo + t * m_hi
        if math.hypot(mix[0], mix[1]) < 1e-12:
            raise GridifyError(f"cannot interpolate {axis} divider {d.index} between opposed neighbours")
        d.model = _normalise(*map(float, mix), axis)
        d.synthesized = True
    return out


def intersect(row: DividerLine, col: DividerLine) -> Point2:
    a1, b1, c1 = row.model
    a2, b2, c2 = col.model
    det = a1 * b2 - a2 * b1
    if abs(det) < MIN_DET:
        raise GridifyError(f"row divider {row.index} and column divider {col.index} are nearly parallel "
                           f"(|det| = {abs(det):.3g})")
    x = (b1 * c2 - b2 * c1) / det
    y = (a2 * c1 - a1 * c2) / det
    return Point2(x, y)


def cells_to_grids(ann: TableAnnotation, max_residual: float = MAX_RESIDUAL) -> TableAnnotation:
    """Grid-form annotation: R x C unit cells in row-major order."""
    if not ann.cells:
        return ann
    rows, cols = group_dividers(ann)
    rows = fit_and_complete(rows, max_residual)
    cols = fit_and_complete(cols, max_residual)
    grid = [[intersect(r, c) for c in cols] for r in rows]
    cells = []
    for r in range(len(rows) - 1):
        for c in range(len(cols) - 1):
            quad = Quad((grid[r][c], grid[r][c + 1], grid[r + 1][c + 1], grid[r + 1][c]))
            cells.append(Cell(quad, LogicalLoc(r, r, c, c)))
    return TableAnnotation(tuple(cells), ann.image_width, ann.image_height)
