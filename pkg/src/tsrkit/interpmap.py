"""Row/column interpolation maps.

Each cell becomes a 4-vertex polygon whose vertices carry a logical value
(row index on the top edge, row_end + 1 on the bottom edge, and likewise for
columns). Polygons are rasterised smallest-first with barycentric linear
interpolation over a 4-point Delaunay triangulation; the first polygon to
reach a pixel owns it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import TableAnnotation, is_convex, shoelace_area
from .raster import RasterMap

log = logging.getLogger(__name__)

INSIDE_TOL = -1e-9
# relative tolerance under which the in-circle test counts as co-circular
COCIRCULAR_RTOL = 1e-12

# triangle vertex triples for the two possible diagonals of a quad
SPLIT_02 = ((0, 1, 2), (0, 2, 3))
SPLIT_13 = ((0, 1, 3), (1, 2, 3))


@dataclass(frozen=True)
class InterpPolygon:
    vertices: tuple[tuple[float, float, float], ...]

    @property
    def xy(self) -> np.ndarray:
        return np.array([v[:2] for v in self.vertices], dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        return np.array([v[2] for v in self.vertices], dtype=np.float64)


@dataclass(frozen=True)
class InterpResult:
    interp: RasterMap
    mask: RasterMap
    warnings: tuple[str, ...] = field(default=(), compare=False)


def build_row_polygons(ann: TableAnnotation) -> list[InterpPolygon]:
    polys = []
    for cell in ann.cells:
        top, bottom = cell.logical.row_start, cell.logical.row_end + 1
        o = (top, top, bottom, bottom)
        polys.append(InterpPolygon(tuple((p.x, p.y, float(v)) for p, v in zip(cell.quad.corners, o))))
    return polys


def build_col_polygons(ann: TableAnnotation) -> list[InterpPolygon]:
    polys = []
    for cell in ann.cells:
        left, right = cell.logical.col_start, cell.logical.col_end + 1
        o = (left, right, right, left)
        polys.append(InterpPolygon(tuple((p.x, p.y, float(v)) for p, v in zip(cell.quad.corners, o))))
    return polys


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _incircle(a, b, c, d) -> float:
    rows = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        rows.append((dx, dy, dx * dx + dy * dy))
    (a0, a1, a2), (b0, b1, b2), (c0, c1, c2) = rows
    return a0 * (b1 * c2 - b2 * c1) - a1 * (b0 * c2 - b2 * c0) + a2 * (b0 * c1 - b1 * c0)


def quad_triangulation(pts: Sequence[Sequence[float]]) -> tuple[tuple[int, int, int], ...] | None:
    """Delaunay split of a convex quad.

    Uses the 0-2 diagonal unless vertex 3 lies strictly inside the
    circumcircle of (0, 1, 2). Co-circular corners (rectangles) keep 0-2.
    Returns None when the points span no area.
    """
    p = [tuple(map(float, q)) for q in pts]
    scale = max(max(abs(q[0] - p[0][0]), abs(q[1] - p[0][1])) for q in p)
    if scale == 0.0:
        return None
    area_tol = 1e-12 * scale * scale
    usable_02 = all(abs(_orient(p[i], p[j], p[k])) > area_tol for i, j, k in SPLIT_02)
    usable_13 = all(abs(_orient(p[i], p[j], p[k])) > area_tol for i, j, k in SPLIT_13)
    if not usable_02 and not usable_13:
        # at most one triangle has area: keep whichever one does
        for tri in SPLIT_02 + SPLIT_13:
            if abs(_orient(*(p[t] for t in tri))) > area_tol:
                return (tri,)
        return None
    if usable_02 and not usable_13:
        return SPLIT_02
    if usable_13 and not usable_02:
        return SPLIT_13
    o = _orient(p[0], p[1], p[2])
    inc = _incircle(p[0], p[1], p[2], p[3]) * (1.0 if o > 0 else -1.0)
    if inc > COCIRCULAR_RTOL * scale ** 4:
        return SPLIT_13
    return SPLIT_02


def _polygon_area(xy: np.ndarray) -> float:
    return shoelace_area([tuple(v) for v in xy])


def _rasterize(xy_all: np.ndarray, values_all: np.ndarray, height: int, width: int):
    """Shared pass of the polygon interpolation over K value channels.

    xy_all: (n, z, 2); values_all: (n, z, K). Returns (interp (H, W, K), mask (H, W), warnings).
    """
    n_chan = values_all.shape[2] if values_all.ndim == 3 else 1
    interp = np.zeros((height, width, n_chan))
    mask = np.zeros((height, width), dtype=bool)
    warnings: list[str] = []
    if len(xy_all) == 0:
        return interp, mask, warnings

    areas = np.array([_polygon_area(xy) for xy in xy_all])
    order = np.argsort(areas, kind="stable")
    for k in order:
        xy = xy_all[k]
        vals = values_all[k]
        if xy.shape[0] != 4:
            raise ValueError(f"polygon {k} has {xy.shape[0]} vertices; only quads are supported")
        if not is_convex([tuple(v) for v in xy]):
            warnings.append(f"polygon {k}: concave, skipped")
            continue
        x_min = math.floor(xy[:, 0].min())
        y_min = math.floor(xy[:, 1].min())
        x_max = math.ceil(xy[:, 0].max())
        y_max = math.ceil(xy[:, 1].max())
        w = x_max - x_min + 1
        h = y_max - y_min + 1
        local = xy - np.array([x_min, y_min], dtype=np.float64)
        tris = quad_triangulation(local)
        if tris is None or len(tris) == 0:
            warnings.append(f"polygon {k}: fewer than 3 non-collinear vertices, skipped")
            continue

        px = np.arange(w, dtype=np.float64)[None, :]
        py = np.arange(h, dtype=np.float64)[:, None]
        q = np.full((h, w, n_chan), -1.0)
        claimed = np.zeros((h, w), dtype=bool)
        for ia, ib, ic in tris:
            ax, ay = local[ia]
            bx, by = local[ib]
            cx, cy = local[ic]
            den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
            l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / den
            l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / den
            l3 = 1.0 - l1 - l2
            inside = (l1 >= INSIDE_TOL) & (l2 >= INSIDE_TOL) & (l3 >= INSIDE_TOL) & ~claimed
            # third weight computed directly so it is exactly 0 on the a-b edge
            l3d = ((ay - by) * (px - bx) + (bx - ax) * (py - by)) / den
            weights = (l1, l2, l3d)
            anchor = np.argmax(np.stack(np.broadcast_arrays(l1, l2, l3d)), axis=0)
            for ch in range(n_chan):
                tri_vals = np.array([vals[ia, ch], vals[ib, ch], vals[ic, ch]])
                # anchored at the heaviest vertex: exact on edges whose ends share a value
                va = tri_vals[anchor]
                val = va + weights[0] * (tri_vals[0] - va) + weights[1] * (tri_vals[1] - va) \
                    + weights[2] * (tri_vals[2] - va)
                # round-off can push a boundary value a hair below zero
                q[:, :, ch] = np.where(inside, np.maximum(val, 0.0), q[:, :, ch])
            claimed |= inside

        # clip the local window to the raster
        gx0, gy0 = max(x_min, 0), max(y_min, 0)
        gx1, gy1 = min(x_min + w, width), min(y_min + h, height)
        if gx0 >= gx1 or gy0 >= gy1:
            continue
        qw = q[gy0 - y_min:gy1 - y_min, gx0 - x_min:gx1 - x_min]
        cw = claimed[gy0 - y_min:gy1 - y_min, gx0 - x_min:gx1 - x_min]
        mw = mask[gy0:gy1, gx0:gx1]
        write = cw & ~mw
        iw = interp[gy0:gy1, gx0:gx1]
        iw[write] = qw[write]
        mw |= write
    for msg in warnings:
        log.warning(msg)
    return interp, mask, warnings


def interpolate_polygons(polys: Sequence[InterpPolygon], height: int, width: int) -> InterpResult:
    if height < 1 or width < 1:
        raise ValueError("raster size must be at least 1x1")
    for i, poly in enumerate(polys):
        if len(poly.vertices) != 4:
            raise ValueError(f"polygon {i} has {len(poly.vertices)} vertices; only quads are supported")
    if polys:
        xy = np.stack([p.xy for p in polys])
        vals = np.stack([p.values for p in polys])[:, :, None]
    else:
        xy = np.zeros((0, 4, 2))
        vals = np.zeros((0, 4, 1))
    interp, mask, warnings = _rasterize(xy, vals, height, width)
    return InterpResult(RasterMap(interp), RasterMap(mask.astype(np.float64)), tuple(warnings))


def generate_interp_maps(ann: TableAnnotation) -> tuple[InterpResult, InterpResult]:
    """Row and column maps at full resolution.

    Both value sets ride on one rasterisation pass, which is what makes the
    two masks identical.
    """
    H, W = ann.image_height, ann.image_width
    rows = build_row_polygons(ann)
    cols = build_col_polygons(ann)
    if ann.cells:
        xy = np.stack([p.xy for p in rows])
        vals = np.stack([np.stack([r.values, c.values], axis=1) for r, c in zip(rows, cols)])
    else:
        xy = np.zeros((0, 4, 2))
        vals = np.zeros((0, 4, 2))
    interp, mask, warnings = _rasterize(xy, vals, H, W)
    m = RasterMap(mask.astype(np.float64))
    return (InterpResult(RasterMap(interp[:, :, 0]), m, tuple(warnings)),
            InterpResult(RasterMap(interp[:, :, 1]), m, tuple(warnings)))


def downsample_map(m: RasterMap, factor: int) -> RasterMap:
    """Stride sampling: output (j, i) takes input (j*factor, i*factor)."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return RasterMap(m.data[::factor, ::factor, :].copy())
