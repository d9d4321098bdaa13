"""Domain types for table cells plus the small amount of plane geometry every
other module leans on (areas, convexity, convex IoU).

Coordinates follow image conventions: origin top-left, x to the right, y down.
A quad listed clockwise on screen therefore has a *positive* shoelace sum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class Point2(NamedTuple):
    x: float
    y: float


class LogicalLoc(NamedTuple):
    row_start: int
    row_end: int
    col_start: int
    col_end: int

    @property
    def row_span(self) -> int:
        return self.row_end - self.row_start + 1

    @property
    def col_span(self) -> int:
        return self.col_end - self.col_start + 1


def signed_area(points: Sequence[Sequence[float]]) -> float:
    """Half the shoelace sum; positive for clockwise order in image coordinates."""
    s = 0.0
    n = len(points)
    for i in range(n):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def shoelace_area(quad) -> float:
    pts = quad.corners if isinstance(quad, Quad) else quad
    return abs(signed_area(pts))


def is_convex(points: Sequence[Sequence[float]], eps: float = 1e-12) -> bool:
    """True when all turns share one sign (collinear turns tolerated)."""
    n = len(points)
    sign = 0
    for i in range(n):
        ax, ay = points[i]
        bx, by = points[(i + 1) % n]
        cx, cy = points[(i + 2) % n]
        cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx)
        if abs(cross) <= eps:
            continue
        s = 1 if cross > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return False
    return True


def canonical_corner_order(points: Sequence[Sequence[float]]) -> list[Point2]:
    """Reorder four corners clockwise, starting from the upper-left one.

    Upper-left is the corner minimising ``x + y``; ties go to the smaller x.
    """
    pts = [Point2(float(x), float(y)) for x, y in points]
    if signed_area(pts) < 0:
        pts = pts[::-1]
    start = min(range(len(pts)), key=lambda i: (pts[i].x + pts[i].y, pts[i].x))
    return pts[start:] + pts[:start]


@dataclass(frozen=True)
class Quad:
    corners: tuple[Point2, Point2, Point2, Point2]

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError(f"a quad needs exactly 4 corners, got {len(self.corners)}")
        object.__setattr__(self, "corners", tuple(Point2(float(x), float(y)) for x, y in self.corners))

    @classmethod
    def from_points(cls, points: Iterable[Sequence[float]], normalize: bool = True) -> "Quad":
        pts = [tuple(p) for p in points]
        if len(pts) != 4:
            raise ValueError(f"a quad needs exactly 4 corners, got {len(pts)}")
        return cls(tuple(canonical_corner_order(pts)) if normalize else tuple(pts))

    @classmethod
    def from_flat(cls, flat: Sequence[float], normalize: bool = True) -> "Quad":
        if len(flat) != 8:
            raise ValueError(f"flat quad needs 8 numbers, got {len(flat)}")
        return cls.from_points(zip(flat[0::2], flat[1::2]), normalize=normalize)

    @classmethod
    def from_box(cls, x0: float, y0: float, x1: float, y1: float) -> "Quad":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.corners, dtype=np.float64)

    def flat(self) -> list[float]:
        return [v for p in self.corners for v in p]

    @property
    def area(self) -> float:
        return shoelace_area(self.corners)

    @property
    def center(self) -> Point2:
        return Point2(sum(p.x for p in self.corners) / 4.0, sum(p.y for p in self.corners) / 4.0)


@dataclass(frozen=True)
class Cell:
    quad: Quad
    logical: LogicalLoc

    def __post_init__(self):
        object.__setattr__(self, "logical", LogicalLoc(*(int(v) for v in self.logical)))


@dataclass(frozen=True)
class TableAnnotation:
    cells: tuple[Cell, ...]
    image_width: int
    image_height: int

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def n_rows(self) -> int:
        return max((c.logical.row_end for c in self.cells), default=-1) + 1

    @property
    def n_cols(self) -> int:
        return max((c.logical.col_end for c in self.cells), default=-1) + 1

    def corners_array(self) -> np.ndarray:
        """(n, 4, 2) float array of all cell corners."""
        if not self.cells:
            return np.zeros((0, 4, 2))
        return np.stack([c.quad.as_array() for c in self.cells])

    def to_dict(self) -> dict:
        return {
            "image_width": int(self.image_width),
            "image_height": int(self.image_height),
            "cells": [{"quad": c.quad.flat(), "logical": list(c.logical)} for c in self.cells],
        }

    @classmethod
    def from_dict(cls, data: dict, normalize: bool = True) -> "TableAnnotation":
        try:
            width = data["image_width"]
            height = data["image_height"]
            raw_cells = data["cells"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"annotation is missing a required key: {exc}") from None
        if not isinstance(width, int) or not isinstance(height, int):
            raise ValueError("image_width and image_height must be integers")
        if not isinstance(raw_cells, list):
            raise ValueError("cells must be a list")
        cells = []
        for i, rc in enumerate(raw_cells):
            if not isinstance(rc, dict):
                raise ValueError(f"cell {i}: expected an object")
            quad, logical = rc.get("quad"), rc.get("logical")
            if not isinstance(quad, list) or len(quad) != 8 or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in quad):
                raise ValueError(f"cell {i}: quad must be a list of 8 numbers")
            if not isinstance(logical, list) or len(logical) != 4 or not all(isinstance(v, int) for v in logical):
                raise ValueError(f"cell {i}: logical must be a list of 4 integers")
            cells.append(Cell(Quad.from_flat([float(v) for v in quad], normalize=normalize), LogicalLoc(*logical)))
        return cls(tuple(cells), width, height)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TableAnnotation":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed annotation JSON: {exc}") from None
        return cls.from_dict(data)


@dataclass(frozen=True)
class LossConfig:
    lambda_u: float = 1.0
    lambda_v: float = 0.5
    lambda_e: float = 0.2
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    span_cap: float = 0.2
    downscale: int = 4

    def __post_init__(self):
        for name in ("lambda_u", "lambda_v", "lambda_e", "focal_alpha", "focal_beta", "span_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.downscale) != self.downscale or self.downscale < 1:
            raise ValueError("downscale must be an integer >= 1")


# --------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    cells: tuple[int, ...] = field(default=())

    def __str__(self) -> str:
        where = ",".join(str(c) for c in self.cells)
        return f"[{self.code}] cells {where}: {self.message}" if self.cells else f"[{self.code}] {self.message}"


def _rects_overlap(a: LogicalLoc, b: LogicalLoc) -> bool:
    return (a.row_start <= b.row_end and b.row_start <= a.row_end
            and a.col_start <= b.col_end and b.col_start <= a.col_end)


def validate_annotation(ann: TableAnnotation, check_overlap: bool = True) -> list[Violation]:
    """Collect every broken invariant; an empty list means the table is valid."""
    report: list[Violation] = []
    W, H = ann.image_width, ann.image_height
    if W <= 0 or H <= 0:
        report.append(Violation("image-size", f"image size must be positive, got {W}x{H}"))

    good_logical = []
    for i, cell in enumerate(ann.cells):
        pts = cell.quad.corners
        if not all(math.isfinite(v) for p in pts for v in p):
            report.append(Violation("non-finite", "quad has NaN or infinite coordinates", (i,)))
            continue
        sa = signed_area(pts)
        if abs(sa) <= 0.0:
            report.append(Violation("degenerate", "quad has zero area", (i,)))
        elif sa < 0:
            report.append(Violation("orientation", "quad corners are counter-clockwise", (i,)))
        if not is_convex(pts):
            report.append(Violation("concave", "quad is not convex", (i,)))
        if any(p.x < 0 or p.x > W or p.y < 0 or p.y > H for p in pts):
            report.append(Violation("out-of-bounds", f"quad leaves the {W}x{H} image", (i,)))
        lg = cell.logical
        if min(lg) < 0:
            report.append(Violation("negative-index", f"logical {tuple(lg)} has a negative index", (i,)))
        elif lg.row_end < lg.row_start or lg.col_end < lg.col_start:
            report.append(Violation("inverted-range", f"logical {tuple(lg)} ends before it starts", (i,)))
        else:
            good_logical.append(i)

    seen: dict[LogicalLoc, int] = {}
    unique = []
    for i in good_logical:
        lg = ann.cells[i].logical
        if lg in seen:
            report.append(Violation("duplicate-logical", f"logical {tuple(lg)} repeated", (seen[lg], i)))
        else:
            seen[lg] = i
            unique.append(i)

    if check_overlap:
        for i, j in logical_overlaps(ann, unique):
            report.append(Violation("logical-overlap", "logical rectangles overlap", (i, j)))
    return report


def logical_overlaps(ann: TableAnnotation, indices: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """Pairs of cells whose logical rectangles intersect, sorted."""
    idx = list(range(len(ann.cells))) if indices is None else list(indices)
    order = sorted(idx, key=lambda i: ann.cells[i].logical.row_start)
    pairs = []
    # sweep over row_start; an active cell stays until its row_end is passed
    active: list[int] = []
    for i in order:
        a = ann.cells[i].logical
        active = [j for j in active if ann.cells[j].logical.row_end >= a.row_start]
        for j in active:
            if _rects_overlap(a, ann.cells[j].logical):
                pairs.append((min(i, j), max(i, j)))
        active.append(i)
    return sorted(pairs)


# ------------------------------------------------------------------------ IoU


def _clip_convex(subject: list[tuple[float, float]], clip: list[tuple[float, float]]) -> list[tuple[float, float]]:
    # both polygons positively oriented; inside of edge (p, q) is cross >= 0
    out = subject
    cp1 = clip[-1]
    for cp2 in clip:
        if not out:
            break
        inp, out = out, []
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0])

        s = inp[-1]
        s_side = side(s)
        for e in inp:
            e_side = side(e)
            if e_side >= 0:
                if s_side < 0:
                    t = s_side / (s_side - e_side)
                    out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
                out.append(e)
            elif s_side >= 0:
                t = s_side / (s_side - e_side)
                out.append((s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1])))
            s, s_side = e, e_side
        cp1 = cp2
    return out


def _oriented(quad) -> list[tuple[float, float]] | None:
    pts = [tuple(map(float, p)) for p in (quad.corners if isinstance(quad, Quad) else quad)]
    sa = signed_area(pts)
    if sa == 0.0:
        return None
    if not is_convex(pts):
        raise ValueError("polygon_iou needs convex quads")
    return pts if sa > 0 else pts[::-1]


def polygon_iou(a, b) -> float:
    """Intersection over union of two convex quads (0 for degenerate input)."""
    pa, pb = _oriented(a), _oriented(b)
    if pa is None or pb is None:
        return 0.0
    inter_pts = _clip_convex(pa, pb)
    inter = abs(signed_area(inter_pts)) if len(inter_pts) >= 3 else 0.0
    union = abs(signed_area(pa)) + abs(signed_area(pb)) - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))
