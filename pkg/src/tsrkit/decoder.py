"""One-stage parsing of raw head outputs into a table annotation.

Pipeline: heatmap peaks (centers and corners) -> corners regressed from each
center -> snapping to detected corners that point back at the same center ->
logical indices read off the row/column interpolation maps -> coordinates
scaled back to full resolution.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree

from .core import Cell, LogicalLoc, Point2, Quad, TableAnnotation, is_convex, logical_overlaps, signed_area
from .raster import RasterMap, atomic_write, read_tcn, write_tcn

HEADS = {
    "heatmap": ("heatmap.tcn", 2),
    "offsets": ("offsets.tcn", 2),
    "center2corners": ("center2corners.tcn", 8),
    "corners2center": ("corners2center.tcn", 8),
    "spans": ("spans.tcn", 2),
    "row_map": ("rowmap.tcn", 1),
    "col_map": ("colmap.tcn", 1),
}


class MissingRasterError(FileNotFoundError):
    pass


@dataclass(eq=False)
class RawNetworkOutput:
    heatmap: RasterMap
    offsets: RasterMap
    center2corners: RasterMap
    corners2center: RasterMap
    spans: RasterMap
    row_map: RasterMap
    col_map: RasterMap
    meta: tuple[int, int, int]  # (H, W, downscale)

    def __post_init__(self):
        shape = (self.heatmap.height, self.heatmap.width)
        for name, (_, chans) in HEADS.items():
            r = getattr(self, name)
            if (r.height, r.width) != shape:
                raise ValueError(f"{name} is {r.height}x{r.width}, expected {shape[0]}x{shape[1]}")
            if r.channels != chans:
                raise ValueError(f"{name} has {r.channels} channels, expected {chans}")

    @property
    def lowres_shape(self) -> tuple[int, int]:
        return self.heatmap.height, self.heatmap.width

    def copy(self) -> "RawNetworkOutput":
        return RawNetworkOutput(**{n: RasterMap(getattr(self, n).data.copy()) for n in HEADS}, meta=self.meta)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, (fname, _) in HEADS.items():
            write_tcn(out / fname, getattr(self, name))
        H, W, ds = self.meta
        atomic_write(out / "meta.json", json.dumps({"H": H, "W": W, "downscale": ds}))

    @classmethod
    def load(cls, in_dir: str | Path) -> "RawNetworkOutput":
        src = Path(in_dir)
        rasters = {}
        for name, (fname, _) in HEADS.items():
            if not (src / fname).is_file():
                raise MissingRasterError(f"missing raster {fname} in {src}")
            rasters[name] = read_tcn(src / fname)
        if not (src / "meta.json").is_file():
            raise MissingRasterError(f"missing meta.json in {src}")
        meta = json.loads((src / "meta.json").read_text())
        return cls(**rasters, meta=(int(meta["H"]), int(meta["W"]), int(meta["downscale"])))


@dataclass(frozen=True)
class DecodeConfig:
    tau_center: float = 0.3
    tau_corner: float = 0.3
    max_k: int = 3000
    r_align: float = 2.0
    eps_back: float = 2.0
    # logical lookups step this far (low-res px) into the cell along both edges at corner 1
    corner_inset: float = 0.75


@dataclass(frozen=True)
class Keypoint:
    position: Point2  # low-res, offset-refined
    score: float
    kind: str  # "center" | "corner"
    pixel: tuple[int, int] = (0, 0)  # (y, x)


@dataclass
class ApproxCell:
    center: Keypoint
    corners: np.ndarray  # (4, 2) low-res
    span: tuple[float, float]
    flags: dict = field(default_factory=dict)


@dataclass
class DecodedTable:
    annotation: TableAnnotation
    scores: list[float]
    diagnostics: list[dict]
    overlaps: list[tuple[int, int]] = field(default_factory=list)

    def diagnostics_dict(self) -> dict:
        return {
            "cells": self.diagnostics,
            "scores": self.scores,
            "logical_overlaps": [list(p) for p in self.overlaps],
        }


def extract_peaks(channel: np.ndarray, tau: float, max_k: int, offsets: np.ndarray | None = None,
                  kind: str = "center") -> list[Keypoint]:
    """8-neighbour local maxima at or above ``tau``, best ``max_k`` first.

    Equal-valued neighbouring maxima (plateaus) keep only the row-major first pixel.
    """
    plane = np.asarray(channel, dtype=np.float64)
    if plane.ndim == 3:
        plane = plane[:, :, 0]
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    local_max = maximum_filter(plane, size=3, mode="constant", cval=-np.inf)
    cand = (plane >= local_max) & (plane >= tau)
    ys, xs = np.nonzero(cand)  # row-major order
    h, w = plane.shape
    kept = np.zeros_like(cand)
    for y, x in zip(ys, xs):
        v = plane[y, x]
        suppressed = False
        # earlier row-major neighbours of a plateau
        for dy, dx in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and cand[yy, xx] and plane[yy, xx] == v:
                suppressed = True
                break
        kept[y, x] = not suppressed
    ys, xs = np.nonzero(kept)
    scores = plane[ys, xs]
    order = np.lexsort((xs, ys, -scores))[:max_k]
    out = []
    for o in order:
        y, x = int(ys[o]), int(xs[o])
        dx, dy = (offsets[y, x, 0], offsets[y, x, 1]) if offsets is not None else (0.0, 0.0)
        out.append(Keypoint(Point2(x + float(dx), y + float(dy)), float(scores[o]), kind, (y, x)))
    return out


def regress_cells(centers: list[Keypoint], center2corners: RasterMap, spans: RasterMap) -> list[ApproxCell]:
    cells = []
    for kp in centers:
        y, x = kp.pixel
        u = center2corners.data[y, x].reshape(4, 2)
        corners = np.array([kp.position.x, kp.position.y]) + u
        s = spans.data[y, x]
        flags = {}
        if abs(signed_area([tuple(c) for c in corners])) <= 1e-12:
            flags["degenerate"] = True
        cells.append(ApproxCell(kp, corners, (float(s[0]), float(s[1])), flags))
    return cells


def align_corners(cells: list[ApproxCell], corner_kps: list[Keypoint], corners2center: RasterMap,
                  r_align: float = 2.0, eps_back: float = 2.0) -> list[ApproxCell]:
    """Snap regressed corners onto detected corner keypoints.

    A keypoint qualifies when it is within ``r_align`` of the regressed corner
    and one of its corners-to-center slots lands within ``eps_back`` of the
    cell's center. The nearest qualifying keypoint wins.
    """
    out = []
    if corner_kps:
        pos = np.array([[k.position.x, k.position.y] for k in corner_kps])
        back = np.stack([pos[j] + corners2center.data[k.pixel[0], k.pixel[1]].reshape(4, 2)
                         for j, k in enumerate(corner_kps)])  # (m, 4, 2)
        tree = cKDTree(pos)
    for cell in cells:
        c = np.array([cell.center.position.x, cell.center.position.y])
        new = cell.corners.copy()
        snapped = [False] * 4
        if corner_kps:
            for k in range(4):
                idx = tree.query_ball_point(cell.corners[k], r_align)
                if not idx:
                    continue
                idx = sorted(idx, key=lambda j: (float(np.hypot(*(pos[j] - cell.corners[k]))), j))
                for j in idx:
                    if (np.hypot(*(back[j] - c).T) <= eps_back).any():
                        new[k] = pos[j]
                        snapped[k] = True
                        break
        flags = dict(cell.flags)
        flags["snapped"] = snapped
        out.append(ApproxCell(cell.center, new, cell.span, flags))
    return out


def _lookup(plane: np.ndarray, x: float, y: float) -> tuple[float, bool]:
    h, w = plane.shape
    ix, iy = math.floor(x + 0.5), math.floor(y + 0.5)
    cx, cy = min(max(ix, 0), w - 1), min(max(iy, 0), h - 1)
    return float(plane[cy, cx]), (cx, cy) != (ix, iy)


def _logical_from(value: float, span: float) -> tuple[int, int, list[str]]:
    flags = []
    start = math.floor(value + 0.5)
    if value < 0:
        flags.append("negative-start")
        start = max(start, 0)
    n = math.floor(span)
    if n < 1:
        flags.append("span-below-one")
        n = 1
    return start, start + n - 1, flags


def assign_logical(cells: list[ApproxCell], row_map: RasterMap, col_map: RasterMap,
                   corner_inset: float = 0.0) -> list[tuple[LogicalLoc, list[str]]]:
    """Start indices from the maps at the upper-left corner, ends from the spans."""
    out = []
    rplane, cplane = row_map.data[:, :, 0], col_map.data[:, :, 0]
    for cell in cells:
        p = cell.corners[0].copy()
        if corner_inset > 0:
            # step into the cell along both edges that meet at corner 1
            for q in (cell.corners[1], cell.corners[3]):
                e = q - cell.corners[0]
                n = float(np.hypot(*e))
                if n > 0:
                    p = p + e * min(corner_inset / n, 0.5)
        rv, rclamp = _lookup(rplane, p[0], p[1])
        cv, cclamp = _lookup(cplane, p[0], p[1])
        rs, re, rflags = _logical_from(rv, cell.span[0])
        cs, ce, cflags = _logical_from(cv, cell.span[1])
        flags = [f"row-{f}" for f in rflags] + [f"col-{f}" for f in cflags]
        if rclamp or cclamp:
            flags.append("lookup-clamped")
        out.append((LogicalLoc(rs, re, cs, ce), flags))
    return out


def decode_table(raw: RawNetworkOutput, config: DecodeConfig = DecodeConfig()) -> DecodedTable:
    H, W, ds = raw.meta
    heat = raw.heatmap.data
    offsets = raw.offsets.data
    centers = extract_peaks(heat[:, :, 0], config.tau_center, config.max_k, offsets, "center")
    if not centers:
        return DecodedTable(TableAnnotation((), W, H), [], [])
    corners = extract_peaks(heat[:, :, 1], config.tau_corner, config.max_k, offsets, "corner")
    approx = regress_cells(centers, raw.center2corners, raw.spans)
    aligned = align_corners(approx, corners, raw.corners2center, config.r_align, config.eps_back)
    logical = assign_logical(aligned, raw.row_map, raw.col_map, config.corner_inset)

    records = []
    for cell, (lg, lflags) in zip(aligned, logical):
        full = cell.corners * ds
        clipped = np.clip(full, [0.0, 0.0], [float(W), float(H)])
        diag = {
            "center": [cell.center.position.x * ds, cell.center.position.y * ds],
            "aligned_corners": int(sum(cell.flags["snapped"])),
            "snapped": cell.flags["snapped"],
            "flags": list(lflags),
        }
        if not np.array_equal(full, clipped):
            diag["flags"].append("coords-clamped")
        if cell.flags.get("degenerate"):
            diag["flags"].append("degenerate-quad")
        pts = [tuple(map(float, p)) for p in clipped]
        if signed_area(pts) <= 0 or not is_convex(pts):
            diag["flags"].append("invalid-quad")
        records.append((Cell(Quad(tuple(pts)), lg), cell.center.score, diag))

    records.sort(key=lambda r: (r[0].logical.row_start, r[0].logical.col_start, r[0].logical.row_end,
                                r[0].logical.col_end, r[0].quad.corners[0].y, r[0].quad.corners[0].x))
    ann = TableAnnotation(tuple(r[0] for r in records), W, H)
    return DecodedTable(ann, [r[1] for r in records], [r[2] for r in records], logical_overlaps(ann))
