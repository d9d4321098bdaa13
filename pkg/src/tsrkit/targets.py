"""Ground-truth tensors at network-output resolution.

Everything sparse is stored in low-resolution units (full-res pixels divided
by ``cfg.downscale``) and keyed by the integer low-res pixel it lives on.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LossConfig, TableAnnotation
from .interpmap import downsample_map, generate_interp_maps
from .raster import RasterMap, atomic_write, read_tcn, write_tcn

log = logging.getLogger(__name__)

MIN_OVERLAP = 0.7
SLOTS = 4


@dataclass(frozen=True)
class OffsetEntry:
    pixel: tuple[int, int]  # (y, x)
    offset: tuple[float, float]  # (dx, dy)
    kind: str  # "center" | "corner"


@dataclass(frozen=True)
class CenterVectors:
    pixel: tuple[int, int]
    vectors: tuple[float, ...]  # x1, y1, ..., x4, y4
    cell: int


@dataclass(frozen=True)
class CornerVectors:
    pixel: tuple[int, int]
    vectors: tuple[tuple[float, float], ...]  # SLOTS entries
    valid: tuple[bool, ...]
    cells: tuple[int, ...]  # owning cell per slot, -1 when unused


@dataclass(frozen=True)
class SpanEntry:
    pixel: tuple[int, int]
    span: tuple[float, float]  # (rows, cols)
    cell: int


@dataclass(eq=False)
class TargetBundle:
    heatmap: RasterMap
    offsets: list[OffsetEntry]
    center2corners: list[CenterVectors]
    corners2center: list[CornerVectors]
    spans: list[SpanEntry]
    row_map: RasterMap
    col_map: RasterMap
    mask: RasterMap
    meta: tuple[int, int, int]  # (H, W, downscale)
    # per cell: its 4 corners in low-res units, and where each corner's
    # corners-to-center slot lives as (index into corners2center, slot)
    cell_corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 2)))
    corner_slots: tuple[tuple[tuple[int, int], ...], ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def lowres_shape(self) -> tuple[int, int]:
        return self.heatmap.height, self.heatmap.width

    def to_sparse_dict(self) -> dict:
        def key(px):
            return f"{px[0]},{px[1]}"

        centers: dict[str, dict] = {}
        for off in self.offsets:
            if off.kind == "center":
                centers.setdefault(key(off.pixel), {})["offset"] = list(off.offset)
        for cv in self.center2corners:
            d = centers.setdefault(key(cv.pixel), {})
            d["center2corners"] = list(cv.vectors)
            d["cell"] = cv.cell
        for sp in self.spans:
            centers.setdefault(key(sp.pixel), {})["span"] = list(sp.span)
        corners: dict[str, dict] = {}
        for off in self.offsets:
            if off.kind == "corner":
                corners.setdefault(key(off.pixel), {})["offset"] = list(off.offset)
        for cv in self.corners2center:
            d = corners.setdefault(key(cv.pixel), {})
            d["corners2center"] = [list(v) for v in cv.vectors]
            d["valid"] = [int(v) for v in cv.valid]
            d["cells"] = list(cv.cells)
        H, W, ds = self.meta
        return {
            "meta": {"H": H, "W": W, "downscale": ds},
            "centers": centers,
            "corners": corners,
            "cells": [
                {"corners": self.cell_corners[i].ravel().tolist(),
                 "corner_slots": [[key(self.corners2center[j].pixel), s] if j >= 0 else [None, -1]
                                  for j, s in self.corner_slots[i]]}
                for i in range(len(self.corner_slots))
            ],
        }

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_tcn(out / "heatmap.tcn", self.heatmap)
        write_tcn(out / "rowmap.tcn", self.row_map)
        write_tcn(out / "colmap.tcn", self.col_map)
        write_tcn(out / "mask.tcn", self.mask)
        atomic_write(out / "sparse.json", json.dumps(self.to_sparse_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, in_dir: str | Path) -> "TargetBundle":
        src = Path(in_dir)
        sparse = json.loads((src / "sparse.json").read_text())

        def px(key):
            y, x = key.split(",")
            return int(y), int(x)

        offsets, c2c, spans, k2c = [], [], [], []
        for key, d in sparse["centers"].items():
            offsets.append(OffsetEntry(px(key), tuple(d["offset"]), "center"))
            c2c.append(CenterVectors(px(key), tuple(d["center2corners"]), d["cell"]))
            spans.append(SpanEntry(px(key), tuple(d["span"]), d["cell"]))
        for key, d in sparse["corners"].items():
            offsets.append(OffsetEntry(px(key), tuple(d["offset"]), "corner"))
            k2c.append(CornerVectors(px(key), tuple(tuple(v) for v in d["corners2center"]),
                                     tuple(bool(v) for v in d["valid"]), tuple(d["cells"])))
        where = {e.pixel: j for j, e in enumerate(k2c)}
        c2c.sort(key=lambda e: e.cell)
        spans.sort(key=lambda e: e.cell)
        cells = sparse["cells"]
        meta = sparse["meta"]
        return cls(
            heatmap=read_tcn(src / "heatmap.tcn"),
            offsets=offsets,
            center2corners=c2c,
            corners2center=k2c,
            spans=spans,
            row_map=read_tcn(src / "rowmap.tcn"),
            col_map=read_tcn(src / "colmap.tcn"),
            mask=read_tcn(src / "mask.tcn"),
            meta=(meta["H"], meta["W"], meta["downscale"]),
            cell_corners=np.array([c["corners"] for c in cells], dtype=np.float64).reshape(-1, 4, 2),
            corner_slots=tuple(tuple((where[px(k)], s) if k is not None else (-1, -1) for k, s in c["corner_slots"])
                               for c in cells),
        )


# ------------------------------------------------------------------ helpers


def lowres_shape(height: int, width: int, downscale: int) -> tuple[int, int]:
    return -(-height // downscale), -(-width // downscale)


def gaussian_radius(height: float, width: float, min_overlap: float = MIN_OVERLAP) -> float:
    """CenterNet's radius for a box of the given size."""
    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4.0
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def _cell_radius(corners_lr: np.ndarray) -> int:
    w = float(corners_lr[:, 0].max() - corners_lr[:, 0].min())
    h = float(corners_lr[:, 1].max() - corners_lr[:, 1].min())
    return max(1, int(gaussian_radius(h, w)))


def draw_gaussian(plane: np.ndarray, center_xy: tuple[int, int], radius: int) -> None:
    """Max-combine an unnormalised Gaussian (peak 1.0, sigma = radius / 3) in place."""
    h, w = plane.shape
    cx, cy = center_xy
    sigma = radius / 3.0
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(d[None, :] ** 2 + d[:, None] ** 2) / (2 * sigma * sigma))
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    patch = g[y0 - cy + radius:y1 - cy + radius, x0 - cx + radius:x1 - cx + radius]
    np.maximum(plane[y0:y1, x0:x1], patch, out=plane[y0:y1, x0:x1])


def _locate(p_lr: np.ndarray, shape: tuple[int, int], what: str, warnings: list[str]) -> tuple[int, int]:
    """Floored low-res pixel (y, x) of a point, clamped into the raster."""
    h, w = shape
    qx, qy = math.floor(p_lr[0]), math.floor(p_lr[1])
    cx, cy = min(max(qx, 0), w - 1), min(max(qy, 0), h - 1)
    if (cx, cy) != (qx, qy):
        warnings.append(f"{what} at low-res ({p_lr[0]:.3f}, {p_lr[1]:.3f}) clamped to pixel ({cx}, {cy})")
    return cy, cx


@dataclass
class _Keypoints:
    """Centers and deduplicated corners of one table in low-res units."""

    shape: tuple[int, int]
    corners_lr: np.ndarray  # (n, 4, 2)
    centers_lr: np.ndarray  # (n, 2)
    center_px: list[tuple[int, int]]
    corner_px: list[tuple[int, int]]  # one per distinct corner keypoint
    corner_pos: np.ndarray  # (m, 2)
    corner_members: list[list[tuple[int, int]]]  # (cell, k) pairs per keypoint
    warnings: list[str]


def _keypoints(ann: TableAnnotation, cfg: LossConfig) -> _Keypoints:
    ds = cfg.downscale
    shape = lowres_shape(ann.image_height, ann.image_width, ds)
    warnings: list[str] = []
    corners_full = ann.corners_array()
    corners_lr = corners_full / ds
    centers_lr = corners_full.mean(axis=1) / ds if len(ann.cells) else np.zeros((0, 2))
    center_px = [_locate(c, shape, f"center of cell {i}", warnings) for i, c in enumerate(centers_lr)]
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i in range(len(ann.cells)):
        for k in range(4):
            q = _locate(corners_lr[i, k], shape, f"corner {k} of cell {i}", warnings)
            groups.setdefault(q, []).append((i, k))
    corner_px = list(groups)
    corner_members = [groups[q] for q in corner_px]
    corner_pos = np.array([corners_lr[[i for i, _ in m], [k for _, k in m]].mean(axis=0) for m in corner_members]).reshape(-1, 2)
    return _Keypoints(shape, corners_lr, centers_lr, center_px, corner_px, corner_pos, corner_members, warnings)


# --------------------------------------------------------------- operations


def splat_keypoints(ann: TableAnnotation, cfg: LossConfig = LossConfig(), _kp: _Keypoints | None = None) -> RasterMap:
    kp = _kp or _keypoints(ann, cfg)
    h, w = kp.shape
    heat = np.zeros((h, w, 2))
    radii = [_cell_radius(kp.corners_lr[i]) for i in range(len(ann.cells))]
    for i, (y, x) in enumerate(kp.center_px):
        draw_gaussian(heat[:, :, 0], (x, y), radii[i])
    for (y, x), members in zip(kp.corner_px, kp.corner_members):
        draw_gaussian(heat[:, :, 1], (x, y), min(radii[i] for i, _ in members))
    for msg in kp.warnings:
        log.warning(msg)
    return RasterMap(heat)


def make_offsets(ann: TableAnnotation, cfg: LossConfig = LossConfig(), _kp: _Keypoints | None = None) -> list[OffsetEntry]:
    kp = _kp or _keypoints(ann, cfg)
    out = []
    for (y, x), c in zip(kp.center_px, kp.centers_lr):
        out.append(OffsetEntry((y, x), (float(c[0] - x), float(c[1] - y)), "center"))
    for (y, x), c in zip(kp.corner_px, kp.corner_pos):
        out.append(OffsetEntry((y, x), (float(c[0] - x), float(c[1] - y)), "corner"))
    return out


def make_vector_targets(ann: TableAnnotation, cfg: LossConfig = LossConfig(), _kp: _Keypoints | None = None):
    """Returns (center2corners, corners2center, corner_slots, warnings)."""
    kp = _kp or _keypoints(ann, cfg)
    warnings = []
    c2c = []
    for i, (px, c) in enumerate(zip(kp.center_px, kp.centers_lr)):
        u = (kp.corners_lr[i] - c).ravel()
        c2c.append(CenterVectors(px, tuple(float(v) for v in u), i))

    areas = [cell.quad.area for cell in ann.cells]
    slots_of: dict[tuple[int, int], tuple[int, int]] = {}
    k2c = []
    for j, (px, members) in enumerate(zip(kp.corner_px, kp.corner_members)):
        if len(members) > SLOTS:
            warnings.append(f"{len(members)} cells share corner pixel {px}; keeping the {SLOTS} largest")
            members = sorted(members, key=lambda m: (-areas[m[0]], m))[:SLOTS]
        members = sorted(members, key=lambda m: (ann.cells[m[0]].logical.row_start,
                                                 ann.cells[m[0]].logical.col_start, m))
        vectors, valid, cells = [], [], []
        for s, (i, k) in enumerate(members):
            v = kp.centers_lr[i] - kp.corners_lr[i, k]
            vectors.append((float(v[0]), float(v[1])))
            valid.append(True)
            cells.append(i)
            slots_of[(i, k)] = (j, s)
        while len(vectors) < SLOTS:
            vectors.append((0.0, 0.0))
            valid.append(False)
            cells.append(-1)
        k2c.append(CornerVectors(px, tuple(vectors), tuple(valid), tuple(cells)))
    corner_slots = tuple(tuple(slots_of.get((i, k), (-1, -1)) for k in range(4)) for i in range(len(ann.cells)))
    for msg in warnings:
        log.warning(msg)
    return c2c, k2c, corner_slots, warnings


def make_span_targets(ann: TableAnnotation, cfg: LossConfig = LossConfig(), _kp: _Keypoints | None = None) -> list[SpanEntry]:
    kp = _kp or _keypoints(ann, cfg)
    return [SpanEntry(px, (float(c.logical.row_span), float(c.logical.col_span)), i)
            for i, (px, c) in enumerate(zip(kp.center_px, ann.cells))]


def assemble_target_bundle(ann: TableAnnotation, cfg: LossConfig = LossConfig()) -> TargetBundle:
    kp = _keypoints(ann, cfg)
    heat = splat_keypoints(ann, cfg, kp)
    offsets = make_offsets(ann, cfg, kp)
    c2c, k2c, corner_slots, vec_warnings = make_vector_targets(ann, cfg, kp)
    spans = make_span_targets(ann, cfg, kp)
    rows, cols = generate_interp_maps(ann)
    ds = cfg.downscale
    return TargetBundle(
        heatmap=heat,
        offsets=offsets,
        center2corners=c2c,
        corners2center=k2c,
        spans=spans,
        row_map=downsample_map(rows.interp, ds),
        col_map=downsample_map(cols.interp, ds),
        mask=downsample_map(rows.mask, ds),
        meta=(ann.image_height, ann.image_width, ds),
        cell_corners=kp.corners_lr.copy(),
        corner_slots=corner_slots,
        warnings=tuple(kp.warnings) + tuple(vec_warnings) + rows.warnings,
    )
