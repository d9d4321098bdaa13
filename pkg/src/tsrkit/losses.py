"""Loss terms with analytic (sub)gradients.

The quality weights (pairing weight, boundary weight, span weight) are
treated as constants: gradients flow through the L1 terms only. Every loss
returns ``(value, grads)`` where ``grads`` maps a head name to an array with
the same shape as that head's raster.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import LossConfig
from .decoder import RawNetworkOutput
from .raster import RasterMap
from .targets import OffsetEntry, TargetBundle

log = logging.getLogger(__name__)

HEAT_EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    keypoint: float
    offset: float
    spatial: float
    boundary: float
    span: float
    logical: float
    overall: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _plane(m) -> np.ndarray:
    if isinstance(m, RasterMap):
        return m.data[:, :, 0]
    a = np.asarray(m, dtype=np.float64)
    return a[:, :, 0] if a.ndim == 3 else a


# ------------------------------------------------------------------ spatial


def pairing_weight(u, u_hat, v, v_hat) -> float:
    u, u_hat, v, v_hat = (np.asarray(a, dtype=np.float64).ravel() for a in (u, u_hat, v, v_hat))
    norm = float(np.abs(u).sum())
    if norm == 0.0:
        log.warning("pairing weight of a degenerate cell (|u| = 0) set to 1")
        return 1.0
    ratio = (float(np.abs(u - u_hat).sum()) + float(np.abs(v - v_hat).sum())) / norm
    return math.sin(math.pi / 2 * min(ratio, 1.0))


def match_corner_slots(gt_slots: np.ndarray, pred_slots: np.ndarray) -> tuple[int, ...]:
    """Injective map of GT slots onto predicted slots with the least total L1.

    ``gt_slots`` (k, 2) with k <= 4, ``pred_slots`` (4, 2). Returns, for each GT
    slot, the index of the predicted slot it pairs with. Ties keep the
    lexicographically first permutation.
    """
    k = len(gt_slots)
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(len(pred_slots)), k):
        cost = sum(float(np.abs(gt_slots[a] - pred_slots[b]).sum()) for a, b in enumerate(perm))
        if cost < best_cost:
            best, best_cost = perm, cost
    return tuple(best) if best is not None else ()


@dataclass
class _SpatialTerms:
    """Gathered sparse quantities for the spatial loss."""

    cells: list[int]
    center_px: list[tuple[int, int]]
    u: np.ndarray  # (n, 8)
    u_hat: np.ndarray
    v: np.ndarray  # (n, 8)
    v_hat: np.ndarray
    v_loc: list[list[tuple[int, int, int] | None]]  # per cell corner: (y, x, pred slot)
    invalid_loc: list[tuple[int, int, int]]  # (y, x, pred slot)


def _gather_spatial(pred: RawNetworkOutput, target: TargetBundle) -> _SpatialTerms:
    c2c = pred.center2corners.data
    k2c = pred.corners2center.data
    # slot matching at every GT corner keypoint
    assignment: list[dict[int, int]] = []
    invalid_loc = []
    for entry in target.corners2center:
        y, x = entry.pixel
        valid = [s for s in range(len(entry.valid)) if entry.valid[s]]
        gt = np.array([entry.vectors[s] for s in valid]).reshape(-1, 2)
        pr = k2c[y, x].reshape(4, 2)
        perm = match_corner_slots(gt, pr)
        assignment.append({s: t for s, t in zip(valid, perm)})
        used = set(perm)
        invalid_loc.extend((y, x, t) for t in range(4) if t not in used)

    cells, center_px, u, u_hat, v, v_hat, v_loc = [], [], [], [], [], [], []
    for entry in sorted(target.center2corners, key=lambda e: e.cell):
        i = entry.cell
        y, x = entry.pixel
        cells.append(i)
        center_px.append((y, x))
        u.append(entry.vectors)
        u_hat.append(c2c[y, x])
        vi, vh, locs = [], [], []
        for j, s in target.corner_slots[i]:
            if j < 0:
                vi.extend((0.0, 0.0))
                vh.extend((0.0, 0.0))
                locs.append(None)
                continue
            ky, kx = target.corners2center[j].pixel
            t = assignment[j][s]
            vi.extend(target.corners2center[j].vectors[s])
            vh.extend(k2c[ky, kx, 2 * t:2 * t + 2])
            locs.append((ky, kx, t))
        v.append(vi)
        v_hat.append(vh)
        v_loc.append(locs)
    as_arr = lambda a: np.asarray(a, dtype=np.float64).reshape(-1, 8)
    return _SpatialTerms(cells, center_px, as_arr(u), as_arr(u_hat), as_arr(v), as_arr(v_hat), v_loc, invalid_loc)


def spatial_weights(pred: RawNetworkOutput, target: TargetBundle) -> np.ndarray:
    t = _gather_spatial(pred, target)
    return np.array([pairing_weight(t.u[i], t.u_hat[i], t.v[i], t.v_hat[i]) for i in range(len(t.cells))])


def spatial_loss(pred: RawNetworkOutput, target: TargetBundle, cfg: LossConfig = LossConfig(),
                 weights: np.ndarray | None = None):
    """Pair loss on center->corner and corner->center vectors plus the
    penalty on unmatched corner slots. ``weights`` overrides the pairing
    weights (used to check gradients with the weights held fixed)."""
    t = _gather_spatial(pred, target)
    h, w = pred.lowres_shape
    g_c2c = np.zeros((h, w, 8))
    g_k2c = np.zeros((h, w, 8))
    n = len(t.cells)
    value = 0.0
    if n:
        omega = weights if weights is not None else np.array(
            [pairing_weight(t.u[i], t.u_hat[i], t.v[i], t.v_hat[i]) for i in range(n)])
        du = t.u_hat - t.u
        dv = t.v_hat - t.v
        per_cell = cfg.lambda_u * np.abs(du).sum(axis=1) + cfg.lambda_v * np.abs(dv).sum(axis=1)
        value = float((omega * per_cell).sum() / (8 * n))
        for i in range(n):
            y, x = t.center_px[i]
            g_c2c[y, x] += omega[i] * cfg.lambda_u * np.sign(du[i]) / (8 * n)
            for k, loc in enumerate(t.v_loc[i]):
                if loc is None:
                    continue
                ky, kx, s = loc
                g_k2c[ky, kx, 2 * s:2 * s + 2] += omega[i] * cfg.lambda_v * np.sign(dv[i, 2 * k:2 * k + 2]) / (8 * n)

    n_inv = len(t.invalid_loc)
    if n_inv:
        k2c = pred.corners2center.data
        total = 0.0
        for y, x, s in t.invalid_loc:
            e = k2c[y, x, 2 * s:2 * s + 2]
            total += float(np.abs(e).sum())
            g_k2c[y, x, 2 * s:2 * s + 2] += cfg.lambda_e * np.sign(e) / (2 * n_inv)
        value += cfg.lambda_e * total / (2 * n_inv)
    return value, {"center2corners": g_c2c, "corners2center": g_k2c}


# ---------------------------------------------------------------- boundary


def boundary_weight(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    return (1.0 - np.abs(gt - np.round(gt))) ** 2


def boundary_loss(pred_rowmap, pred_colmap, gt_rowmap, gt_colmap, mask):
    pr, pc, gr, gc, m = (_plane(a) for a in (pred_rowmap, pred_colmap, gt_rowmap, gt_colmap, mask))
    on = m > 0.5
    denom = 2.0 * float(on.sum())
    zero = (np.zeros_like(pr), np.zeros_like(pc))
    if denom == 0:
        log.warning("boundary loss over an empty mask is 0")
        return 0.0, zero
    fr, fc = boundary_weight(gr), boundary_weight(gc)
    dr, dc = pr - gr, pc - gc
    value = float((fr[on] * np.abs(dr[on])).sum() + (fc[on] * np.abs(dc[on])).sum()) / denom
    grad_r = np.where(on, fr * np.sign(dr) / denom, 0.0)
    grad_c = np.where(on, fc * np.sign(dc) / denom, 0.0)
    return value, (grad_r, grad_c)


# -------------------------------------------------------------------- span


def _corner_pixels(corners: np.ndarray, shape: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = shape
    out = []
    for x, y in np.asarray(corners, dtype=np.float64):
        ix = min(max(math.floor(x + 0.5), 0), w - 1)
        iy = min(max(math.floor(y + 0.5), 0), h - 1)
        out.append((iy, ix))
    return out


def span_from_maps(corners, rowmap, colmap) -> tuple[np.ndarray, np.ndarray]:
    """Row and column spans read from the maps at a cell's four corners."""
    r, c = _plane(rowmap), _plane(colmap)
    p1, p2, p3, p4 = _corner_pixels(corners, r.shape)
    s_r = np.array([r[p4] - r[p1], r[p3] - r[p2]])
    s_c = np.array([c[p2] - c[p1], c[p3] - c[p4]])
    return s_r, s_c


def span_weight(s_hat: float, s: float, s_tilde, cap: float = 0.2) -> float:
    dev = abs(s_hat - s) + float(np.mean(np.abs(np.asarray(s_tilde, dtype=np.float64) - s)))
    # sin(5*pi/2 * min(dev, 0.2)) for the default cap
    return math.sin(math.pi / (2 * cap) * min(dev, cap))


def span_weights(pred: RawNetworkOutput, target: TargetBundle, cfg: LossConfig = LossConfig()) -> np.ndarray:
    out = []
    for entry in sorted(target.spans, key=lambda e: e.cell):
        y, x = entry.pixel
        s_hat = pred.spans.data[y, x]
        st_r, st_c = span_from_maps(target.cell_corners[entry.cell], pred.row_map, pred.col_map)
        out.append((span_weight(s_hat[0], entry.span[0], st_r, cfg.span_cap),
                    span_weight(s_hat[1], entry.span[1], st_c, cfg.span_cap)))
    return np.array(out).reshape(-1, 2)


def span_loss(pred: RawNetworkOutput, target: TargetBundle, cfg: LossConfig = LossConfig(),
              weights: np.ndarray | None = None):
    """Span regression plus agreement between spans and map differences.

    ``weights`` (n, 2) overrides the (row, col) span weights.
    """
    h, w = pred.lowres_shape
    g_spans = np.zeros((h, w, 2))
    g_row = np.zeros((h, w))
    g_col = np.zeros((h, w))
    entries = sorted(target.spans, key=lambda e: e.cell)
    n = len(entries)
    if n == 0:
        return 0.0, {"spans": g_spans, "row_map": g_row[:, :, None], "col_map": g_col[:, :, None]}
    d = weights if weights is not None else span_weights(pred, target, cfg)
    r, c = _plane(pred.row_map), _plane(pred.col_map)
    total_s = 0.0
    total_t = 0.0
    for i, entry in enumerate(entries):
        y, x = entry.pixel
        s_r, s_c = entry.span
        s_hat = pred.spans.data[y, x]
        p1, p2, p3, p4 = _corner_pixels(target.cell_corners[entry.cell], (h, w))
        st_r = (r[p4] - r[p1], r[p3] - r[p2])
        st_c = (c[p2] - c[p1], c[p3] - c[p4])
        d_r, d_c = d[i]
        total_s += d_r * abs(s_r - s_hat[0]) + d_c * abs(s_c - s_hat[1])
        total_t += d_r * 0.5 * (abs(s_r - st_r[0]) + abs(s_r - st_r[1])) \
            + d_c * 0.5 * (abs(s_c - st_c[0]) + abs(s_c - st_c[1]))
        g_spans[y, x, 0] += d_r * np.sign(s_hat[0] - s_r) / (2 * n)
        g_spans[y, x, 1] += d_c * np.sign(s_hat[1] - s_c) / (2 * n)
        k = 0.5 / (4 * n)
        for (plus, minus), st, s, dd, g in (((p4, p1), st_r[0], s_r, d_r, g_row), ((p3, p2), st_r[1], s_r, d_r, g_row),
                                             ((p2, p1), st_c[0], s_c, d_c, g_col), ((p3, p4), st_c[1], s_c, d_c, g_col)):
            sg = dd * k * np.sign(st - s)
            g[plus] += sg
            g[minus] -= sg
    value = total_s / (2 * n) + total_t / (4 * n)
    return float(value), {"spans": g_spans, "row_map": g_row[:, :, None], "col_map": g_col[:, :, None]}


# ---------------------------------------------------------------- keypoint


def focal_loss(pred_heatmap, gt_heatmap, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced pixelwise focal loss, normalised by the positive count."""
    p_raw = np.asarray(pred_heatmap.data if isinstance(pred_heatmap, RasterMap) else pred_heatmap, dtype=np.float64)
    g = np.asarray(gt_heatmap.data if isinstance(gt_heatmap, RasterMap) else gt_heatmap, dtype=np.float64)
    p = np.clip(p_raw, HEAT_EPS, 1 - HEAT_EPS)
    inside = (p_raw >= HEAT_EPS) & (p_raw <= 1 - HEAT_EPS)
    pos = g == 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = (1 - g) ** beta
    pos_term = -((1 - p) ** alpha) * np.log(p)
    neg_term = -neg_w * p ** alpha * np.log(1 - p)
    value = float(np.where(pos, pos_term, neg_term).sum()) / n_pos
    d_pos = alpha * (1 - p) ** (alpha - 1) * np.log(p) - (1 - p) ** alpha / p
    d_neg = -neg_w * (alpha * p ** (alpha - 1) * np.log(1 - p) - p ** alpha / (1 - p))
    grad = np.where(pos, d_pos, d_neg) / n_pos
    return value, np.where(inside, grad, 0.0)


def offset_loss(pred_offsets, entries: list[OffsetEntry]):
    off = pred_offsets.data if isinstance(pred_offsets, RasterMap) else np.asarray(pred_offsets, dtype=np.float64)
    grad = np.zeros_like(off)
    if not entries:
        return 0.0, grad
    k = 2 * len(entries)
    total = 0.0
    for e in entries:
        y, x = e.pixel
        d = off[y, x] - np.asarray(e.offset)
        total += float(np.abs(d).sum())
        grad[y, x] += np.sign(d) / k
    return total / k, grad


def keypoint_loss(pred_heatmap, gt_heatmap, pred_offsets, gt_offsets: list[OffsetEntry],
                  cfg: LossConfig = LossConfig()):
    """Heatmap focal loss plus offset L1; the value is their sum."""
    v_heat, g_heat = focal_loss(pred_heatmap, gt_heatmap, cfg.focal_alpha, cfg.focal_beta)
    v_off, g_off = offset_loss(pred_offsets, gt_offsets)
    return v_heat + v_off, {"heatmap": g_heat, "offsets": g_off, "parts": (v_heat, v_off)}


# ----------------------------------------------------------------- overall


def overall_loss_with_grad(pred: RawNetworkOutput, target: TargetBundle, cfg: LossConfig = LossConfig()):
    if pred.lowres_shape != target.lowres_shape:
        raise ValueError(f"prediction is {pred.lowres_shape}, target is {target.lowres_shape}")
    _, g_kp = keypoint_loss(pred.heatmap, target.heatmap, pred.offsets, target.offsets, cfg)
    v_heat, v_off = g_kp.pop("parts")
    v_sp, g_sp = spatial_loss(pred, target, cfg)
    v_b, (g_br, g_bc) = boundary_loss(pred.row_map, pred.col_map, target.row_map, target.col_map, target.mask)
    v_s, g_s = span_loss(pred, target, cfg)
    logical = v_b + v_s
    breakdown = LossBreakdown(
        keypoint=v_heat, offset=v_off, spatial=v_sp, boundary=v_b, span=v_s,
        logical=logical, overall=v_heat + v_off + v_sp + logical,
    )
    grads = {
        "heatmap": g_kp["heatmap"],
        "offsets": g_kp["offsets"],
        "center2corners": g_sp["center2corners"],
        "corners2center": g_sp["corners2center"],
        "spans": g_s["spans"],
        "row_map": g_br[:, :, None] + g_s["row_map"],
        "col_map": g_bc[:, :, None] + g_s["col_map"],
    }
    return breakdown, grads


def overall_loss(pred: RawNetworkOutput, target: TargetBundle, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    return overall_loss_with_grad(pred, target, cfg)[0]
