"""Deterministic synthetic tables and perfect ("oracle") network outputs.

Randomness comes from :class:`XorShift64Star`, a 64-bit xorshift* generator
seeded through SplitMix64. Both are a handful of integer operations, so the
same fixtures can be rebuilt from a seed in any language.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Cell, LogicalLoc, LossConfig, Quad, TableAnnotation, is_convex, signed_area
from .decoder import RawNetworkOutput
from .raster import RasterMap
from .targets import TargetBundle, assemble_target_bundle

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D)."""

    def __init__(self, seed: int):
        _, s = splitmix64(seed & MASK64)
        self.state = s or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] (inclusive)."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + self.next_u64() % (hi - lo + 1)

    def split(self) -> "XorShift64Star":
        """Independent child stream; advances this one by a single draw."""
        return XorShift64Star(self.next_u64())


WARPS = ("none", "affine", "homography")


@dataclass(frozen=True)
class SynthConfig:
    rows: tuple[int, int] = (1, 12)
    cols: tuple[int, int] = (1, 10)
    merge_probability: float = 0.2
    max_merge_span: int = 3
    warp: str = "none"
    warp_magnitude: float = 0.05
    height: int = 1024
    width: int = 1024
    seed: int = 0
    min_cell: float = 16.0  # smallest row height / column width in pixels

    def __post_init__(self):
        if self.rows[0] < 1 or self.rows[1] < self.rows[0]:
            raise ValueError(f"bad row range {self.rows}")
        if self.cols[0] < 1 or self.cols[1] < self.cols[0]:
            raise ValueError(f"bad column range {self.cols}")
        if not 0.0 <= self.merge_probability <= 1.0:
            raise ValueError("merge_probability must lie in [0, 1]")
        if self.max_merge_span < 1:
            raise ValueError("max_merge_span must be >= 1")
        if self.warp not in WARPS:
            raise ValueError(f"warp must be one of {WARPS}")
        if self.warp_magnitude < 0:
            raise ValueError("warp_magnitude must be >= 0")
        if self.min_cell < 8:
            raise ValueError("min_cell must be at least 8 px")


def config_for_seed(seed: int, **overrides) -> SynthConfig:
    """Harness convention: seed % 3 picks no warp, affine, or homography."""
    return SynthConfig(seed=seed, warp=WARPS[seed % 3], **overrides)


def _lines(rng: XorShift64Star, n: int, extent: float, min_size: float, what: str) -> list[float]:
    """n + 1 increasing grid-line coordinates inside [0, extent]."""
    if n * min_size > extent:
        raise ValueError(f"infeasible geometry: {n} {what} of at least {min_size:g} px do not fit in {extent:g} px")
    total = max(n * min_size, extent * rng.uniform(0.6, 1.0))
    start = rng.uniform(0.0, extent - total)
    weights = [rng.uniform(1.0, 3.0) for _ in range(n)]
    wsum = sum(weights)
    free = total - n * min_size
    out = [start]
    for w in weights:
        out.append(out[-1] + min_size + free * w / wsum)
    return out


def _merges(rng: XorShift64Star, n_rows: int, n_cols: int, p: float, max_span: int) -> list[LogicalLoc]:
    taken = np.zeros((n_rows, n_cols), dtype=bool)
    out = []
    for r in range(n_rows):
        for c in range(n_cols):
            if taken[r, c]:
                continue
            rs = cs = 1
            if p > 0 and rng.random() < p:
                rs = min(rng.randint(1, max_span), n_rows - r)
                cs = min(rng.randint(1, max_span), n_cols - c)
                while cs > 1 and taken[r:r + rs, c:c + cs].any():
                    cs -= 1
                while rs > 1 and taken[r:r + rs, c:c + cs].any():
                    rs -= 1
            taken[r:r + rs, c:c + cs] = True
            out.append(LogicalLoc(r, r + rs - 1, c, c + cs - 1))
    return out


def homography_from_points(src, dst) -> np.ndarray:
    """3x3 H with H @ [x, y, 1] ~ [x', y', 1] for four correspondences."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.asarray(A, float), np.asarray(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def affine_from_points(src, dst) -> np.ndarray:
    A = np.array([[x, y, 1.0] for x, y in src[:3]])
    sol = np.linalg.solve(A, np.asarray(dst[:3], float))
    return np.vstack([sol.T, [0.0, 0.0, 1.0]])


def _apply(transform: np.ndarray, pts: np.ndarray) -> np.ndarray:
    homog = np.c_[pts, np.ones(len(pts))] @ transform.T
    return homog[:, :2] / homog[:, 2:3]


def warp_annotation(ann: TableAnnotation, transform) -> TableAnnotation:
    T = np.asarray(transform, dtype=np.float64)
    if T.shape != (3, 3) or abs(np.linalg.det(T)) < 1e-12:
        raise ValueError("transform must be an invertible 3x3 matrix")
    W, H = ann.image_width, ann.image_height
    cells = []
    for i, cell in enumerate(ann.cells):
        pts = _apply(T, cell.quad.as_array())
        if not np.isfinite(pts).all():
            raise ValueError(f"cell {i} maps to infinity")
        if (pts[:, 0] < 0).any() or (pts[:, 0] > W).any() or (pts[:, 1] < 0).any() or (pts[:, 1] > H).any():
            raise ValueError(f"warped cell {i} leaves the {W}x{H} image")
        cells.append(Cell(Quad(tuple(map(tuple, pts))), cell.logical))
    return TableAnnotation(tuple(cells), W, H)


def _random_warp(rng: XorShift64Star, cfg: SynthConfig, box) -> np.ndarray:
    x0, y0, x1, y1 = box
    src = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    reach = cfg.warp_magnitude * math.hypot(cfg.width, cfg.height)
    dst = []
    for x, y in src:
        ang = rng.uniform(0.0, 2 * math.pi)
        r = reach * rng.uniform(0.3, 1.0)
        dst.append((x + r * math.cos(ang), y + r * math.sin(ang)))
    if cfg.warp == "affine":
        return affine_from_points(src, dst)
    return homography_from_points(src, dst)


def _acceptable(ann: TableAnnotation, min_size: float) -> bool:
    for cell in ann.cells:
        pts = cell.quad.corners
        if signed_area(pts) <= 0 or not is_convex(pts):
            return False
        # keep every edge comfortably longer than the low-res grid
        for a, b in zip(pts, pts[1:] + pts[:1]):
            if math.hypot(a.x - b.x, a.y - b.y) < min_size:
                return False
    return True


def gen_table(config: SynthConfig) -> TableAnnotation:
    rng = XorShift64Star(config.seed)
    geo, warp_rng = rng.split(), rng.split()
    n_rows = geo.randint(*config.rows)
    n_cols = geo.randint(*config.cols)
    margin = 8.0
    if config.warp != "none":
        margin += config.warp_magnitude * math.hypot(config.width, config.height)
    xs = _lines(geo, n_cols, config.width - 2 * margin, config.min_cell, "columns")
    ys = _lines(geo, n_rows, config.height - 2 * margin, config.min_cell, "rows")
    xs = [margin + x for x in xs]
    ys = [margin + y for y in ys]
    cells = []
    for lg in _merges(geo, n_rows, n_cols, config.merge_probability, config.max_merge_span):
        quad = Quad.from_box(xs[lg.col_start], ys[lg.row_start], xs[lg.col_end + 1], ys[lg.row_end + 1])
        cells.append(Cell(quad, lg))
    ann = TableAnnotation(tuple(cells), config.width, config.height)
    if config.warp == "none":
        return ann

    box = (xs[0], ys[0], xs[-1], ys[-1])
    transform = _random_warp(warp_rng, config, box)
    # pull the transform toward identity until the result stays in bounds and convex
    for _ in range(8):
        try:
            warped = warp_annotation(ann, transform)
        except ValueError:
            warped = None
        if warped is not None and _acceptable(warped, 0.75 * config.min_cell):
            return warped
        transform = 0.5 * (transform / transform[2, 2] + np.eye(3))
    return ann


def render_oracle(ann: TableAnnotation, cfg: LossConfig = LossConfig(),
                  bundle: TargetBundle | None = None) -> RawNetworkOutput:
    """Dense tensors a perfect network would emit for ``ann``."""
    tb = bundle or assemble_target_bundle(ann, cfg)
    h, w = tb.lowres_shape
    offsets = np.zeros((h, w, 2))
    for off in sorted(tb.offsets, key=lambda o: o.kind != "corner"):
        y, x = off.pixel
        offsets[y, x] = off.offset
    c2c = np.zeros((h, w, 8))
    for cv in tb.center2corners:
        y, x = cv.pixel
        c2c[y, x] = cv.vectors
    k2c = np.zeros((h, w, 8))
    for kv in tb.corners2center:
        y, x = kv.pixel
        k2c[y, x] = np.asarray(kv.vectors).ravel()
    spans = np.zeros((h, w, 2))
    for sp in tb.spans:
        y, x = sp.pixel
        spans[y, x] = sp.span
    return RawNetworkOutput(
        heatmap=tb.heatmap,
        offsets=RasterMap(offsets),
        center2corners=RasterMap(c2c),
        corners2center=RasterMap(k2c),
        spans=RasterMap(spans),
        row_map=tb.row_map,
        col_map=tb.col_map,
        meta=tb.meta,
    )


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)
