from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import grid_table
from tsrkit.core import Cell, LogicalLoc, Point2, Quad, TableAnnotation, shoelace_area
from tsrkit.gridify import (
    DividerLine, GridifyError, cells_to_grids, fit_and_complete, fit_line, group_dividers, intersect,
)
from tsrkit.synth import config_for_seed, gen_table, warp_annotation


def _corners(ann):
    return np.array([c.quad.as_array() for c in ann.cells])


def rotate(ann, degrees, cx, cy):
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    T = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
    return warp_annotation(ann, T)


def test_group_counts():
    ann = grid_table([10, 40, 70], [10, 40, 70])
    rows, cols = group_dividers(ann)
    assert [d.index for d in rows] == [0, 1, 2] and [d.index for d in cols] == [0, 1, 2]
    assert len(rows[1].support) >= 4 and len(cols[1].support) >= 4
    rows, cols = group_dividers(grid_table([0, 9], [0, 9]))
    assert len(rows) == len(cols) == 2


def test_merged_row_reduces_support():
    ann = grid_table([0, 20, 40, 60], [0, 20, 40], cells=[(0, 0, 0, 2), (1, 1, 0, 0), (1, 1, 1, 1), (1, 1, 2, 2)])
    _, cols = group_dividers(ann)
    # an enumeration of the corners on each interior column boundary
    expected = {j: sum(2 for c in ann.cells for side in (c.logical.col_start, c.logical.col_end + 1) if side == j)
                for j in (1, 2)}
    assert {j: len(cols[j].support) for j in (1, 2)} == expected == {1: 4, 2: 4}
    assert len(cols[0].support) == 4


def test_axis_aligned_fit_is_exact():
    model, residual = fit_line([Point2(3, 7), Point2(50, 7), Point2(90, 7)], "row")
    assert model == (0.0, 1.0, -7.0) and residual == 0.0
    model, residual = fit_line([Point2(12, 0), Point2(12, 40)], "column")
    assert model == (1.0, 0.0, -12.0) and residual == 0.0


def test_missing_divider_is_midpoint():
    d0 = DividerLine("column", 0, [Point2(0, 0), Point2(1, 100)])
    d1 = DividerLine("column", 1)
    d2 = DividerLine("column", 2, [Point2(100, 0), Point2(103, 100)])
    out = fit_and_complete([d0, d1, d2])
    mid = (np.array(out[0].model) + np.array(out[2].model)) / 2
    mid /= math.hypot(mid[0], mid[1])
    assert out[1].synthesized and not out[0].synthesized
    assert np.allclose(out[1].model, mid, atol=1e-15)


def test_merged_cell_split_along_fitted_divider():
    xs, ys = [10, 50, 90], [10, 40, 70]
    ann = grid_table(xs, ys, cells=[(0, 0, 0, 1), (1, 1, 0, 0), (1, 1, 1, 1)], width=100, height=80)
    out = cells_to_grids(ann)
    assert len(out.cells) == 4
    # oracle: unique sorted boundary coordinates of the axis-aligned table
    bx = sorted({x for c in ann.cells for x, _ in c.quad.corners})
    by = sorted({y for c in ann.cells for _, y in c.quad.corners})
    ref = grid_table(bx, by, width=100, height=80)
    assert np.abs(_corners(out) - _corners(ref)).max() <= 1e-9
    assert [c.logical for c in out.cells] == [c.logical for c in ref.cells]


@pytest.mark.parametrize("xs,ys", [([0, 31], [0, 17]), ([5, 40, 80], [5, 30, 60]), ([0, 10, 25, 70], [3, 9, 40])])
def test_identity_on_unmerged_grids(xs, ys):
    ann = grid_table(xs, ys)
    assert np.abs(_corners(cells_to_grids(ann)) - _corners(ann)).max() <= 1e-9


def test_rotated_grid_recovers_rotation():
    xs, ys = [200, 300, 420, 500], [200, 260, 330, 420, 500]
    ann = rotate(grid_table(xs, ys, width=700, height=700), 10, 350, 350)
    out = cells_to_grids(ann)
    t = math.radians(10)
    for cell in out.cells:
        lg = cell.logical
        for (x, y), (cx, cy) in zip(cell.quad.corners, [(xs[lg.col_start], ys[lg.row_start]),
                                                         (xs[lg.col_start + 1], ys[lg.row_start]),
                                                         (xs[lg.col_start + 1], ys[lg.row_start + 1]),
                                                         (xs[lg.col_start], ys[lg.row_start + 1])]):
            ex = 350 + math.cos(t) * (cx - 350) - math.sin(t) * (cy - 350)
            ey = 350 + math.sin(t) * (cx - 350) + math.cos(t) * (cy - 350)
            assert abs(x - ex) <= 1e-6 and abs(y - ey) <= 1e-6


@pytest.mark.parametrize("seed", range(0, 45, 3))
def test_generator_corners_lie_on_grid(seed):
    for s in (seed, seed + 1, seed + 2):
        ann = gen_table(config_for_seed(s))
        out = cells_to_grids(ann)
        assert len(out.cells) == ann.n_rows * ann.n_cols
        grid = {(c.logical.row_start, c.logical.col_start): c.quad.as_array() for c in out.cells}
        for cell in ann.cells:
            lg = cell.logical
            ul = grid[(lg.row_start, lg.col_start)][0]
            lr = grid[(lg.row_end, lg.col_end)][2]
            assert np.abs(cell.quad.as_array()[0] - ul).max() <= 1e-6
            assert np.abs(cell.quad.as_array()[2] - lr).max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_idempotent_and_tiles_logical_rectangles(seed):
    ann = gen_table(config_for_seed(seed))
    once = cells_to_grids(ann)
    twice = cells_to_grids(once)
    assert np.abs(_corners(once) - _corners(twice)).max() <= 1e-9
    by_loc = {(c.logical.row_start, c.logical.col_start): c for c in once.cells}
    for cell in ann.cells:
        lg = cell.logical
        parts = [by_loc[(r, c)] for r in range(lg.row_start, lg.row_end + 1)
                 for c in range(lg.col_start, lg.col_end + 1)]
        assert sum(shoelace_area(p.quad.corners) for p in parts) == pytest.approx(
            shoelace_area(cell.quad.corners), rel=1e-9)


def test_one_by_one_and_empty():
    ann = grid_table([4, 30], [6, 25])
    assert np.abs(_corners(cells_to_grids(ann)) - _corners(ann)).max() <= 1e-9
    empty = TableAnnotation((), 10, 10)
    assert cells_to_grids(empty) == empty


def test_deformed_divider_refused():
    cells = [Cell(Quad(((0, 0), (50, 0), (50, 40), (0, 40))), LogicalLoc(0, 0, 0, 0)),
             Cell(Quad(((50, 0), (100, 20), (100, 60), (50, 40))), LogicalLoc(0, 0, 1, 1)),
             Cell(Quad(((100, 20), (150, 0), (150, 40), (100, 60))), LogicalLoc(0, 0, 2, 2))]
    with pytest.raises(GridifyError, match="row divider"):
        cells_to_grids(TableAnnotation(tuple(cells), 160, 70))


def test_errors():
    with pytest.raises(GridifyError, match="ungriddable"):
        fit_and_complete([DividerLine("row", 0), DividerLine("row", 1, [Point2(0, 5), Point2(9, 5)])])
    row = DividerLine("row", 3, model=(0.0, 1.0, -5.0))
    col = DividerLine("column", 4, model=(0.0, 1.0, -9.0))
    with pytest.raises(GridifyError, match="row divider 3 and column divider 4"):
        intersect(row, col)
