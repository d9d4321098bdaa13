from __future__ import annotations

import numpy as np
import pytest

from oracles import grid_table
from tsrkit.core import Cell, LogicalLoc, LossConfig, Quad, TableAnnotation
from tsrkit.synth import config_for_seed, gen_table
from tsrkit.targets import (
    TargetBundle, assemble_target_bundle, gaussian_radius, make_offsets, make_span_targets,
    make_vector_targets, splat_keypoints,
)


def test_single_cell_peaks():
    ann = grid_table([8, 40], [8, 40], width=64, height=64)
    heat = splat_keypoints(ann).data
    assert (heat[:, :, 0] == 1.0).sum() == 1
    assert (heat[:, :, 1] == 1.0).sum() == 4
    assert heat.max() == 1.0 and heat.min() >= 0.0


def test_empty_table():
    ann = TableAnnotation((), 32, 32)
    assert not splat_keypoints(ann).data.any()
    assert make_offsets(ann) == []


def test_shared_corners_deduplicated():
    ann = grid_table([8, 40, 72], [8, 40], width=80, height=48)
    heat = splat_keypoints(ann).data
    assert (heat[:, :, 1] == 1.0).sum() == 6


def test_offset_examples():
    # a cell whose center lands at (42, 42)
    ann = grid_table([32, 52], [32, 52], width=64, height=64)
    centers = [o for o in make_offsets(ann) if o.kind == "center"]
    assert centers[0].pixel == (10, 10) and centers[0].offset == (0.5, 0.5)
    ann = grid_table([30, 50], [30, 50], width=64, height=64)
    centers = [o for o in make_offsets(ann) if o.kind == "center"]
    assert centers[0].offset == (0.0, 0.0)
    q = Quad(((41.2, 43.9), (60, 43.9), (60, 60), (41.2, 60)))
    ann = TableAnnotation((Cell(q, LogicalLoc(0, 0, 0, 0)),), 64, 64)
    first = [o for o in make_offsets(ann) if o.kind == "corner"][0]
    assert first.pixel == (10, 10)
    assert first.offset == pytest.approx((0.3, 0.975), abs=1e-12)


@pytest.mark.parametrize("seed", range(0, 40, 4))
def test_offsets_in_unit_interval(seed):
    for o in make_offsets(gen_table(config_for_seed(seed))):
        assert 0.0 <= o.offset[0] < 1.0 and 0.0 <= o.offset[1] < 1.0


def test_vector_examples():
    ann = grid_table([8, 32], [8, 32], width=48, height=48)
    c2c, k2c, _, _ = make_vector_targets(ann)
    # center (20, 20) full-res = (5, 5) low-res, corner (8, 8) = (2, 2)
    assert c2c[0].vectors[:2] == (-3.0, -3.0)
    ann = grid_table([8, 32, 56], [8, 32, 56], width=64, height=64)
    c2c, k2c, slots, _ = make_vector_targets(ann)
    valid = {kv.pixel: sum(kv.valid) for kv in k2c}
    assert valid[(8, 8)] == 4  # interior corner
    assert valid[(2, 2)] == 1  # border corner
    border = [kv for kv in k2c if kv.pixel == (2, 2)][0]
    assert border.vectors[1:] == ((0.0, 0.0),) * 3
    # slots ordered by the owning cell's (row_start, col_start)
    inner = [kv for kv in k2c if kv.pixel == (8, 8)][0]
    assert [ann.cells[i].logical[::2] for i in inner.cells] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_span_examples():
    ann = grid_table([0, 20, 40, 60, 80, 100], [0, 20, 40, 60], cells=[(0, 0, 0, 4), (1, 2, 0, 3), (1, 1, 4, 4), (2, 2, 4, 4)],
                     width=104, height=64)
    spans = [s.span for s in make_span_targets(ann)]
    assert spans == [(1.0, 5.0), (2.0, 4.0), (1.0, 1.0), (1.0, 1.0)]


@pytest.mark.parametrize("seed", range(0, 60, 6))
def test_bundle_invariants(seed):
    ann = gen_table(config_for_seed(seed))
    tb = assemble_target_bundle(ann)
    n = len(ann.cells)
    assert len(tb.center2corners) == n and len(tb.spans) == n
    assert len([o for o in tb.offsets if o.kind == "center"]) == n
    assert sum(sum(kv.valid) for kv in tb.corners2center) == 4 * n
    assert (tb.heatmap.data[:, :, 0] == 1.0).sum() == n
    assert (tb.heatmap.data[:, :, 1] == 1.0).sum() == len(tb.corners2center)
    assert all(min(s.span) >= 1 for s in tb.spans)
    assert tb.row_map.data.shape[:2] == (-(-ann.image_height // 4), -(-ann.image_width // 4))
    # corner = center + u reproduces the low-res annotation
    for cv in tb.center2corners:
        c = np.asarray(ann.cells[cv.cell].quad.as_array()).mean(axis=0) / 4
        rebuilt = c + np.asarray(cv.vectors).reshape(4, 2)
        assert np.abs(rebuilt - ann.cells[cv.cell].quad.as_array() / 4).max() <= 0.5


def test_bundle_deterministic_and_persisted(tmp_path):
    ann = gen_table(config_for_seed(7))
    a, b = assemble_target_bundle(ann), assemble_target_bundle(ann)
    assert a.heatmap == b.heatmap and a.row_map == b.row_map
    assert a.to_sparse_dict() == b.to_sparse_dict()
    a.save(tmp_path / "t")
    for name in ("heatmap.tcn", "rowmap.tcn", "colmap.tcn", "mask.tcn", "sparse.json"):
        assert (tmp_path / "t" / name).is_file()
    back = TargetBundle.load(tmp_path / "t")

    def resolved(tb):
        return [[(tb.corners2center[j].pixel, s) for j, s in cell] for cell in tb.corner_slots]

    assert resolved(back) == resolved(a)
    assert len(back.corners2center) == len(a.corners2center)


def test_more_than_four_owners_keeps_largest():
    # five 1 px wide columns whose top corners all fall in low-res pixel (1, 1)
    cells = [Cell(Quad.from_box(9 + k, 9, 10 + k, 20), LogicalLoc(0, 0, k, k)) for k in range(5)]
    ann = TableAnnotation(tuple(cells), 32, 32)
    _, k2c, _, warnings = make_vector_targets(ann, LossConfig(downscale=8))
    assert warnings
    assert all(sum(kv.valid) <= 4 for kv in k2c)


def test_gaussian_radius_positive():
    assert gaussian_radius(10, 10) > 0
    assert gaussian_radius(100, 5) < gaussian_radius(100, 50)
