"""Slow, independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np

from tsrkit.core import Cell, LogicalLoc, Quad, TableAnnotation
from tsrkit.metrics import TreeNode


def grid_table(xs, ys, cells=None, width=None, height=None) -> TableAnnotation:
    """Axis-aligned table on grid lines ``xs``/``ys``; ``cells`` lists logical
    rectangles (r0, r1, c0, c1), default every unit cell."""
    if cells is None:
        cells = [(r, r, c, c) for r in range(len(ys) - 1) for c in range(len(xs) - 1)]
    out = []
    for r0, r1, c0, c1 in cells:
        out.append(Cell(Quad.from_box(xs[c0], ys[r0], xs[c1 + 1], ys[r1 + 1]), LogicalLoc(r0, r1, c0, c1)))
    W = width if width is not None else int(math.ceil(max(xs))) + 1
    H = height if height is not None else int(math.ceil(max(ys))) + 1
    return TableAnnotation(tuple(out), W, H)


# ---------------------------------------------------------- per-pixel raster replay


def _incircle_sign(a, b, c, d) -> float:
    """In-circle determinant, translated so d sits at the origin."""
    r = []
    for p in (a, b, c):
        dx, dy = p[0] - d[0], p[1] - d[1]
        r.append([dx, dy, dx * dx + dy * dy])
    return (r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]))


def _tri_area2(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def oracle_triangles(p):
    scale = max(max(abs(q[0] - p[0][0]), abs(q[1] - p[0][1])) for q in p)
    tol = 1e-12 * scale * scale
    split_a = ((0, 1, 2), (0, 2, 3))
    split_b = ((0, 1, 3), (1, 2, 3))
    ok_a = all(abs(_tri_area2(*(p[t] for t in tri))) > tol for tri in split_a)
    ok_b = all(abs(_tri_area2(*(p[t] for t in tri))) > tol for tri in split_b)
    if ok_a and ok_b:
        s = _incircle_sign(p[0], p[1], p[2], p[3]) * (1.0 if _tri_area2(p[0], p[1], p[2]) > 0 else -1.0)
        return split_b if s > 1e-12 * scale ** 4 else split_a
    if ok_a:
        return split_a
    if ok_b:
        return split_b
    return None


def brute_force_raster(polys_xy, polys_vals, H, W):
    """Per-pixel replay of the polygon interpolation with an explicit write log.

    polys_xy: list of 4x2; polys_vals: list of length-4 value lists.
    Returns (interp, mask, write_log).
    """
    areas = []
    for xy in polys_xy:
        s = 0.0
        for k in range(4):
            x1, y1 = xy[k]
            x2, y2 = xy[(k + 1) % 4]
            s += x1 * y2 - x2 * y1
        areas.append(abs(s) / 2)
    order = sorted(range(len(polys_xy)), key=lambda k: areas[k])
    interp = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=bool)
    log = []
    for k in order:
        xy = [tuple(map(float, v)) for v in polys_xy[k]]
        vals = polys_vals[k]
        x0 = math.floor(min(v[0] for v in xy))
        y0 = math.floor(min(v[1] for v in xy))
        local = [(v[0] - x0, v[1] - y0) for v in xy]
        tris = oracle_triangles(local)
        if tris is None:
            continue
        for y in range(H):
            for x in range(W):
                lx, ly = float(x - x0), float(y - y0)
                value = None
                for ia, ib, ic in tris:
                    (ax, ay), (bx, by), (cx, cy) = local[ia], local[ib], local[ic]
                    den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
                    l1 = ((by - cy) * (lx - cx) + (cx - bx) * (ly - cy)) / den
                    l2 = ((cy - ay) * (lx - cx) + (ax - cx) * (ly - cy)) / den
                    l3 = 1.0 - l1 - l2
                    if l1 >= -1e-9 and l2 >= -1e-9 and l3 >= -1e-9:
                        l3d = ((ay - by) * (lx - bx) + (bx - ax) * (ly - by)) / den
                        w = (l1, l2, l3d)
                        tv = (vals[ia], vals[ib], vals[ic])
                        m = max(range(3), key=lambda t: (w[t], -t))
                        value = tv[m] + w[0] * (tv[0] - tv[m]) + w[1] * (tv[1] - tv[m]) + w[2] * (tv[2] - tv[m])
                        value = max(value, 0.0)
                        break
                if value is not None and not mask[y, x]:
                    interp[y, x] = value
                    mask[y, x] = True
                    log.append((k, y, x))
    return interp, mask, log


# ------------------------------------------------------------------- TEDS


def _flatten(root: TreeNode):
    """Preorder keys, preorder positions and ancestor sets."""
    keys, anc = [], []

    def walk(node, parents):
        keys.append(node.key())
        anc.append(set(parents))
        me = len(keys) - 1
        for ch in node.children:
            walk(ch, parents + [me])

    walk(root, [])
    return keys, anc


def ted_bruteforce(t1: TreeNode, t2: TreeNode) -> int:
    """Minimum cost over every valid (Tai) mapping; fine up to ~7 nodes."""
    k1, a1 = _flatten(t1)
    k2, a2 = _flatten(t2)
    n1, n2 = len(k1), len(k2)
    best = n1 + n2

    def consistent(i, j, pairs):
        for p, q in pairs:
            if (p in a1[i]) != (q in a2[j]) or (i in a1[p]) != (j in a2[q]):
                return False
            if (p < i) != (q < j):
                return False
        return True

    def rec(i, pairs, used, cost):
        nonlocal best
        if i == n1:
            total = cost + (n1 - len(pairs)) + (n2 - len(pairs))
            best = min(best, total)
            return
        rec(i + 1, pairs, used, cost)
        for j in range(n2):
            if j in used or not consistent(i, j, pairs):
                continue
            rec(i + 1, pairs + [(i, j)], used | {j}, cost + (0 if k1[i] == k2[j] else 1))

    rec(0, [], frozenset(), 0)
    return best


def random_structure_tree(rng: np.random.Generator, max_nodes: int = 6) -> TreeNode:
    budget = int(rng.integers(1, max_nodes + 1)) - 1
    root = TreeNode("table")
    while budget > 0:
        tr = TreeNode("tr")
        root.children.append(tr)
        budget -= 1
        n_td = int(rng.integers(0, budget + 1))
        for _ in range(n_td):
            tr.children.append(TreeNode("td", int(rng.integers(1, 3)), int(rng.integers(1, 3))))
        budget -= n_td
    return root


# -------------------------------------------------------------- adjacency


def adjacency_bruteforce(ann: TableAnnotation) -> set:
    out = set()
    for i, j in itertools.permutations(range(len(ann.cells)), 2):
        a, b = ann.cells[i].logical, ann.cells[j].logical
        rows = max(a.row_start, b.row_start) <= min(a.row_end, b.row_end)
        cols = max(a.col_start, b.col_start) <= min(a.col_end, b.col_end)
        if rows and b.col_start == a.col_end + 1:
            out.add((i, j, "h"))
        if cols and b.row_start == a.row_end + 1:
            out.add((i, j, "v"))
    return out


# ---------------------------------------------------- finite differences


def central_difference(f, x: np.ndarray, index, h: float = 1e-5) -> float:
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-10) -> float:
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale
