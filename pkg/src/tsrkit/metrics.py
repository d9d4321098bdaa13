"""Evaluation: physical P/R/F1, logical accuracy, adjacency relations, TEDS."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .core import TableAnnotation, is_convex, logical_overlaps, polygon_iou

log = logging.getLogger(__name__)


@dataclass
class CellMatching:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for g, p, _ in self.pairs}

    def pred_to_gt(self) -> dict[int, int]:
        return {p: g for g, p, _ in self.pairs}


def _bboxes(ann: TableAnnotation) -> np.ndarray:
    if not ann.cells:
        return np.zeros((0, 4))
    pts = ann.corners_array()
    return np.concatenate([pts.min(axis=1), pts.max(axis=1)], axis=1)


def match_cells(gt: TableAnnotation, pred: TableAnnotation, iou_threshold: float = 0.5) -> CellMatching:
    """Greedy one-to-one matching by descending IoU; ties go to the lower (gt, pred) index."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    bg, bp = _bboxes(gt), _bboxes(pred)
    cand = []
    if len(bg) and len(bp):
        # boxes must overlap for the quads to
        ov = ((bg[:, None, 0] < bp[None, :, 2]) & (bp[None, :, 0] < bg[:, None, 2])
              & (bg[:, None, 1] < bp[None, :, 3]) & (bp[None, :, 1] < bg[:, None, 3]))
        convex = [is_convex(c.quad.corners) for c in pred.cells]
        for gi, pi in zip(*np.nonzero(ov)):
            if not convex[pi]:
                continue
            iou = polygon_iou(gt.cells[gi].quad, pred.cells[pi].quad)
            if iou >= iou_threshold:
                cand.append((-iou, int(gi), int(pi)))
    cand.sort()
    used_g, used_p = set(), set()
    pairs = []
    for neg, gi, pi in cand:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        pairs.append((gi, pi, -neg))
    return CellMatching(
        pairs,
        [i for i in range(len(gt.cells)) if i not in used_g],
        [i for i in range(len(pred.cells)) if i not in used_p],
    )


def prf(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_gt == 0:
        # nothing to find and nothing claimed: a perfect score, so identity evaluation is always 1
        return 1.0, 1.0, 1.0
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def physical_prf(gt: TableAnnotation, pred: TableAnnotation, iou_threshold: float = 0.5,
                 matching: CellMatching | None = None) -> tuple[float, float, float]:
    m = matching or match_cells(gt, pred, iou_threshold)
    return prf(len(m.pairs), len(pred.cells), len(gt.cells))


@dataclass(frozen=True)
class LogicalAccuracy:
    acc: float
    row_start: float
    row_end: float
    col_start: float
    col_end: float
    empty: bool = False

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return self.acc, self.row_start, self.row_end, self.col_start, self.col_end


def logical_accuracy(gt: TableAnnotation, pred: TableAnnotation, iou_threshold: float = 0.5,
                     matching: CellMatching | None = None) -> LogicalAccuracy:
    n = len(gt.cells)
    if n == 0:
        return LogicalAccuracy(1.0, 1.0, 1.0, 1.0, 1.0, empty=True)
    m = matching or match_cells(gt, pred, iou_threshold)
    hits = np.zeros(5)
    for gi, pi, _ in m.pairs:
        a, b = gt.cells[gi].logical, pred.cells[pi].logical
        eq = [a.row_start == b.row_start, a.row_end == b.row_end, a.col_start == b.col_start, a.col_end == b.col_end]
        hits += [all(eq)] + eq
    return LogicalAccuracy(*(float(h) / n for h in hits))


# --------------------------------------------------------------- adjacency


def adjacency_relations(ann: TableAnnotation) -> set[tuple[int, int, str]]:
    """(a, b, "h") when b sits right of a, (a, b, "v") when b sits below a."""
    by_col, by_row = defaultdict(list), defaultdict(list)
    for i, c in enumerate(ann.cells):
        by_col[c.logical.col_start].append(i)
        by_row[c.logical.row_start].append(i)
    out = set()
    for i, a in enumerate(ann.cells):
        la = a.logical
        for j in by_col.get(la.col_end + 1, ()):
            lb = ann.cells[j].logical
            if lb.row_start <= la.row_end and la.row_start <= lb.row_end:
                out.add((i, j, "h"))
        for j in by_row.get(la.row_end + 1, ()):
            lb = ann.cells[j].logical
            if lb.col_start <= la.col_end and la.col_start <= lb.col_end:
                out.add((i, j, "v"))
    return out


def adjacency_prf(gt: TableAnnotation, pred: TableAnnotation, iou_threshold: float = 0.5,
                  matching: CellMatching | None = None) -> tuple[float, float, float]:
    counts = adjacency_counts(gt, pred, iou_threshold, matching)
    return prf(*counts)


def adjacency_counts(gt, pred, iou_threshold=0.5, matching=None) -> tuple[int, int, int]:
    """(true positives, predicted relations, GT relations)."""
    m = matching or match_cells(gt, pred, iou_threshold)
    to_gt = m.pred_to_gt()
    gt_rel = adjacency_relations(gt)
    pred_rel = adjacency_relations(pred)
    mapped = {(to_gt[a], to_gt[b], d) for a, b, d in pred_rel if a in to_gt and b in to_gt}
    return len(mapped & gt_rel), len(pred_rel), len(gt_rel)


# -------------------------------------------------------------------- TEDS


@dataclass
class TreeNode:
    label: str  # "table" | "tr" | "td"
    rowspan: int = 1
    colspan: int = 1
    children: list["TreeNode"] = field(default_factory=list)

    def key(self) -> tuple[str, int, int]:
        return self.label, self.rowspan, self.colspan

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


StructureTree = TreeNode


def to_structure_tree(ann: TableAnnotation) -> TreeNode:
    overlaps = logical_overlaps(ann)
    if overlaps:
        raise ValueError(f"cells {overlaps[0][0]} and {overlaps[0][1]} have overlapping logical ranges")
    rows = [TreeNode("tr") for _ in range(ann.n_rows)]
    for c in sorted(ann.cells, key=lambda c: (c.logical.row_start, c.logical.col_start)):
        lg = c.logical
        rows[lg.row_start].children.append(TreeNode("td", lg.row_span, lg.col_span))
    return TreeNode("table", children=rows)


def _postorder(root: TreeNode):
    """Postorder labels, leftmost-leaf indices and keyroots."""
    keys, lml = [], []

    def walk(node):
        first = None
        for ch in node.children:
            leaf = walk(ch)
            if first is None:
                first = leaf
        keys.append(node.key())
        idx = len(keys) - 1
        lml.append(idx if first is None else first)
        return lml[idx]

    walk(root)
    seen = {}
    for i, l in enumerate(lml):
        seen[l] = i  # highest node with that leftmost leaf
    return keys, lml, sorted(seen.values())


def tree_edit_distance(t1: TreeNode, t2: TreeNode) -> int:
    """Ordered-tree edit distance with unit costs (keyroot dynamic program)."""
    k1, l1, kr1 = _postorder(t1)
    k2, l2, kr2 = _postorder(t2)
    n, m = len(k1), len(k2)
    td = np.zeros((n, m), dtype=np.int64)
    for i in kr1:
        for j in kr2:
            li, lj = l1[i], l2[j]
            rows, cols = i - li + 2, j - lj + 2
            fd = np.zeros((rows, cols), dtype=np.int64)
            fd[:, 0] = np.arange(rows)
            fd[0, :] = np.arange(cols)
            for x in range(li, i + 1):
                fx = x - li + 1
                for y in range(lj, j + 1):
                    fy = y - lj + 1
                    if l1[x] == li and l2[y] == lj:
                        sub = 0 if k1[x] == k2[y] else 1
                        fd[fx, fy] = min(fd[fx - 1, fy] + 1, fd[fx, fy - 1] + 1, fd[fx - 1, fy - 1] + sub)
                        td[x, y] = fd[fx, fy]
                    else:
                        px, py = l1[x] - li, l2[y] - lj
                        fd[fx, fy] = min(fd[fx - 1, fy] + 1, fd[fx, fy - 1] + 1, fd[px, py] + td[x, y])
    return int(td[n - 1, m - 1])


def teds(gt_tree: TreeNode, pred_tree: TreeNode) -> float:
    size = max(gt_tree.size(), pred_tree.size())
    return 1.0 - tree_edit_distance(gt_tree, pred_tree) / size


def f_beta(f1_physical: float, logical_acc: float, beta: float = 0.5) -> float:
    b2 = beta * beta
    den = b2 * f1_physical + logical_acc
    if den == 0:
        return 0.0
    return (1 + b2) * f1_physical * logical_acc / den


# ------------------------------------------------------------------ report


def evaluate_document(gt: TableAnnotation, pred: TableAnnotation, iou_threshold: float = 0.5) -> dict:
    m = match_cells(gt, pred, iou_threshold)
    p, r, f = physical_prf(gt, pred, matching=m)
    la = logical_accuracy(gt, pred, matching=m)
    tp, n_pred_rel, n_gt_rel = adjacency_counts(gt, pred, matching=m)
    ap, ar, af = prf(tp, n_pred_rel, n_gt_rel)
    try:
        t = teds(to_structure_tree(gt), to_structure_tree(pred))
    except ValueError as exc:
        log.warning("TEDS set to 0: %s", exc)
        t = 0.0
    return {
        "counts": {
            "matched": len(m.pairs), "gt_cells": len(gt.cells), "pred_cells": len(pred.cells),
            "adj_tp": tp, "adj_pred": n_pred_rel, "adj_gt": n_gt_rel,
        },
        "physical": {"precision": p, "recall": r, "f1": f},
        "logical": {"acc": la.acc, "acc_row_start": la.row_start, "acc_row_end": la.row_end,
                    "acc_col_start": la.col_start, "acc_col_end": la.col_end, "empty_table": la.empty},
        "adjacency": {"precision": ap, "recall": ar, "f1": af},
        "teds": t,
        "f_beta": f_beta(f, la.acc),
    }


def aggregate(docs: dict[str, dict]) -> dict:
    """Micro-averaged P/R/F1 over counts, plain means for TEDS and accuracies."""
    tot = defaultdict(int)
    for d in docs.values():
        for k, v in d["counts"].items():
            tot[k] += v
    p, r, f = prf(tot["matched"], tot["pred_cells"], tot["gt_cells"])
    ap, ar, af = prf(tot["adj_tp"], tot["adj_pred"], tot["adj_gt"])
    n = len(docs)
    mean = lambda get: float(np.mean([get(d) for d in docs.values()])) if n else 0.0
    acc = mean(lambda d: d["logical"]["acc"])
    return {
        "documents": n,
        "physical": {"precision": p, "recall": r, "f1": f},
        "logical": {k: mean(lambda d, k=k: d["logical"][k])
                    for k in ("acc", "acc_row_start", "acc_row_end", "acc_col_start", "acc_col_end")},
        "adjacency": {"precision": ap, "recall": ar, "f1": af},
        "teds": mean(lambda d: d["teds"]),
        "f_beta": f_beta(f, acc),
    }
