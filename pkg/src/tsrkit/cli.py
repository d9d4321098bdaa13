"""tsrkit command line.

Exit codes: 0 success, 2 input or validation error, 3 internal error
(including a failed round-trip invariant).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import LossConfig, TableAnnotation, validate_annotation
from .decoder import DecodeConfig, RawNetworkOutput, decode_table
from .gridify import cells_to_grids
from .losses import overall_loss
from .metrics import aggregate, evaluate_document, f_beta
from .raster import atomic_write, read_tcn
from .synth import config_for_seed, gen_table, render_oracle
from .targets import TargetBundle, assemble_target_bundle

log = logging.getLogger("tsrkit")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3
AGGREGATION_NOTE = "P/R/F1 micro-averaged over document counts; TEDS and accuracies are means over documents"


class InputError(Exception):
    """Bad user input; exits with status 2."""


class InvariantError(Exception):
    """An internal check failed; exits with status 3."""


# ----------------------------------------------------------------- helpers


def load_annotation(path: Path) -> TableAnnotation:
    try:
        ann = TableAnnotation.from_json(Path(path).read_text())
    except (ValueError, OSError) as exc:
        raise InputError(f"{path}: {exc}") from None
    problems = validate_annotation(ann)
    if problems:
        report = "\n".join(f"  [{v.code}] {v.message}" for v in problems)
        raise InputError(f"{path}: invalid annotation\n{report}")
    return ann


def _json_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        items = sorted(p for p in path.glob("*.json") if p.name != "diagnostics.json")
        if not items:
            raise InputError(f"no .json files in {path}")
        return items
    if not path.is_file():
        raise InputError(f"no such file: {path}")
    return [path]


def _write_dir(out: Path, fill) -> None:
    """Populate a sibling temp directory, then move it into place."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        fill(tmp)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _pool_map(fn, items, threads: int) -> list:
    n = threads or os.cpu_count() or 1
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def parse_seeds(spec: str) -> list[int]:
    """'0..499' (inclusive), '3,5,8' or a mix of both."""
    seeds = []
    try:
        for part in spec.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise InputError(f"bad seed list {spec!r}; use forms like 0..499 or 1,2,3") from None
    if not seeds:
        raise InputError("empty seed list")
    return seeds


def _loss_config(args) -> LossConfig:
    try:
        return LossConfig(lambda_u=args.lambda_u, lambda_v=args.lambda_v, lambda_e=args.lambda_e,
                          downscale=args.downscale)
    except ValueError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------- commands


def cmd_gen_targets(args) -> int:
    src = Path(args.input)
    items = _json_inputs(src)
    anns = [load_annotation(p) for p in items]  # validate everything before writing
    cfg = _loss_config(args)
    batch = src.is_dir()
    out = Path(args.out)

    def work(job):
        path, ann = job
        if args.gridify:
            ann = cells_to_grids(ann)
        bundle = assemble_target_bundle(ann, cfg)
        raw = render_oracle(ann, cfg, bundle)

        def fill(d):
            bundle.save(d)
            raw.save(d)

        _write_dir(out / path.stem if batch else out, fill)
        return path.name, len(bundle.warnings)

    for name, n_warn in _pool_map(work, list(zip(items, anns)), args.threads):
        log.info("%s: targets written (%d warnings)", name, n_warn)
    return EXIT_OK


def _tensor_dirs(path: Path) -> list[Path]:
    if (path / "meta.json").is_file():
        return [path]
    if path.is_dir():
        dirs = sorted(p for p in path.iterdir() if p.is_dir() and (p / "meta.json").is_file())
        if dirs:
            return dirs
        raise InputError(f"{path} holds no tensor directories (missing meta.json)")
    raise InputError(f"no such directory: {path}")


def _load_raw(d: Path) -> RawNetworkOutput:
    try:
        return RawNetworkOutput.load(d)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{d}: {exc}") from None


def cmd_decode(args) -> int:
    src = Path(args.input)
    dirs = _tensor_dirs(src)
    try:
        cfg = DecodeConfig(tau_center=args.tau, tau_corner=args.tau_corner if args.tau_corner is not None else args.tau,
                           max_k=args.max_k, r_align=args.r_align, eps_back=args.eps_back,
                           corner_inset=args.corner_inset)
        if not (0 < cfg.tau_center < 1 and 0 < cfg.tau_corner < 1) or cfg.max_k < 1:
            raise ValueError("thresholds must lie in (0, 1) and max_k must be >= 1")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    raws = [_load_raw(d) for d in dirs]
    out = Path(args.out)
    single = (src / "meta.json").is_file()

    def work(job):
        d, raw = job
        dec = decode_table(raw, cfg)
        if single:
            ann_path = out
            diag_path = Path(args.diagnostics) if args.diagnostics else out.parent / "diagnostics.json"
        else:
            ann_path = out / f"{d.name}.json"
            diag_path = out / "diagnostics" / f"{d.name}.json"
        atomic_write(ann_path, dec.annotation.to_json() + "\n")
        atomic_write(diag_path, _dump(dec.diagnostics_dict()))
        return d.name, len(dec.annotation.cells), len(dec.overlaps)

    for name, n, n_ov in _pool_map(work, list(zip(dirs, raws)), args.threads):
        if n_ov:
            log.warning("%s: %d logically overlapping cell pairs", name, n_ov)
        log.info("%s: %d cells", name, n)
    return EXIT_OK


def _pair_inputs(gt: Path, pred: Path) -> list[tuple[str, Path, Path]]:
    if gt.is_file() and pred.is_file():
        return [(gt.stem, gt, pred)]
    if not gt.is_dir() or not pred.is_dir():
        raise InputError("--gt and --pred must both be files or both be directories")
    g = {p.name: p for p in _json_inputs(gt)}
    p = {q.name: q for q in pred.glob("*.json") if q.name != "diagnostics.json"}
    if set(g) != set(p):
        only_gt = sorted(set(g) - set(p))
        only_pred = sorted(set(p) - set(g))
        raise InputError(f"file names differ: only in gt {only_gt}, only in pred {only_pred}")
    return [(Path(n).stem, g[n], p[n]) for n in sorted(g)]


CSV_FIELDS = ("document", "phys_p", "phys_r", "phys_f1", "adj_p", "adj_r", "adj_f1",
              "acc", "acc_row_start", "acc_row_end", "acc_col_start", "acc_col_end", "teds", "f_beta")


def _csv_row(name: str, d: dict) -> list:
    lg = d["logical"]
    vals = [d["physical"]["precision"], d["physical"]["recall"], d["physical"]["f1"],
            d["adjacency"]["precision"], d["adjacency"]["recall"], d["adjacency"]["f1"],
            lg["acc"], lg["acc_row_start"], lg["acc_row_end"], lg["acc_col_start"], lg["acc_col_end"],
            d["teds"], d["f_beta"]]
    return [name] + [f"{v:.6f}" for v in vals]


def cmd_eval(args) -> int:
    if not 0 < args.iou <= 1:
        raise InputError("--iou must lie in (0, 1]")
    pairs = _pair_inputs(Path(args.gt), Path(args.pred))
    loaded = []
    for name, g, p in pairs:
        gt = load_annotation(g)
        try:
            pred = TableAnnotation.from_json(p.read_text())
        except ValueError as exc:
            raise InputError(f"{p}: {exc}") from None
        loaded.append((name, gt, pred))
    results = _pool_map(lambda job: (job[0], evaluate_document(job[1], job[2], args.iou)), loaded, args.threads)
    docs = dict(sorted(results))
    agg = aggregate(docs)
    report = {"aggregation": AGGREGATION_NOTE, "iou_threshold": args.iou, "documents": docs, "aggregate": agg}
    _emit(_dump(report), args.out)
    if args.report_dir:
        from .plotting import plot_report

        rd = Path(args.report_dir)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for name, d in docs.items():
            w.writerow(_csv_row(name, d))
        w.writerow(_csv_row("AGGREGATE", {**agg, "logical": {**agg["logical"]}}))
        atomic_write(rd / "report.csv", buf.getvalue())
        plot_report(docs, rd / "report.png")
    return EXIT_OK


def cmd_gridify(args) -> int:
    src = Path(args.input)
    items = _json_inputs(src)
    anns = [load_annotation(p) for p in items]
    grids = []
    for p, ann in zip(items, anns):
        try:
            grids.append(cells_to_grids(ann))
        except ValueError as exc:
            raise InputError(f"{p}: {exc}") from None
    out = Path(args.out)
    for p, g in zip(items, grids):
        atomic_write(out / p.name if src.is_dir() else out, g.to_json() + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    first = args.synth_seed if args.synth_seed is not None else args.seed
    if args.count < 1:
        raise InputError("--count must be >= 1")
    out = Path(args.out)
    cfg = _loss_config(args)

    def work(seed):
        try:
            ann = gen_table(config_for_seed(seed, warp_magnitude=args.warp_magnitude))
        except ValueError as exc:
            raise InputError(f"seed {seed}: {exc}") from None
        stem = f"table_{seed:04d}"
        atomic_write(out / f"{stem}.json", ann.to_json() + "\n")
        if not args.no_tensors:
            bundle = assemble_target_bundle(ann, cfg)
            raw = render_oracle(ann, cfg, bundle)
            _write_dir(out / f"{stem}.tensors", lambda d: (bundle.save(d), raw.save(d)))
        return stem

    for stem in _pool_map(work, list(range(first, first + args.count)), args.threads):
        log.info("wrote %s", stem)
    return EXIT_OK


def _corner_error(gt: TableAnnotation, pred: TableAnnotation, pairs) -> float:
    err = 0.0
    for gi, pi, _ in pairs:
        d = gt.cells[gi].quad.as_array() - pred.cells[pi].quad.as_array()
        err = max(err, float(np.hypot(d[:, 0], d[:, 1]).max()))
    return err


def roundtrip_seed(seed: int, tolerance: float = 2.0) -> dict:
    from .metrics import match_cells

    cfg = config_for_seed(seed)
    ann = gen_table(cfg)
    dec = decode_table(render_oracle(ann)).annotation
    doc = evaluate_document(ann, dec, 0.5)
    err = _corner_error(ann, dec, match_cells(ann, dec, 0.5).pairs)
    ok = doc["logical"]["acc"] == 1.0 and doc["physical"]["f1"] == 1.0 and err <= tolerance
    return {"seed": seed, "warp": cfg.warp, "cells": len(ann.cells), "logical_acc": doc["logical"]["acc"],
            "physical_f1": doc["physical"]["f1"], "max_corner_error": err, "pass": ok}


def cmd_roundtrip(args) -> int:
    seeds = parse_seeds(args.seeds)
    rows = _pool_map(lambda s: roundtrip_seed(s, args.tolerance), seeds, args.threads)
    failed = [r for r in rows if not r["pass"]]
    for r in failed:
        print(f"FAIL seed {r['seed']} ({r['warp']}): acc {r['logical_acc']:.4f} "
              f"f1 {r['physical_f1']:.4f} corner error {r['max_corner_error']:.3f}px")
    n_h = sum(r["warp"] == "homography" for r in rows)
    worst = max(r["max_corner_error"] for r in rows)
    print(f"roundtrip: {len(rows) - len(failed)}/{len(rows)} passed "
          f"({n_h} homography-warped), max corner error {worst:.4f}px")
    if args.out:
        atomic_write(args.out, _dump(rows))
    return EXIT_OK if not failed else EXIT_INTERNAL


def cmd_eval_loss(args) -> int:
    raw = _load_raw(Path(args.pred))
    try:
        target = TargetBundle.load(Path(args.target))
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{args.target}: {exc}") from None
    try:
        breakdown = overall_loss(raw, target, _loss_config(args))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    parts = breakdown.to_dict()
    total = parts["keypoint"] + parts["offset"] + parts["spatial"] + parts["boundary"] + parts["span"]
    if not math.isclose(total, parts["overall"], rel_tol=0, abs_tol=1e-9 * max(1.0, abs(total))):
        raise InvariantError("loss components do not add up to the overall loss")
    _emit(_dump(parts), args.out)
    return EXIT_OK


def cmd_viz(args) -> int:
    from .plotting import plot_annotation, save_map_png

    src = Path(args.input)
    if src.is_dir():
        fname = "rowmap.tcn" if args.map == "row" else "colmap.tcn"
        if not (src / fname).is_file():
            raise InputError(f"{src} has no {fname}")
        try:
            values = read_tcn(src / fname).data[:, :, 0]
            mask = read_tcn(src / "mask.tcn").data[:, :, 0] if (src / "mask.tcn").is_file() else None
        except ValueError as exc:
            raise InputError(f"{src}: {exc}") from None
        save_map_png(values, args.out, mask)
        return EXIT_OK
    if src.is_file() and src.suffix == ".json":
        ann = load_annotation(src)
        n = plot_annotation(ann, args.out, title=src.name)
        log.info("drew %d polygons", n)
        return EXIT_OK
    raise InputError(f"unsupported input {src}: expected a tensor directory or an annotation .json")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tsrkit", description="Table structure recognition toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help="JSON file whose keys mirror the flags (flags win)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads, 0 = one per CPU")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--verbose", "-v", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def loss_flags(p):
        p.add_argument("--lambda-u", type=float, default=1.0)
        p.add_argument("--lambda-v", type=float, default=0.5)
        p.add_argument("--lambda-e", type=float, default=0.2)
        p.add_argument("--downscale", type=int, default=4)

    p = sub.add_parser("gen-targets", help="annotation JSON -> target and oracle tensor directory")
    p.add_argument("input", help="annotation file or directory of them")
    p.add_argument("out")
    p.add_argument("--gridify", action="store_true", help="split spanning cells into grid cells first")
    loss_flags(p)
    p.set_defaults(func=cmd_gen_targets)

    p = sub.add_parser("decode", help="tensor directory -> annotation JSON")
    p.add_argument("input", help="tensor directory or a directory of them")
    p.add_argument("out")
    p.add_argument("--tau", type=float, default=0.3, help="center peak threshold")
    p.add_argument("--tau-corner", type=float, default=None, help="corner peak threshold (default: --tau)")
    p.add_argument("--max-k", type=int, default=3000)
    p.add_argument("--r-align", type=float, default=2.0)
    p.add_argument("--eps-back", type=float, default=2.0)
    p.add_argument("--corner-inset", type=float, default=0.75)
    p.add_argument("--diagnostics", help="diagnostics path for single-table decoding")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="report path (default stdout)")
    p.add_argument("--report-dir", help="also write report.csv and report.png here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridify", help="convert cells to unit grid cells")
    p.add_argument("input")
    p.add_argument("out")
    p.set_defaults(func=cmd_gridify)

    p = sub.add_parser("synth", help="synthetic annotations and oracle tensors")
    p.add_argument("--seed", dest="synth_seed", type=int, default=None)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--warp-magnitude", type=float, default=0.05)
    p.add_argument("--no-tensors", action="store_true")
    loss_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("roundtrip", help="decode(render_oracle(table)) over a seed range")
    p.add_argument("--seeds", default="0..499")
    p.add_argument("--tolerance", type=float, default=2.0, help="max corner error in px")
    p.add_argument("--out", help="per-seed JSON results")
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval-loss", help="loss breakdown of raw outputs against targets")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out")
    loss_flags(p)
    p.set_defaults(func=cmd_eval_loss)

    p = sub.add_parser("viz", help="PNG of an interpolation map or annotation")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--map", choices=("row", "col"), default="row")
    p.set_defaults(func=cmd_viz)
    return ap


def _dests(parser: argparse.ArgumentParser) -> set[str]:
    return {a.dest for a in parser._actions if a.dest not in ("help", "version")}


def parse_args(argv=None) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if not args.config:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = ap._subparsers._group_actions[0].choices[args.command]
    known = _dests(ap) | _dests(sub)
    unknown = sorted(set(cfg) - known - {"command", "config"})
    if unknown:
        raise InputError(f"unknown config keys: {unknown}")
    cfg.pop("command", None)
    cfg.pop("config", None)
    # file values become defaults, explicit flags still win
    ap.set_defaults(**{k: v for k, v in cfg.items() if k in _dests(ap)})
    sub.set_defaults(**{k: v for k, v in cfg.items() if k in _dests(sub)})
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except InputError as exc:
        print(f"tsrkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
        print("resolved config: " + json.dumps(resolved, sort_keys=True), file=sys.stderr)
    if args.threads < 0:
        print("tsrkit: error: --threads must be >= 0", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"tsrkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as exc:
        print(f"tsrkit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (ValueError, OSError) as exc:
        print(f"tsrkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("internal failure", exc_info=True)
        print(f"tsrkit: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
