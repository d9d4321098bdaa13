"""CLI harness shared by the CLI tests and the acceptance suite."""
from __future__ import annotations

import json
import shutil
from pathlib import Path

from tsrkit.cli import main


def run(*argv) -> int:
    return main([str(a) for a in argv])


def build_corpus(root: Path, count: int = 20) -> Path:
    corpus = root / "corpus"
    assert run("synth", "--seed", 0, "--count", count, "--out", corpus, "--no-tensors") == 0
    return corpus


def pipeline(root: Path, corpus: Path, threads: int) -> tuple[dict, Path]:
    """gen-targets | decode | eval; returns the report and the output root."""
    out = root / f"threads{threads}"
    for argv in (("gen-targets", corpus, out / "tensors"),
                 ("decode", out / "tensors", out / "pred"),
                 ("eval", "--gt", corpus, "--pred", out / "pred", "--out", out / "report.json")):
        code = run("--threads", threads, *argv)
        if code != 0:
            raise AssertionError(f"{argv[0]} exited {code}")
    return json.loads((out / "report.json").read_text()), out


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def all_metrics(report: dict) -> list[float]:
    agg = report["aggregate"]
    vals = [agg["f_beta"], agg["teds"], *agg["physical"].values(), *agg["adjacency"].values(),
            *agg["logical"].values()]
    for doc in report["documents"].values():
        vals += [doc["f_beta"], doc["teds"], *doc["physical"].values(), *doc["adjacency"].values()]
        vals += [v for k, v in doc["logical"].items() if k != "empty_table"]
    return vals


def exit_code_cases(root: Path, corpus: Path) -> list[tuple[str, int, int, bool]]:
    """(case, expected, observed, left no output) for each row of the exit-code table."""
    first = sorted(corpus.glob("*.json"))[0]
    bad = root / "bad"
    bad.mkdir(exist_ok=True)
    (bad / "broken.json").write_text('{"cells": [')
    raw = json.loads(first.read_text())
    lg = raw["cells"][0]["logical"]
    raw["cells"][0]["logical"] = [lg[1] + 1, lg[1], lg[2], lg[3]]
    (bad / "inverted.json").write_text(json.dumps(raw))
    assert run("gen-targets", first, bad / "good") == 0
    missing = bad / "missing"
    shutil.copytree(bad / "good", missing)
    (missing / "spans.tcn").unlink()
    corrupt = bad / "corrupt"
    shutil.copytree(bad / "good", corrupt)
    blob = (corrupt / "heatmap.tcn").read_bytes()
    (corrupt / "heatmap.tcn").write_bytes(b"XXXX" + blob[4:])
    mismatch = bad / "mismatch"
    mismatch.mkdir(exist_ok=True)
    shutil.copy(first, mismatch / "other_name.json")
    (bad / "cfg.json").write_text(json.dumps({"no_such_option": 1}))
    (bad / "note.txt").write_text("x")

    cases = [
        ("malformed JSON", 2, ("gen-targets", bad / "broken.json", bad / "o1"), bad / "o1"),
        ("invalid annotation", 2, ("gen-targets", bad / "inverted.json", bad / "o2"), bad / "o2"),
        ("missing raster", 2, ("decode", missing, bad / "o3.json"), bad / "o3.json"),
        ("corrupt TCN magic", 2, ("decode", corrupt, bad / "o4.json"), bad / "o4.json"),
        ("eval filename mismatch", 2, ("eval", "--gt", corpus, "--pred", mismatch, "--out", bad / "o5.json"),
         bad / "o5.json"),
        ("unsupported viz input", 2, ("viz", bad / "note.txt", bad / "o6.png"), bad / "o6.png"),
        ("unknown flag", 2, ("decode", "--no-such-flag", bad / "good", bad / "o7.json"), bad / "o7.json"),
        ("unknown config key", 2, ("--config", bad / "cfg.json", "gridify", first, bad / "o8.json"), bad / "o8.json"),
        ("roundtrip invariant violation", 3, ("roundtrip", "--seeds", "0..1", "--tolerance", "-1"), None),
        ("success", 0, ("gridify", first, bad / "o9.json"), None),
    ]
    out = []
    for name, expected, argv, target in cases:
        code = run(*argv)
        out.append((name, expected, code, target is None or not target.exists()))
    return out
