"""Command-line driver and task-count benchmark.

    u8kverify --mode incontext kernel.img user.img
    u8kverify --mode param --annotations example.annot kernel.img user.img
    u8kverify --mode param-bootdiff --annotations boot.annot kernel.img user.img
    u8kverify --bench 1,2,16 --mode param

Exit status: 0 when APE and ARTE are both proved (and the base case holds),
2 when something is not proved, 1 on usage or internal errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path

from . import corpus
from .asm import AsmError, assemble
from .domains import memory as amem
from .domains.typesys import AnnotationError, load_annotations
from .domains.value import set_vset_cap
from .engine import DEFAULT_BUDGET, UNROLL_CAP, BudgetExceeded
from .machine import MachineImage
from .verify import RunResult, oracle_campaign, run_in_context, run_parameterized

MODES = ("incontext", "param", "param-bootdiff")
SCHEMA = 1


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    mode: str = "incontext"
    kernel: str | None = None
    user: str | None = None
    annotations: str | None = None
    exitpoint: int | None = None
    budget_worklist: int = DEFAULT_BUDGET
    vset_k: int | None = None
    weak_cap: int = amem.WEAK_UPDATE_CAP
    unroll_cap: int = UNROLL_CAP
    report: str = "text"
    emit_invariant: str | None = None
    oracle_runs: int = 0
    seed: int = 0
    bench: list[int] = field(default_factory=list)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.bench:
            return
        if self.kernel is None:
            raise UsageError("a kernel image is required")
        if self.mode == "incontext" and self.annotations:
            raise UsageError("incontext mode takes no annotation file")
        if self.mode != "incontext" and not self.annotations:
            raise UsageError(f"{self.mode} mode needs --annotations")
        if self.mode == "param-bootdiff" and self.user is None:
            raise UsageError("param-bootdiff mode needs a user image")


def load_image(path: str | Path) -> MachineImage:
    """An image file, or assembly source when the name ends in ``.s``."""
    path = Path(path)
    if path.suffix == ".s":
        return assemble(path.read_text(encoding="utf-8"))
    return MachineImage.load(path)


def _analyzer_kw(cfg: RunConfig) -> dict:
    return {"weak_cap": cfg.weak_cap, "unroll_cap": cfg.unroll_cap}


def run(cfg: RunConfig) -> RunResult:
    kernel = load_image(cfg.kernel)
    user = load_image(cfg.user) if cfg.user else None
    if cfg.mode == "incontext":
        return run_in_context(kernel, user, cfg.budget_worklist, **_analyzer_kw(cfg))
    env = load_annotations(cfg.annotations)
    return run_parameterized(kernel, env, user, cfg.budget_worklist,
                             differentiated=cfg.mode == "param-bootdiff",
                             exitpoint=cfg.exitpoint, **_analyzer_kw(cfg))


def build_report(cfg: RunConfig, res: RunResult, invariant_path: str | None,
                 oracle: list[str] | None = None) -> dict:
    counts: dict[str, int] = {}
    for a in res.alarms:
        counts[a.kind.value] = counts.get(a.kind.value, 0) + 1
    rep = {
        "schema": SCHEMA,
        "mode": cfg.mode,
        "kernel": cfg.kernel,
        "user": cfg.user,
        "annotations": cfg.annotations,
        "ape": str(res.verdict.ape),
        "arte": str(res.verdict.arte),
        "invariant_trivial": res.verdict.invariant_trivial,
        "base_case_ok": not res.base_case,
        "ok": res.ok,
        "alarm_counts": dict(sorted(counts.items())),
        "alarms": sorted(str(a) for a in res.alarms),
        "iterations": res.invariant.iterations,
        "program_points": len(res.invariant.states),
        "self_check": list(res.invariant.self_check),
        "invariant_path": invariant_path,
        "timings": {k: round(v, 6) for k, v in sorted(res.timings.items())},
    }
    if oracle is not None:
        rep["oracle"] = {"runs": cfg.oracle_runs, "seed": cfg.seed, "violations": oracle}
    return rep


def render_text(rep: dict) -> str:
    """Human-readable report. Timings come last so everything above is reproducible."""
    lines = [
        f"mode        {rep['mode']}",
        f"kernel      {rep['kernel']}",
        f"user        {rep['user']}",
    ]
    if rep["annotations"]:
        lines.append(f"annotations {rep['annotations']}")
    lines += [
        f"APE         {rep['ape']}",
        f"ARTE        {rep['arte']}",
        f"base case   {'ok' if rep['base_case_ok'] else 'violated'}",
        f"points      {rep['program_points']} ({rep['iterations']} iterations)",
        f"alarms      {sum(rep['alarm_counts'].values())}",
    ]
    lines += [f"  {k}: {n}" for k, n in rep["alarm_counts"].items()]
    lines += [f"  - {a}" for a in rep["alarms"]]
    if rep["self_check"]:
        lines.append(f"self-check  {len(rep['self_check'])} non-inductive points")
    if "oracle" in rep:
        o = rep["oracle"]
        lines.append(f"oracle      {o['runs']} runs, seed {o['seed']}, {len(o['violations'])} violations")
    if rep["invariant_path"]:
        lines.append(f"invariant   {rep['invariant_path']}")
    lines.append("timings     " + ", ".join(f"{k}={v:.3f}s" for k, v in rep["timings"].items()))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# benchmark


def bench_sweep(ns: list[int], mode: str = "incontext", *, budget: int = DEFAULT_BUDGET) -> list[dict]:
    """One row per task count: wall time, peak traced memory and verdict.

    Uses the bundled kernels with generated round-robin user images. A task
    count that cannot be laid out in memory yields a row with ``error`` set.
    For the parameterized modes ``invariant_time`` and ``invariant_sha256``
    isolate the user-independent part of the work.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "param-bootdiff":
        kernel, env = corpus.image("kernel_boot"), load_annotations(corpus.path("boot.annot"))
    else:
        kernel, env = corpus.image("kernel_fig1"), load_annotations(corpus.path("example.annot"))
    rows = []
    for n in ns:
        row: dict = {"n": n, "mode": mode}
        try:
            user = corpus.generate_user(n, link=mode != "param-bootdiff")
        except ValueError as exc:
            row.update(error=str(exc), ok=False)
            rows.append(row)
            continue
        tracemalloc.start()
        t0 = time.perf_counter()
        if mode == "incontext":
            res = run_in_context(kernel, user, budget)
        else:
            res = run_parameterized(kernel, env, user, budget,
                                    differentiated=mode == "param-bootdiff")
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        row.update(
            time=round(elapsed, 6),
            peak_bytes=peak,
            ok=res.ok,
            ape=str(res.verdict.ape),
            arte=str(res.verdict.arte),
            iterations=res.invariant.iterations,
        )
        if mode != "incontext":
            row["invariant_time"] = round(res.timings["invariant"], 6)
            row["base_case_time"] = round(res.timings["base_case"], 6)
            row["invariant_sha256"] = hashlib.sha256(res.invariant.serialize().encode()).hexdigest()
        rows.append(row)
    return rows


def render_bench(rows: list[dict]) -> str:
    out = [f"{'N':>4} {'time(s)':>9} {'peak(KiB)':>10}  verdict"]
    for r in rows:
        if "error" in r:
            out.append(f"{r['n']:>4} {'-':>9} {'-':>10}  error: {r['error']}")
            continue
        extra = f"  inv={r['invariant_time']:.3f}s {r['invariant_sha256'][:12]}" if "invariant_time" in r else ""
        out.append(f"{r['n']:>4} {r['time']:>9.3f} {r['peak_bytes'] / 1024:>10.1f}  "
                   f"{'ok' if r['ok'] else 'not proved'}{extra}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# entry point


def _int(text: str) -> int:
    return int(text, 0)


def _ns(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad task-count list {text!r}")


def parse_args(argv=None) -> RunConfig:
    p = argparse.ArgumentParser(prog="u8kverify", description="verify a u8k kernel against APE and ARTE")
    p.add_argument("kernel", nargs="?", help="kernel image (.img) or source (.s)")
    p.add_argument("user", nargs="?", help="user image (.img) or source (.s)")
    p.add_argument("--mode", choices=MODES, default="incontext")
    p.add_argument("--annotations", help="annotation file (param modes)")
    p.add_argument("--exitpoint", type=_int, help="boot/runtime boundary address")
    p.add_argument("--budget-worklist", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--vset-k", type=int, help="largest value set kept exact")
    p.add_argument("--weak-cap", type=int, default=amem.WEAK_UPDATE_CAP)
    p.add_argument("--unroll-cap", type=int, default=UNROLL_CAP)
    p.add_argument("--report", choices=("text", "json"), default="text")
    p.add_argument("--emit-invariant", metavar="PATH")
    p.add_argument("--oracle-runs", type=int, default=0,
                   help="random adversarial runs checked against the invariant (seed from U8K_SEED)")
    p.add_argument("--bench", type=_ns, metavar="N1,N2,...")
    a = p.parse_args(argv)
    cfg = RunConfig(
        mode=a.mode, kernel=a.kernel, user=a.user, annotations=a.annotations,
        exitpoint=a.exitpoint, budget_worklist=a.budget_worklist, vset_k=a.vset_k,
        weak_cap=a.weak_cap, unroll_cap=a.unroll_cap, report=a.report,
        emit_invariant=a.emit_invariant, oracle_runs=a.oracle_runs,
        seed=int(os.environ.get("U8K_SEED", "0")), bench=a.bench or [],
    )
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(f"u8kverify: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    except ValueError as exc:
        print(f"u8kverify: {exc}", file=sys.stderr)
        return 1
    old_k = set_vset_cap(cfg.vset_k) if cfg.vset_k is not None else None
    try:
        if cfg.bench:
            rows = bench_sweep(cfg.bench, cfg.mode, budget=cfg.budget_worklist)
            if cfg.report == "json":
                print(json.dumps({"schema": SCHEMA, "bench": rows}, indent=2))
            else:
                print(render_bench(rows))
            return 0 if all(r["ok"] for r in rows) else 2
        res = run(cfg)
        if cfg.emit_invariant:
            Path(cfg.emit_invariant).write_text(res.invariant.serialize(), encoding="utf-8")
        oracle = None
        if cfg.oracle_runs:
            oracle = oracle_campaign(load_image(cfg.kernel), load_image(cfg.user) if cfg.user else None,
                                     res.invariant, cfg.oracle_runs, cfg.seed)
        rep = build_report(cfg, res, cfg.emit_invariant, oracle)
        print(json.dumps(rep, indent=2) if cfg.report == "json" else render_text(rep))
        return 0 if res.ok and not oracle else 2
    except (OSError, AsmError, AnnotationError, BudgetExceeded, ValueError, KeyError) as exc:
        print(f"u8kverify: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if old_k is not None:
            set_vset_cap(old_k)


if __name__ == "__main__":
    sys.exit(main())
