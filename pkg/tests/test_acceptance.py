"""Acceptance criteria, each run at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary
(and echoed immediately on stdout).
"""
import dataclasses
import random
import time

import pytest

from conftest import ACCEPTANCE
from u8kverify import corpus
from u8kverify.alarms import AlarmKind
from u8kverify.domains.shape import Label, PointerTo, ScalarOf, derive_subtyping, interpret, \
    check_separation, transitive_reduction
from u8kverify.domains.typesys import load_annotations
from u8kverify.domains.value import BitvecAbs, transfer_alu
from u8kverify.machine import ALU_OPS, Op, alu
from u8kverify.verify import NotProved, oracle_campaign, run_in_context, run_parameterized

C = BitvecAbs.const


def record(key: str, ok: bool, detail: str):
    ACCEPTANCE[key] = (ok, detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def _emitted():
    """Every invariant produced by the acceptance runs, for the inductiveness check."""
    return _EMITTED


_EMITTED: list = []


# ---------------------------------------------------------------------------
# 1. in-context invariant


def test_c1_incontext_invariant(kernel, user):
    t0 = time.perf_counter()
    res = run_in_context(kernel, user)
    elapsed = time.perf_counter() - t0
    _EMITTED.append(("incontext fig1", res.invariant))
    inv = res.invariant
    ex = inv.exit_state()
    m = ex.mem
    priv_clear = BitvecAbs.urange(0, 0x7F)
    checks = {
        "cur in {a2,a7}": m[0xA0].vset == {0xA2, 0xA7},
        "ctx in {a3,a8}": m[0xA1].vset == {0xA3, 0xA8},
        "mpu1 = ae": ex.regs[10] == C(0xAE),
        "mpu2 = b0": ex.regs[11] == C(0xB0),
        "a2/a7 = ae": m[0xA2] == C(0xAE) and m[0xA7] == C(0xAE),
        "a6/ab within {a2,a7}": m[0xA6].leq(BitvecAbs.of([0xA2, 0xA7])) and m[0xAB].leq(BitvecAbs.of([0xA2, 0xA7])),
        "a5/aa/flags' bit 7 clear": m[0xA5] == priv_clear and m[0xAA] == priv_clear and ex.regs[9] == priv_clear,
        "c0-cf, e0-ef untracked": not (set(range(0xC0, 0xD0)) | set(range(0xE0, 0xF0))) & set(m.cells),
        "a3,a4,a8,a9 untracked": not {0xA3, 0xA4, 0xA8, 0xA9} & set(m.cells),
    }
    # all other kernel cells constant at every exit point
    other = [a for a in range(kernel.origin, kernel.end) if a not in (0xA0, 0xA1)]
    const = all(inv.states[p].mem[a].singleton is not None for p in inv.exit_points() for a in other)
    checks["other kernel cells constant"] = const
    user_rest = [a for a in range(0xA2, 0x100)
                 if a not in {0xA3, 0xA4, 0xA5, 0xA8, 0xA9, 0xAA}
                 and not (0xC0 <= a < 0xD0 or 0xE0 <= a < 0xF0)]
    checks["other user cells constant"] = all(m[a].singleton is not None for a in user_rest)
    checks["APE and ARTE proved"] = res.verdict.ok
    checks["runtime < 5 s"] = elapsed < 5
    bad = [k for k, v in checks.items() if not v]
    record("1", not bad, f"{len(checks) - len(bad)}/{len(checks)} bullets ({elapsed:.2f}s)"
           + (f" failing: {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 2. parameterized invariant


def test_c2_parameterized_invariant(kernel, user, env):
    t0 = time.perf_counter()
    res = run_parameterized(kernel, env, user)
    elapsed = time.perf_counter() - t0
    _EMITTED.append(("param fig1", res.invariant))
    ex = res.invariant.exit_state()
    sub = derive_subtyping(env, {"nb_threads": 2})
    seg_ptr = lambda v: isinstance(v, type(PointerTo("x"))) and v.role == "ptr" and \
        sub.leq(v.label, Label("Segment"))  # noqa: E731
    checks = {
        "cur: Thread*": ex.mem[0xA0] == PointerTo("Thread", 0),
        "ctx: Context*": isinstance(ex.mem[0xA1], type(PointerTo("x")))
        and sub.leq(ex.mem[0xA1].label, Label("Context")),
        "mpu1: Segment*": seg_ptr(ex.regs[10]),
        "mpu2: Segment*": seg_ptr(ex.regs[11]),
        "flags': Flags": ex.regs[9] == ScalarOf("Flags"),
        "example user image well-typed": res.base_case == [],
        "proved": res.verdict.ok,
    }
    data = bytearray(user.data)
    data[0xA6 - user.origin] = 0xAE
    bad_res = run_parameterized(kernel, env, dataclasses.replace(user, data=bytes(data)))
    viol = [(a.kind, a.point) for a in bad_res.base_case]
    checks["corrupted a6 -> one violation at a6"] = viol == [(AlarmKind.BaseCaseViolation, 0xA6)]
    checks["runtime < 5 s"] = elapsed < 5
    bad = [k for k, v in checks.items() if not v]
    record("2", not bad, f"{len(checks) - len(bad)}/{len(checks)} checks ({elapsed:.2f}s)"
           + (f" failing: {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 3. RQ0 seeded defects


def test_c3_rq0(user):
    caught = []
    for name, prop in sorted(corpus.RQ0_VARIANTS.items()):
        res = run_in_context(corpus.image(f"rq0/{name}"), user)
        _EMITTED.append((name, res.invariant))
        got = res.verdict.ape if prop == "ape" else res.verdict.arte
        caught.append((name, isinstance(got, NotProved)))
    missed = [n for n, ok in caught if not ok]
    record("3", not missed, f"{len(caught) - len(missed)}/7 variants NotProved on their property"
           + (f", falsely verified: {missed}" if missed else ""))


# ---------------------------------------------------------------------------
# 4. scalability shape


def _param_point(kernel, env, n):
    u = corpus.generate_user(n)
    res = run_parameterized(kernel, env, u)
    return res.timings["invariant"], res.invariant.serialize(), res.ok


def _incontext_time(kernel, n):
    u = corpus.generate_user(n)
    t0 = time.perf_counter()
    res = run_in_context(kernel, u)
    return time.perf_counter() - t0, res.ok


def test_c4a_scalability_feasible_range(kernel, env):
    """The measurable part of the sweep: N in {2, 16} (16 is the largest task count that fits)."""
    pts = {n: _param_point(kernel, env, n) for n in (2, 16)}
    times = [t for t, _, _ in pts.values()]
    same = len({s for _, s, _ in pts.values()}) == 1
    ratio = max(times) / min(times)
    inc = {n: _incontext_time(kernel, n) for n in (2, 16)}
    one = _incontext_time(kernel, 1)[1] and _param_point(kernel, env, 1)[2]
    ok = ratio < 2 and same and one and all(o for _, _, o in pts.values()) and all(o for _, o in inc.values())
    record("4a", ok, f"param invariant time ratio {ratio:.2f} over N=2,16, identical serialized invariant={same}; "
           f"N=1 proved in both modes={one}; in-context t(16)/t(2)={inc[16][0] / inc[2][0]:.2f}")


@pytest.mark.xfail(strict=True, reason="128 tasks of 5 bytes cannot be laid out in a 256-byte address space")
def test_c4_scalability_full(kernel, env):
    t0 = time.perf_counter()
    detail = []
    try:
        pts = {n: _param_point(kernel, env, n) for n in (2, 16, 128)}
        times = [t for t, _, _ in pts.values()]
        same = len({s for _, s, _ in pts.values()}) == 1
        inc = {n: _incontext_time(kernel, n)[0] for n in (16, 128)}
        ok = max(times) / min(times) < 2 and same and inc[128] / inc[16] > 8
        detail.append(f"param ratio {max(times) / min(times):.2f}, in-context ratio {inc[128] / inc[16]:.2f}")
    except ValueError as exc:
        ok = False
        detail.append(f"N=128 not constructible: {exc}")
    detail.append(f"({time.perf_counter() - t0:.1f}s)")
    record("4", ok, " ".join(detail))


# ---------------------------------------------------------------------------
# 5. soundness suite


def _rand_abs(rng):
    kind = rng.randrange(4)
    if kind == 0:
        return BitvecAbs.of(rng.sample(range(256), rng.randint(1, 32)))
    lo = rng.randrange(256)
    if kind == 1:
        return BitvecAbs.urange(lo, min(255, lo + rng.randrange(32)))
    if kind == 2:
        m = rng.choice((2, 4, 8, 16))
        return BitvecAbs.congruence(m, rng.randrange(m)).meet(BitvecAbs.urange(lo, min(255, lo + 63)))
    return BitvecAbs.const(lo)


def test_c5a_transfer_containment():
    rng = random.Random(5)
    ops = sorted(ALU_OPS)
    cases = violations = 0
    while cases < 10_000:
        a, b = _rand_abs(rng), _rand_abs(rng)
        if a.is_bottom or b.is_bottom:
            continue
        op = ops[cases % len(ops)]
        r = transfer_alu(op, a, b).value
        for x in a.values():
            for y in b.values():
                if op is Op.DIV and y == 0:
                    continue
                violations += alu(op, x, y) not in r
        cases += 1
    record("5a", violations == 0, f"{cases} randomized cases enumerated, {violations} violations")


def test_c5b_oracle_containment():
    runs = []
    k1, kb = corpus.image("kernel_fig1"), corpus.image("kernel_boot")
    fig3 = corpus.image("user_fig3")
    for k, u, n in ((k1, fig3, 400), (kb, fig3, 200), (k1, corpus.generate_user(4), 200),
                    (kb, corpus.generate_user(6, link=False), 200)):
        res = run_in_context(k, u)
        _EMITTED.append(("oracle corpus", res.invariant))
        assert res.ok
        runs.append((n, oracle_campaign(k, u, res.invariant, n, seed=len(runs))))
    total = sum(n for n, _ in runs)
    bad = [v for _, vs in runs for v in vs]
    record("5b", total >= 1000 and not bad, f"{total} random schedules, {len(bad)} violations"
           + (f": {bad[:3]}" if bad else ""))


def test_c5c_inductiveness():
    k = corpus.image("kernel_boot")
    env = load_annotations(corpus.path("boot.annot"))
    res = run_parameterized(k, env, corpus.generate_user(2, link=False), differentiated=True)
    items = list(_emitted()) + [("bootdiff param", res.invariant), ("bootdiff boot", res.boot)]
    bad = [(name, inv.self_check[:1]) for name, inv in items if inv.self_check]
    record("5c", len(items) >= 10 and not bad, f"{len(items)} invariants re-checked, {len(bad)} not inductive"
           + (f": {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# 6. type-system golden tests


def test_c6_type_golden(env, kernel, user):
    from test_shape import GOLDEN_EDGES
    from u8kverify.domains.shape import build_labeling
    from u8kverify.machine import load_images

    sub = derive_subtyping(env, {"nb_threads": 2})
    edges = transitive_reduction(sub.edges([Label("Thread[2]", k) for k in range(10)]))
    mem = load_images(kernel, user).mem
    lab, b, _ = build_labeling(env, mem)
    ctx = interpret(env, lab, "Context*", b)
    sep = check_separation(lab, derive_subtyping(env, b))
    pairs_ok = all(sub.comparable(x, y) for cs in lab.claims.values() for x in cs for y in cs)
    ok = edges == GOLDEN_EDGES and ctx == {0xA3, 0xA8} and not sep and pairs_ok
    record("6", ok, f"{len(edges)} edges (expected {len(GOLDEN_EDGES)}, equal={edges == GOLDEN_EDGES}); "
           f"[[Context_0*]]={{{', '.join(hex(v) for v in sorted(ctx))}}}; separation violations={len(sep)}")


# ---------------------------------------------------------------------------
# 7. annotation burden


def test_c7_annotation_burden(kernel, user, env):
    res = run_parameterized(kernel, env, user)
    ok = res.ok and env.manual_lines <= 20
    record("7", ok, f"{env.manual_lines} manual annotation lines beyond the interface types, verified={res.ok}")
