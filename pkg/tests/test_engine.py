import os

import pytest

from u8kverify import corpus
from u8kverify.alarms import AlarmKind
from u8kverify.asm import assemble
from u8kverify.domains.memory import AbsMemory
from u8kverify.domains.value import BitvecAbs
from u8kverify.engine import (
    AbstractState, Analyzer, BudgetExceeded, ProgramPoint, Summarize, Unroll, analyze,
    unroll_policy,
)
from u8kverify.machine import PRIVILEGED, Reg, load_images
from u8kverify.verify import oracle_campaign, run_in_context

C = BitvecAbs.const


def init_of(img, **cells):
    s = AbstractState.from_concrete(load_images(img))
    mem = dict(s.mem.cells)
    for k, v in cells.items():
        a = img.symbols[k]
        if v is None:
            mem.pop(a)
        else:
            mem[a] = v
    return AbstractState(s.regs, AbsMemory(mem))


def test_straight_line():
    img = assemble(".entry reset s\ns: load r0, 1\nadd r0, 2\nhalt")
    inv = analyze(img, init_of(img))
    assert sorted(p.addr for p in inv.states) == [0, 2, 4]
    assert inv.join_at(4).reg(Reg.R0) == C(3)
    assert inv.self_check == [] and inv.alarms == []


LOOP = """
.entry reset start
start: load r1, [n]
       load r0, 0
head:  add r0, 1
       cmp r0, r1
       jlt head
done:  halt
n:     .byte 5
"""


def test_known_bound_is_unrolled():
    img = assemble(LOOP)
    inv = analyze(img, init_of(img))
    heads = inv.at(img.symbols["head"])
    assert len(heads) == 5
    assert inv.join_at(img.symbols["done"]).reg(Reg.R0) == C(5)


def test_unknown_bound_is_summarized_and_stable():
    img = assemble(LOOP)
    inv = analyze(img, init_of(img, n=BitvecAbs.urange(1, 40)))
    summary = [s for p, s in inv.at(img.symbols["head"]) if p.unroll]
    assert len(summary) == 1
    r0 = summary[0].reg(Reg.R0)
    # the loop body runs with r0 in [1, n-1]: every such value is kept, nothing past 39
    assert all(v in r0 for v in range(1, 40))
    assert r0.uival[1] <= 39
    assert inv.narrowed and inv.self_check == []
    done = inv.join_at(img.symbols["done"]).reg(Reg.R0)
    assert all(v in done for v in range(1, 41))


def test_unroll_policy():
    h = ProgramPoint(4)
    assert unroll_policy(h, C(2)) == Unroll(2)
    assert unroll_policy(h, BitvecAbs.top()) == Summarize()
    assert unroll_policy(h, C(100)) == Summarize()


def test_recursion_is_an_alarm():
    img = assemble(".entry reset f\nf: call f\nret")
    inv = analyze(img, init_of(img))
    assert AlarmKind.RecursionOrDepth in {a.kind for a in inv.alarms}


def test_computed_jump_targets():
    src = """
    .entry reset s
    s:  load r1, [sel]
        jmp r1
    a:  halt
    b:  halt
    sel: .byte a
    """
    img = assemble(src)
    inv = analyze(img, init_of(img, sel=BitvecAbs.of([img.symbols["a"], img.symbols["b"]])))
    assert {img.symbols["a"], img.symbols["b"]} <= {p.addr for p in inv.states}
    inv = analyze(img, init_of(img, sel=None))
    assert {a.kind for a in inv.alarms} == {AlarmKind.UnresolvedJump}


def test_budget():
    img = assemble(LOOP)
    with pytest.raises(BudgetExceeded):
        analyze(img, init_of(img), budget=3)


def test_incontext_exit_state(incontext):
    ex = incontext.invariant.exit_state()
    m = ex.mem
    assert m[0xA0].vset == {0xA2, 0xA7}
    assert m[0xA1].vset == {0xA3, 0xA8}
    assert ex.reg(Reg.MPU1) == C(0xAE) and ex.reg(Reg.MPU2) == C(0xB0)
    for a in (0xA5, 0xAA):
        assert m[a] == BitvecAbs.urange(0, 0x7F)
    assert ex.reg(Reg.UFLAGS) == BitvecAbs.urange(0, 0x7F)
    untracked = set(range(0xC0, 0xD0)) | set(range(0xE0, 0xF0))
    assert not untracked & set(m.cells)


def test_empowered_step(kernel, incontext):
    an = Analyzer(kernel)
    ex = incontext.invariant.exit_state()
    after, why = an.empowered_step(ex)
    assert why is None
    gone = set(ex.mem.cells) - set(after.mem.cells)
    assert gone <= set(range(0xC0, 0xD0)) | set(range(0xE0, 0xF0))
    for a in range(kernel.origin, kernel.end):
        assert after.mem[a] == ex.mem[a]
    assert after.reg(Reg.UPC).is_top and after.reg(Reg.USP).is_top
    assert after.reg(Reg.FLAGS) == C(PRIVILEGED)

    t, why = an.empowered_step(ex.set_reg(Reg.UFLAGS, BitvecAbs.top()))
    assert why and not t.mem.cells
    t, why = an.empowered_step(ex.set_reg(Reg.MPU1, BitvecAbs.top()))
    assert why and not t.mem.cells


def test_inductive(incontext):
    assert incontext.invariant.self_check == []


def test_serialization_is_canonical(kernel, user, incontext):
    again = run_in_context(kernel, user)
    text = incontext.invariant.serialize()
    assert text == again.invariant.serialize()
    assert text.startswith("u8k-invariant v1\n")


@pytest.mark.parametrize("kname", ["kernel_fig1", "kernel_boot"])
@pytest.mark.parametrize("n", [1, 3])
def test_oracle_containment_generated(kname, n):
    k = corpus.image(kname)
    u = corpus.generate_user(n)
    res = run_in_context(k, u)
    assert res.ok
    seed = int(os.environ.get("U8K_SEED", "7"))
    assert oracle_campaign(k, u, res.invariant, 50, seed=seed) == []
