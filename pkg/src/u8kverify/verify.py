"""Property checkers and the verification pipelines.

ARTE holds when no runtime-error alarm survives on the invariant. APE needs
no property of its own: if user code could gain privilege, the empowered
step would havoc everything and no non-trivial invariant could exist.

``run_in_context`` analyses one kernel with one concrete user image.
``run_parameterized`` analyses the kernel once against every user image
satisfying the annotated types, then checks the concrete image (the base
case) either directly or, in boot-differentiated mode, against an
in-context analysis of the boot code.
"""
from __future__ import annotations

import random
import time
from operator import itemgetter
from dataclasses import dataclass, field

from .alarms import ARTE_KINDS, Alarm, AlarmKind
from .domains.memory import NUMERIC, AbsMemory
from .domains.shape import (
    Label, Labeling, PointerTo, ScalarOf, Subtyping, TypedLattice, TypedValue,
    build_labeling, check_separation, check_welltyped, interpret,
)
from .domains.typesys import SCALARS, TNamed, TPtr, TypeEnv
from .domains.value import BitvecAbs
from .engine import (
    DEFAULT_BUDGET, AbstractState, Analyzer, Invariant, ProgramPoint, _fetch,
)
from .machine import (
    FLAG_C, FLAG_Z, GPRS, KSTACK_BOTTOM, KSTACK_TOP, MEM_SIZE, PRIVILEGED, MachineImage, Op, Reg,
    DecodeError, decode, load_images, run_adversarial, segment_range,
)

TRIVIAL = "trivial-invariant"
PRIV_EXIT = "privileged-exit-unproven"

# registers that carry a fact of their own (FLAGS/SP/PC are forced by the hardware at entry)
WITNESS_REGS = (*GPRS, Reg.UPC, Reg.USP, Reg.UFLAGS, Reg.MPU1, Reg.MPU2)


@dataclass(frozen=True)
class Proved:
    def __str__(self):
        return "Proved"


@dataclass(frozen=True)
class NotProved:
    reason: str
    alarms: tuple = ()

    def __str__(self):
        return f"NotProved({self.reason})"


@dataclass(frozen=True)
class Verdict:
    ape: Proved | NotProved
    arte: Proved | NotProved
    invariant_trivial: bool

    @property
    def ok(self) -> bool:
        return isinstance(self.ape, Proved) and isinstance(self.arte, Proved)


@dataclass
class RunResult:
    verdict: Verdict
    invariant: Invariant
    base_case: list[Alarm] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    boot: Invariant | None = None
    labeling: Labeling | None = None

    @property
    def alarms(self) -> list[Alarm]:
        return list(self.invariant.alarms) + list(self.base_case)

    @property
    def ok(self) -> bool:
        return self.verdict.ok and not self.base_case


# ---------------------------------------------------------------------------
# properties


def check_arte(inv: Invariant) -> Proved | NotProved:
    bad = tuple(a for a in inv.alarms if a.kind in ARTE_KINDS)
    return NotProved("runtime-error alarms", bad) if bad else Proved()


def code_constant(inv: Invariant) -> bool:
    """Kernel code bytes hold their image value at every program point."""
    lo, hi = inv.code_range
    img = inv.kernel
    for s in inv.states.values():
        for a in range(lo, hi):
            v = s.mem.cells.get(a)
            if v is None or v != BitvecAbs.const(img.data[a - img.origin]):
                return False
    return True


def is_trivial(inv: Invariant) -> bool:
    """No kernel-code point constrains a register or cell below ⊤, or kernel code may change."""
    if not inv.states or not code_constant(inv):
        return True
    lat = inv.lattice
    lo, hi = inv.code_range
    for p, s in inv.states.items():
        if not lo <= p.addr < hi:
            continue
        if any(not lat.is_top(s.regs[r]) for r in WITNESS_REGS):
            return False
        if any(not (lo <= a < hi) for a in s.mem.cells):
            return False
    return True


def check_ape(inv: Invariant) -> Proved | NotProved:
    if inv.havoc_points:
        p, why = inv.havoc_points[0]
        return NotProved(PRIV_EXIT, tuple(Alarm(AlarmKind.PrivilegedExitUnproven, q, w)
                                          for q, w in inv.havoc_points))
    if is_trivial(inv):
        return NotProved(TRIVIAL)
    return Proved()


def verdict_of(inv: Invariant) -> Verdict:
    ape = check_ape(inv)
    return Verdict(ape, check_arte(inv), is_trivial(inv))


# ---------------------------------------------------------------------------
# in-context


def run_in_context(kernel: MachineImage, user: MachineImage | None,
                   budget: int = DEFAULT_BUDGET, **kw) -> RunResult:
    t0 = time.perf_counter()
    s0 = load_images(kernel, user)
    an = Analyzer(kernel, "incontext", budget=budget, **kw)
    inv = an.analyze([(ProgramPoint(kernel.entry_reset), AbstractState.from_concrete(s0))])
    t1 = time.perf_counter()
    return RunResult(verdict_of(inv), inv, timings={"invariant": t1 - t0, "total": t1 - t0})


# ---------------------------------------------------------------------------
# parameterized


def concrete_region_labels(env: TypeEnv) -> Labeling:
    """Labels of the regions placed at fixed addresses by the annotations."""
    lab = Labeling()
    for name, t, addr in env.regions:
        if addr is None:
            continue
        key = t.name if isinstance(t, TNamed) else t.key
        size = env.sizeof(key)
        if size is None:
            raise ValueError(f"region {name} at a fixed address needs a fixed size")
        for k in range(size):
            lab.labels[addr + k] = Label(key, k)
            lab.claims.setdefault(addr + k, []).append(Label(key, k))
    return lab


def typed_abstraction(env: TypeEnv, t):
    """Abstract value standing for every admissible value of type expression ``t``."""
    if isinstance(t, TPtr):
        target = t.target.name if isinstance(t.target, TNamed) else t.target.key
        return PointerTo(target, 0, t.nullable)
    key = t.name if isinstance(t, TNamed) else t.key
    if key in SCALARS:
        return BitvecAbs.top()
    body = env.expr(key)
    if isinstance(body, TPtr):
        return typed_abstraction(env, body)
    return ScalarOf(key, 0)


def _kernel_state(kernel: MachineImage, regs) -> AbstractState:
    return AbstractState(tuple(regs), AbsMemory.from_bytes(kernel.data, kernel.origin))


def _check_kla(env: TypeEnv, kernel: MachineImage) -> list[Alarm]:
    kla = env.params.get("kernel_last_addr")
    if kla is not None and kla < kernel.end:
        return [Alarm(AlarmKind.BaseCaseViolation, kla,
                      f"kernel_last_addr {kla:#04x} is below the kernel end {kernel.end:#04x}")]
    return []


def descriptor_labels(inv: Invariant) -> list[Label]:
    """Labels the MPU registers point to at kernel exits (the segment descriptor types)."""
    out = set()
    ex = inv.exit_state()
    if ex is not None:
        for r in (Reg.MPU1, Reg.MPU2):
            v = ex.regs[r]
            if isinstance(v, TypedValue) and v.role == "ptr":
                out.add(v.label)
    return sorted(out)


def check_base_memory(env: TypeEnv, mem, kernel: MachineImage, desc_labels: list[Label],
                      bindings: dict | None = None, unknown: set[int] = frozenset()):
    """Labeling, well-typedness and separation of a concrete memory; returns (labeling, bindings, alarms)."""
    alarms: list[Alarm] = []
    lab, bindings, problems = build_labeling(env, mem, bindings)
    sub = Subtyping(env, bindings)
    for p in problems:
        alarms.append(Alarm(AlarmKind.BaseCaseViolation, p.address, str(p)))
    for a in sorted(set(lab.labels) & set(unknown)):
        alarms.append(Alarm(AlarmKind.BaseCaseViolation, a, f"{a:#04x}: content not known at the boundary"))
    for v in check_welltyped(env, lab, mem, bindings, sub):
        alarms.append(Alarm(AlarmKind.BaseCaseViolation, v.address, str(v)))
    for a, x, y in check_separation(lab, sub):
        alarms.append(Alarm(AlarmKind.BaseCaseViolation, a, f"{a:#04x}: {x} and {y} alias"))
    for a in sorted(lab.labels):
        if any(sub.leq(lab[a], d) for d in desc_labels):
            seg = segment_range(mem, a)
            hit = [b for b in seg if b in lab.labels or kernel.origin <= b < kernel.end]
            if hit:
                alarms.append(Alarm(AlarmKind.BaseCaseViolation, a,
                                    f"{a:#04x}: segment [{seg.start:#04x},{seg.stop:#04x}) "
                                    f"overlaps protected byte {hit[0]:#04x}"))
    return lab, bindings, alarms


def implication_check(concrete: AbstractState, param: AbstractState, env: TypeEnv,
                      lab: Labeling, bindings: dict | None = None) -> list[tuple[str, str]]:
    """Locations where the concrete state is not contained in the parameterized one."""
    bindings = dict(bindings or {})
    sub = Subtyping(env, {**{n: v for n, v in env.params.items() if v is not None}, **bindings})
    out = []

    def allowed(p):
        if isinstance(p, BitvecAbs):
            return p
        if p.role == "ptr":
            vals = set(lab.addresses_below(sub, Label(sub.resolve(p.tname), p.offset)))
            if p.nullable:
                vals.add(0)
            return BitvecAbs.of(vals)
        return BitvecAbs.of(interpret(env, lab, Label(sub.resolve(p.tname), p.offset), bindings, sub))

    def check(where, c, p):
        if isinstance(p, BitvecAbs) and p.is_top:
            return
        c = c if isinstance(c, BitvecAbs) else BitvecAbs.top()
        ok_set = allowed(p)
        if not c.leq(ok_set):
            out.append((where, f"{where}: {c} not within {p}"))

    for r in Reg:
        if r is Reg.PC:
            continue
        check(r.name, concrete.regs[r], param.regs[r])
    for a in sorted(param.mem.cells):
        check(f"[{a:#04x}]", concrete.mem[a], param.mem.cells[a])
    return out


def _param_lattice(env: TypeEnv) -> TypedLattice:
    return TypedLattice(env, concrete=concrete_region_labels(env))


def compute_parameterized(kernel: MachineImage, env: TypeEnv, budget: int = DEFAULT_BUDGET,
                          exitpoint: int | None = None, **kw) -> Invariant:
    """Step 2: the parameterized invariant Ī, independent of any user image."""
    lat = _param_lattice(env)
    an = Analyzer(kernel, "param", lat, budget=budget, **kw)
    if exitpoint is None:
        regs = [BitvecAbs.const(0)] * len(Reg)
        regs[Reg.PC] = BitvecAbs.const(kernel.entry_reset)
        regs[Reg.FLAGS] = BitvecAbs.const(PRIVILEGED)
        regs[Reg.SP] = BitvecAbs.const(KSTACK_TOP)
        return an.analyze([(ProgramPoint(kernel.entry_reset), _kernel_state(kernel, regs))])
    return an.analyze([(ProgramPoint(exitpoint), boundary_state(kernel, env, exitpoint))])


def boundary_state(kernel: MachineImage, env: TypeEnv, exitpoint: int) -> AbstractState:
    """Parameterized state at the boot/runtime boundary, built from the annotations."""
    regs = [BitvecAbs.top()] * len(Reg)
    regs[Reg.PC] = BitvecAbs.const(exitpoint)
    regs[Reg.FLAGS] = BitvecAbs.of(PRIVILEGED | bits for bits in range((FLAG_Z | FLAG_C) + 1))
    regs[Reg.SP] = BitvecAbs.const(KSTACK_TOP)
    for name, t in env.registers:
        regs[Reg[name]] = typed_abstraction(env, t)
    s = _kernel_state(kernel, regs)
    cells = dict(s.mem.cells)
    for a in range(KSTACK_BOTTOM, KSTACK_TOP + 1):
        cells.pop(a, None)
    for _, t, addr in env.globals:
        v = typed_abstraction(env, t)
        if isinstance(v, BitvecAbs) and v.is_top:
            cells.pop(addr, None)
        else:
            cells[addr] = v
    return AbstractState(s.regs, AbsMemory(cells))


def run_parameterized(kernel: MachineImage, env: TypeEnv, user: MachineImage | None = None,
                      budget: int = DEFAULT_BUDGET, differentiated: bool = False,
                      exitpoint: int | None = None, **kw) -> RunResult:
    timings = {}
    t0 = time.perf_counter()
    ep = exitpoint if exitpoint is not None else env.exitpoint
    if differentiated and ep is None:
        raise ValueError("boot-differentiated mode needs an exit point")
    inv = compute_parameterized(kernel, env, budget, ep if differentiated else None, **kw)
    t1 = time.perf_counter()
    timings["invariant"] = t1 - t0
    base: list[Alarm] = _check_kla(env, kernel)
    lab = None
    boot = None
    descs = descriptor_labels(inv)
    if user is not None and not differentiated:
        s0 = load_images(kernel, user)
        lab, _, al = check_base_memory(env, s0.mem, kernel, descs)
        base.extend(al)
    elif differentiated:
        s0 = load_images(kernel, user)
        an = Analyzer(kernel, "incontext", budget=budget, stop_at={ep}, **kw)
        boot = an.analyze([(ProgramPoint(kernel.entry_reset), AbstractState.from_concrete(s0))])
        at_exit = boot.join_at(ep)
        if at_exit is None:
            base.append(Alarm(AlarmKind.BaseCaseViolation, ep, f"boot never reaches {ep:#04x}"))
        else:
            mem, unknown = [], set()
            for a in range(MEM_SIZE):
                v = at_exit.mem[a].singleton
                if v is None:
                    unknown.add(a)
                mem.append(0 if v is None else v)
            lab, bindings, al = check_base_memory(env, mem, kernel, descs, unknown=unknown)
            base.extend(al)
            param_state = inv.join_at(ep)
            for where, detail in implication_check(at_exit, param_state, env, lab, bindings):
                base.append(Alarm(AlarmKind.BaseCaseViolation, where, detail))
        for a in boot.alarms:
            base.append(Alarm(a.kind, a.point, "boot: " + a.detail))
    t2 = time.perf_counter()
    timings["base_case"] = t2 - t1
    timings["total"] = t2 - t0
    return RunResult(verdict_of(inv), inv, base, timings, boot, lab)


# ---------------------------------------------------------------------------
# concrete oracle


class _PointCheck:
    """Membership test for one abstract state, split into exact and set-valued cells."""

    def __init__(self, st: AbstractState, lat):
        self.state, self.lat = st, lat
        exact, loose = [], []
        for a, v in st.mem.cells.items():
            num = lat.numeric(v)
            (exact if num.singleton is not None else loose).append((a, num))
        self.exact_get = itemgetter(*[a for a, _ in exact]) if len(exact) > 1 else None
        self.exact_val = tuple(v.singleton for _, v in exact)
        self.exact = exact
        self.loose = loose
        self.regs = [(r, lat.numeric(st.regs[r])) for r in Reg if r is not Reg.PC]

    def ok(self, s) -> bool:
        if self.exact_get is not None:
            if self.exact_get(s.mem) != self.exact_val:
                return False
        elif self.exact and s.mem[self.exact[0][0]] != self.exact_val[0]:
            return False
        return all(s.mem[a] in v for a, v in self.loose) and \
            all(s.regs[r] in v for r, v in self.regs)


def _checks_by_point(inv: Invariant) -> dict[tuple[int, tuple], _PointCheck]:
    """One check per (address, call string); loop-unrolling indices are merged."""
    joined: dict[tuple[int, tuple], AbstractState] = {}
    for p, st in inv.states.items():
        k = (p.addr, p.context)
        joined[k] = st if k not in joined else joined[k].join(st, inv.lattice)
    return {k: _PointCheck(st, inv.lattice) for k, st in joined.items()}


def oracle_violations(inv: Invariant, trace, checks=None) -> list[str]:
    """Kernel-mode states of ``trace`` that escape the invariant.

    The concrete call string is replayed alongside the trace so each state is
    compared with the program point of the same address and calling context.
    """
    lo, hi = inv.code_range
    checks = _checks_by_point(inv) if checks is None else checks
    out = []
    ctx: tuple = ()
    prev = None
    for i, s in enumerate(trace):
        if prev is None or not prev.privileged or prev.fault is not None:
            ctx = ()
        else:
            try:
                ins = decode(prev.mem[prev.pc:prev.pc + 2], prev.pc)
            except DecodeError:
                ins = None
            psp, sp = prev.regs[Reg.SP], s.regs[Reg.SP]
            # an interrupt (e.g. RESET) can follow any state; only a real step moves the stack
            if ins is not None and ins.op is Op.CALL and s.pc == ins.imm and sp == (psp - 1) & 0xFF:
                ctx = ctx + (prev.pc,)
            elif ins is not None and ins.op is Op.RET and sp == (psp + 1) & 0xFF:
                ctx = ctx[:-1]
            elif s.pc in s.entries and sp == KSTACK_TOP and s.pc != (prev.pc + 2) & 0xFF:
                ctx = ()
        prev = s
        if s.fault is not None or not s.privileged or not lo <= s.pc < hi:
            continue
        chk = checks.get((s.pc, ctx))
        where = f"step {i}: pc {s.pc:#04x}" + (f" from {','.join(f'{c:#04x}' for c in ctx)}" if ctx else "")
        if chk is None:
            out.append(f"{where} not reached by the analysis")
        elif not chk.ok(s):
            bad = chk.state.contains(s, inv.lattice)
            out.append(f"{where} escapes at {', '.join(bad[:4])}")
    return out


def oracle_campaign(kernel: MachineImage, user: MachineImage | None, inv: Invariant,
                    runs: int, seed: int = 0, events: int = 20) -> list[str]:
    """Random adversarial schedules; returns every containment violation found."""
    rng = random.Random(seed)
    s0 = load_images(kernel, user)
    checks = _checks_by_point(inv)
    out = []
    for r in range(runs):
        trace = run_adversarial(s0, rng, events=events)
        out.extend(f"run {r} {v}" for v in oracle_violations(inv, trace, checks))
    return out
