"""Abstract-interpretation fixpoint engine over the privileged kernel code.

The engine recovers the control-flow graph while propagating abstract
states: computed jumps are resolved from the current value abstraction.
Calls are inlined (call-string contexts), loops are unrolled while a bound
is known and summarised with widening otherwise. Each ``iret`` is followed
by the empowered user step, whose result is joined into the syscall and
timer entries, so the fixpoint covers the whole system loop.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from typing import Iterable

from .alarms import Alarm, AlarmKind
from .domains import memory as amem
from .domains.memory import NUMERIC, AbsMemory
from .domains.shape import TypedLattice, TypedValue, typed_load, typed_store
from .domains.value import (
    BitvecAbs, narrow, refine_eq, refine_ge, refine_lt, refine_ne, transfer_alu,
)
from .machine import (
    ALU_OPS, COND_OPS, FLAG_C, FLAG_Z, GPRS, KSTACK_BOTTOM, KSTACK_TOP, MEM_SIZE,
    PRIVILEGED, SEG_LIMIT_MASK, SEG_READONLY, UREG_SELECT, ConcreteState, DecodeError,
    MachineImage, Op, Reg, decode,
)

MAX_CALL_DEPTH = 32
UNROLL_CAP = 64
WIDEN_DELAY = 3
DEFAULT_BUDGET = 1_000_000
SUMMARY = -1

TOP = BitvecAbs.top()
BOT = BitvecAbs.bottom()


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ProgramPoint:
    addr: int
    context: tuple[int, ...] = ()
    # active loops: (head, end, call depth, iteration or SUMMARY)
    unroll: tuple[tuple[int, int, int, int], ...] = ()

    def __str__(self):
        s = f"{self.addr:#04x}"
        if self.context:
            s += "@[" + ",".join(f"{c:#04x}" for c in self.context) + "]"
        for head, _, _, k in self.unroll:
            s += f"{{{head:#04x}:" + ("*" if k == SUMMARY else str(k)) + "}"
        return s


@dataclass(frozen=True)
class AbstractState:
    regs: tuple
    mem: AbsMemory
    # last comparison still valid for refinement: (ra, rb or None, imm or None)
    cmp: tuple | None = None

    def reg(self, r: Reg):
        return self.regs[r]

    def set_reg(self, r: Reg, v) -> "AbstractState":
        regs = list(self.regs)
        regs[r] = v
        cmp = self.cmp
        if cmp is not None and (r == cmp[0] or r == cmp[1]):
            cmp = None
        return AbstractState(tuple(regs), self.mem, cmp)

    @property
    def is_bottom(self) -> bool:
        return any(isinstance(v, BitvecAbs) and v.is_bottom for v in self.regs)

    def join(self, other: "AbstractState", lat) -> "AbstractState":
        regs = tuple(lat.join(a, b) for a, b in zip(self.regs, other.regs))
        return AbstractState(regs, self.mem.join(other.mem, lat),
                             self.cmp if self.cmp == other.cmp else None)

    def widen(self, other: "AbstractState", lat) -> "AbstractState":
        regs = tuple(lat.widen(a, b) for a, b in zip(self.regs, other.regs))
        return AbstractState(regs, self.mem.widen(other.mem, lat),
                             self.cmp if self.cmp == other.cmp else None)

    def leq(self, other: "AbstractState", lat) -> bool:
        if other.cmp is not None and self.cmp != other.cmp:
            return False
        return all(lat.leq(a, b) for a, b in zip(self.regs, other.regs)) and \
            self.mem.leq(other.mem, lat)

    @classmethod
    def from_concrete(cls, s: ConcreteState) -> "AbstractState":
        return cls(tuple(BitvecAbs.const(v) for v in s.regs), AbsMemory.from_bytes(s.mem))

    def contains(self, s: ConcreteState, lat=NUMERIC, regs: Iterable[Reg] | None = None) -> list[str]:
        """Locations where concrete ``s`` escapes this state (numeric reading)."""
        bad = []
        for r in (regs if regs is not None else Reg):
            if r is Reg.PC:
                continue
            if s.regs[r] not in lat.numeric(self.regs[r]):
                bad.append(r.name)
        for a, v in self.mem.cells.items():
            if s.mem[a] not in lat.numeric(v):
                bad.append(f"[{a:#04x}]")
        return bad


def _str_value(v) -> str:
    return str(v)


def serialize_state(s: AbstractState, lat) -> list[str]:
    out = []
    for r in Reg:
        if r is Reg.PC:
            continue
        v = s.regs[r]
        if not lat.is_top(v):
            out.append(f"  {r.name} = {_str_value(v)}")
    for a in sorted(s.mem.cells):
        out.append(f"  [{a:#04x}] = {_str_value(s.mem.cells[a])}")
    return out


@dataclass
class Invariant:
    states: dict[ProgramPoint, AbstractState]
    cfg: set[tuple[ProgramPoint, ProgramPoint]]
    alarms: list[Alarm]
    lattice: object
    kernel: MachineImage
    code_range: tuple[int, int]
    havoc_points: list[tuple[ProgramPoint, str]] = field(default_factory=list)
    iterations: int = 0
    self_check: list[str] = field(default_factory=list)
    narrowed: bool = False

    def at(self, addr: int) -> list[tuple[ProgramPoint, AbstractState]]:
        return [(p, s) for p, s in sorted(self.states.items()) if p.addr == addr]

    def join_at(self, addr: int) -> AbstractState | None:
        out = None
        for _, s in self.at(addr):
            out = s if out is None else out.join(s, self.lattice)
        return out

    def exit_points(self) -> list[ProgramPoint]:
        out = []
        for p in sorted(self.states):
            ins = _fetch(self.states[p], p.addr)
            if not isinstance(ins, str) and ins.op is Op.IRET:
                out.append(p)
        return out

    def exit_state(self) -> AbstractState | None:
        out = None
        for p in self.exit_points():
            s = self.states[p]
            out = s if out is None else out.join(s, self.lattice)
        return out

    def serialize(self) -> str:
        lines = ["u8k-invariant v1"]
        for p in sorted(self.states):
            lines.append(f"point {p}")
            lines.extend(serialize_state(self.states[p], self.lattice))
        for a in sorted(self.alarms, key=str):
            lines.append(f"alarm {a}")
        return "\n".join(lines) + "\n"


def _fetch(s: AbstractState, addr: int):
    """Decoded instruction at ``addr``, or a reason string when it cannot be fetched."""
    if addr + 1 >= MEM_SIZE:
        return "instruction runs past the end of memory"
    b0, b1 = s.mem[addr].singleton, s.mem[addr + 1].singleton
    if b0 is None or b1 is None:
        return "instruction bytes are not constant"
    try:
        return decode(bytes((b0, b1)), addr)
    except DecodeError as exc:
        return f"undecodable: {exc}"


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class Unroll:
    k: int


@dataclass(frozen=True)
class Summarize:
    pass


def unroll_policy(loop_head, bound: BitvecAbs, cap: int = UNROLL_CAP):
    """Unroll(k) iff the bound is a known constant k <= cap, else Summarize."""
    k = bound.singleton if isinstance(bound, BitvecAbs) else None
    if k is not None and k <= cap:
        return Unroll(k)
    return Summarize()


# ---------------------------------------------------------------------------
# the analyzer


class Analyzer:
    """One analysis run. ``mode`` is ``"incontext"`` or ``"param"``."""

    def __init__(self, kernel: MachineImage, mode: str = "incontext",
                 lattice=None, *, budget: int = DEFAULT_BUDGET,
                 weak_cap: int = amem.WEAK_UPDATE_CAP, unroll_cap: int = UNROLL_CAP,
                 entries: tuple[int, int] | None = None, stop_at: Iterable[int] = ()):
        self.kernel = kernel
        self.stop_at = frozenset(stop_at)
        self.mode = mode
        self.lat = lattice if lattice is not None else NUMERIC
        self.budget = budget
        self.weak_cap = weak_cap
        self.unroll_cap = unroll_cap
        code_end = kernel.symbols.get("code_end", min(KSTACK_BOTTOM, kernel.end))
        self.code_range = (kernel.origin, code_end)
        self.code_cells = range(*self.code_range)
        self.kernel_range = (kernel.origin, kernel.end)
        if entries is None:
            entries = (
                kernel.entry_syscall if kernel.entry_syscall is not None else kernel.entry_reset,
                kernel.entry_timer if kernel.entry_timer is not None else kernel.entry_reset,
            )
        self.entries = entries
        if mode == "param":
            self.tracked = lambda a: self.kernel_range[0] <= a < self.kernel_range[1]
            self.typed_at = self.lat.concrete.get if isinstance(self.lat, TypedLattice) else (lambda a: None)
        else:
            self.tracked = lambda a: True
            self.typed_at = lambda a: None

    # -- numeric views
    def num(self, v) -> BitvecAbs:
        return self.lat.numeric(v)

    # -- memory
    def load(self, s: AbstractState, addr, alarms: list):
        if isinstance(addr, TypedValue):
            if addr.role == "ptr":
                v, al = typed_load(self.lat, addr)
                alarms.extend(al)
                return v
            addr = self.num(addr)
        if addr.is_bottom:
            return BOT
        if addr.is_top:
            alarms.append((AlarmKind.WildLoad, "load through an unconstrained address"))
            return self.lat.top
        if self.mode != "param":
            return amem.load(s.mem, addr, self.lat)
        out = None
        for a in addr.values():
            if self.tracked(a):
                v = s.mem[a] if a in s.mem.cells else self.lat.top
            else:
                lab = self.typed_at(a)
                v = self.lat.content(lab) if lab is not None else self.lat.top
            out = v if out is None else self.lat.join(out, v)
            if self.lat.is_top(out):
                break
        return out

    def store(self, s: AbstractState, addr, v, alarms: list) -> AbsMemory:
        if isinstance(addr, TypedValue):
            if addr.role == "ptr":
                alarms.extend(typed_store(self.lat, addr, v))
                return s.mem
            addr = self.num(addr)
        if addr.is_bottom:
            return s.mem
        if self.mode != "param":
            mem, al = amem.store(s.mem, addr, v, self.lat, cap=self.weak_cap,
                                 code_cells=self.code_cells)
            alarms.extend(al)
            return mem
        if addr.is_top:
            alarms.append((AlarmKind.WildStore, "store through an unconstrained address"))
            return AbsMemory({})
        cands = addr.values()
        kern = [a for a in cands if self.tracked(a)]
        code_hit = [a for a in kern if a in self.code_cells]
        if code_hit:
            alarms.append((AlarmKind.SelfModification,
                           "store may hit kernel code at " + ",".join(f"{a:#04x}" for a in code_hit[:8])))
        for a in cands:
            if self.tracked(a):
                continue
            lab = self.typed_at(a)
            if lab is None:
                alarms.append((AlarmKind.TypingViolationStore,
                               f"store to {a:#04x}, user memory of unknown type"))
            elif not self.lat.admits(lab, v):
                alarms.append((AlarmKind.TypingViolationStore,
                               f"storing {v} at {lab} may break well-typedness"))
        if not kern:
            return s.mem
        if len(cands) == 1:
            return s.mem.set(kern[0], v, self.lat)
        cells = dict(s.mem.cells)
        for a in kern:
            if a in cells:
                if len(kern) > self.weak_cap:
                    del cells[a]
                    continue
                nv = self.lat.join(cells[a], v)
                if self.lat.is_top(nv):
                    del cells[a]
                else:
                    cells[a] = nv
        return AbsMemory(cells)

    # -- points
    def _point(self, cur: ProgramPoint, target: int, context: tuple[int, ...],
               back_bound=None) -> ProgramPoint:
        depth = len(context)
        loops = []
        for e in cur.unroll:
            head, end, d, k = e
            if d > depth:
                continue
            if d == depth and not head <= target <= end:
                continue
            loops.append(e)
        if back_bound is not None:
            idx = next((i for i, e in enumerate(loops) if e[0] == target and e[2] == depth), None)
            if idx is None:
                policy = unroll_policy(target, back_bound, self.unroll_cap) \
                    if isinstance(back_bound, BitvecAbs) else Unroll(self.unroll_cap)
                k = 1 if isinstance(policy, Unroll) else SUMMARY
                loops.append((target, cur.addr, depth, k))
            else:
                head, end, d, k = loops[idx]
                if k != SUMMARY:
                    k = k + 1 if k + 1 < self.unroll_cap else SUMMARY
                loops[idx] = (head, max(end, cur.addr), d, k)
        return ProgramPoint(target, context, tuple(loops))

    def _jump(self, p: ProgramPoint, s: AbstractState, target: int, bound=None):
        back = target <= p.addr
        b = (bound if bound is not None else True) if back else None
        return self._point(p, target, p.context, b), s

    # -- empowered user step
    def _total_havoc(self, s: AbstractState) -> AbstractState:
        regs = [self.lat.top] * len(Reg)
        regs[Reg.FLAGS] = BitvecAbs.const(PRIVILEGED)
        regs[Reg.SP] = BitvecAbs.const(KSTACK_TOP)
        return AbstractState(tuple(regs), AbsMemory({}))

    def _segment(self, s: AbstractState, desc) -> list[tuple[int, int]] | None:
        """Writable ranges granted by the descriptor(s) ``desc`` may point to."""
        if isinstance(desc, TypedValue):
            if desc.role != "ptr" or desc.nullable:
                return None
            base = self.num(self.lat.content(desc.label))
            nxt = self.lat.offset_by(desc, 1)
            sr = self.num(self.lat.content(nxt.label)) if nxt is not None else TOP
            pairs = [(base, sr)]
        else:
            if desc.is_top or len(desc) > self.weak_cap:
                return None
            pairs = []
            for d in desc.values():
                junk = []
                pairs.append((self.num(self.load(s, BitvecAbs.const(d), junk)),
                              self.num(self.load(s, BitvecAbs.const((d + 1) & 0xFF), junk))))
        out = []
        for base, sr in pairs:
            if base.is_bottom or sr.is_bottom:
                continue
            writable = [v for v in sr.values() if not v & SEG_READONLY]
            if not writable:
                continue
            limit = max(v & SEG_LIMIT_MASK for v in writable)
            if len(base) * len(writable) <= 256:
                for b in base.values():
                    for v in writable:
                        out.append((b, min(MEM_SIZE, b + (v & SEG_LIMIT_MASK) + 1)))
            else:
                lo, hi = base.uival
                out.append((lo, min(MEM_SIZE, hi + limit + 1)))
        return out

    def empowered_step(self, s: AbstractState) -> tuple[AbstractState, str | None]:
        """State at the kernel entries after arbitrary user execution following an ``iret``.

        Returns the entry state and, when everything had to be havocked, the reason.
        """
        uflags = self.num(s.regs[Reg.UFLAGS])
        if any(v & PRIVILEGED for v in uflags.values()):
            return self._total_havoc(s), "user flags may carry the privilege bit"
        ranges = []
        for r in (Reg.MPU1, Reg.MPU2):
            seg = self._segment(s, s.regs[r])
            if seg is None:
                return self._total_havoc(s), f"segment of {r.name} is unknown"
            ranges.extend(seg)
        mem = amem.havoc_range(s.mem, ranges)
        regs = list(s.regs)
        for r in (*GPRS, Reg.UPC, Reg.USP):
            regs[r] = self.lat.top
        regs[Reg.UFLAGS] = BitvecAbs.urange(0, PRIVILEGED - 1)
        regs[Reg.FLAGS] = BitvecAbs.const(PRIVILEGED)
        regs[Reg.SP] = BitvecAbs.const(KSTACK_TOP)
        regs[Reg.PC] = TOP
        return AbstractState(tuple(regs), mem), None

    def _to_entries(self, s: AbstractState):
        return [(ProgramPoint(e), s.set_reg(Reg.PC, BitvecAbs.const(e))) for e in sorted(set(self.entries))]

    # -- transfer
    def transfer(self, p: ProgramPoint, s: AbstractState):
        """Successors of ``(p, s)``; returns ``(succs, alarms, havoc_reason)``."""
        alarms: list = []
        succs: list = []
        havoc = None

        def escape(reason: str):
            nonlocal havoc
            havoc = reason
            succs.extend(self._to_entries(self._total_havoc(s)))

        if p.addr in self.stop_at:
            return succs, alarms, havoc
        lo, hi = self.kernel_range
        if not lo <= p.addr < hi:
            escape(f"privileged execution outside the kernel at {p.addr:#04x}")
            return succs, alarms, havoc
        ins = _fetch(s, p.addr)
        if isinstance(ins, str):
            kind = AlarmKind.IllegalOpcodeSite if ins.startswith("undecodable") else AlarmKind.UnresolvedJump
            alarms.append((kind, ins))
            return succs, alarms, havoc
        op, ra = ins.op, ins.ra
        nxt = p.addr + 2
        s = s.set_reg(Reg.PC, BitvecAbs.const(p.addr))

        def fall(st):
            if nxt >= MEM_SIZE:
                alarms.append((AlarmKind.IllegalOpcodeSite, "falls off the end of memory"))
                return
            succs.append((self._point(p, nxt, p.context), st))

        if op is Op.HALT:
            pass
        elif op is Op.LOAD_IMM:
            fall(s.set_reg(Reg(ra), BitvecAbs.const(ins.imm)))
        elif op in (Op.LOAD_DIR, Op.LOAD_IND):
            addr = BitvecAbs.const(ins.imm) if op is Op.LOAD_DIR else s.regs[ins.rb]
            v = self.load(s, addr, alarms)
            fall(s.set_reg(Reg(ra), v))
        elif op in (Op.STORE_DIR, Op.STORE_IND):
            addr = BitvecAbs.const(ins.imm) if op is Op.STORE_DIR else s.regs[ins.rb]
            mem = self.store(s, addr, s.regs[ra], alarms)
            if mem is not s.mem and not mem.cells and s.mem.cells:
                s = AbstractState(s.regs, mem, s.cmp)
            else:
                s = AbstractState(s.regs, mem, s.cmp)
            fall(s)
        elif op is Op.MOV:
            fall(s.set_reg(Reg(ra), s.regs[ins.rb]))
        elif op in ALU_OPS:
            fall(self._alu(s, ins, alarms))
        elif op is Op.JMP_ABS:
            succs.append(self._jump(p, s, ins.imm))
        elif op is Op.JMP_IND:
            t = s.regs[ra]
            tv = self.num(t)
            if isinstance(t, TypedValue) or tv.is_top or len(tv) > UNROLL_CAP:
                alarms.append((AlarmKind.UnresolvedJump, f"computed jump target {t} is not resolved"))
                escape("unresolved privileged jump")
            else:
                for target in tv.values():
                    succs.append(self._jump(p, s.set_reg(Reg(ra), BitvecAbs.const(target)), target))
        elif op in COND_OPS:
            self._branch(p, s, ins, succs, fall)
        elif op is Op.CALL:
            self._call(p, s, ins, succs, alarms)
        elif op is Op.RET:
            self._ret(p, s, succs, alarms)
        elif op is Op.IRET:
            entry, reason = self.empowered_step(s)
            if reason is not None:
                havoc = reason
            succs.extend(self._to_entries(entry))
        elif op is Op.SYSCALL:
            alarms.append((AlarmKind.IllegalOpcodeSite, "syscall executed in privileged mode faults"))
        elif op is Op.WRMPU1:
            fall(s.set_reg(Reg.MPU1, s.regs[ra]))
        elif op is Op.WRMPU2:
            fall(s.set_reg(Reg.MPU2, s.regs[ra]))
        elif op is Op.WRUFLAGS:
            fall(s.set_reg(Reg.UFLAGS, s.regs[ra]))
        elif op is Op.RDUREG:
            fall(s.set_reg(Reg(ra), s.regs[UREG_SELECT[ins.imm]]))
        elif op is Op.WRUREG:
            fall(s.set_reg(UREG_SELECT[ins.imm], s.regs[ra]))
        return [(q, st) for q, st in succs if not st.is_bottom], alarms, havoc

    def _operand(self, s: AbstractState, ins):
        return BitvecAbs.const(ins.imm) if ins.imm is not None else s.regs[ins.rb]

    def _alu(self, s: AbstractState, ins, alarms: list) -> AbstractState:
        op, ra = ins.op, Reg(ins.ra)
        a, b = s.regs[ra], self._operand(s, ins)
        if op is Op.CMP:
            res = transfer_alu(op, self.num(a), self.num(b)).value
            flags = self.num(s.regs[Reg.FLAGS])
            if flags.is_top or len(flags) * len(res) > 256:
                nf = TOP
            else:
                nf = BitvecAbs.of({(f & ~(FLAG_Z | FLAG_C)) | r for f in flags.values() for r in res.values()})
            s = s.set_reg(Reg.FLAGS, nf)
            rb = Reg(ins.rb) if ins.imm is None else None
            return AbstractState(s.regs, s.mem, (ra, rb, ins.imm))
        if isinstance(a, TypedValue) and a.role == "ptr" and op in (Op.ADD, Op.SUB):
            c = self.num(b).singleton
            if c is not None:
                delta = c if op is Op.ADD else -c
                if delta > 127:
                    delta -= 256
                res = self.lat.offset_by(a, delta)
                return s.set_reg(ra, res if res is not None else self.lat.top)
        r = transfer_alu(op, self.num(a), self.num(b))
        if r.maybe_div_zero:
            alarms.append((AlarmKind.MaybeDivZero, f"divisor {b} may be zero"))
        return s.set_reg(ra, r.value)

    def _branch(self, p, s: AbstractState, ins, succs, fall):
        flags = self.num(s.regs[Reg.FLAGS])
        op = ins.op
        bit = FLAG_Z if op in (Op.JEQ, Op.JNE) else FLAG_C
        taken_if_set = op in (Op.JEQ, Op.JLT)
        for taken in (True, False):
            want_set = taken == taken_if_set
            fl = BitvecAbs.of(f for f in flags.values() if bool(f & bit) == want_set)
            if fl.is_bottom:
                continue
            st = self._refine(s.set_reg(Reg.FLAGS, fl) if s.cmp is None else
                              AbstractState(_with(s.regs, Reg.FLAGS, fl), s.mem, s.cmp),
                              op, taken)
            if st is None:
                continue
            if taken:
                bound = None
                if st.cmp is not None:
                    bound = self.num(BitvecAbs.const(st.cmp[2]) if st.cmp[1] is None else s.regs[st.cmp[1]])
                succs.append(self._jump(p, st, ins.imm, bound))
            else:
                fall(st)

    def _refine(self, s: AbstractState, op: Op, taken: bool) -> AbstractState | None:
        if s.cmp is None:
            return s
        ra, rb, imm = s.cmp
        a = s.regs[ra]
        b = BitvecAbs.const(imm) if rb is None else s.regs[rb]
        kind = {Op.JEQ: "eq", Op.JNE: "ne", Op.JLT: "lt", Op.JGE: "ge"}[op]
        if not taken:
            kind = {"eq": "ne", "ne": "eq", "lt": "ge", "ge": "lt"}[kind]
        if isinstance(a, TypedValue) or isinstance(b, TypedValue):
            if isinstance(a, TypedValue) and a.role == "ptr" and isinstance(b, BitvecAbs) \
                    and b.singleton == 0 and kind in ("eq", "ne"):
                if kind == "eq":
                    if not a.nullable:
                        return None
                    a2 = BitvecAbs.const(0)
                else:
                    a2 = replace(a, nullable=False)
                return AbstractState(_with(s.regs, ra, a2), s.mem, s.cmp)
            return s
        fn = {"eq": refine_eq, "ne": refine_ne, "lt": refine_lt, "ge": refine_ge}[kind]
        a2, b2 = fn(a, b)
        if a2.is_bottom or b2.is_bottom:
            return None
        regs = _with(s.regs, ra, a2)
        if rb is not None:
            regs = _with(regs, rb, b2)
        return AbstractState(regs, s.mem, s.cmp)

    def _call(self, p, s: AbstractState, ins, succs, alarms):
        sp = self.num(s.regs[Reg.SP]).singleton
        if sp is None:
            alarms.append((AlarmKind.WildStore, "call with an unknown stack pointer"))
            return
        if p.addr in p.context or len(p.context) >= MAX_CALL_DEPTH:
            alarms.append((AlarmKind.RecursionOrDepth,
                           "recursive call" if p.addr in p.context else "call depth limit reached"))
            return
        mem = self.store(s, BitvecAbs.const(sp), BitvecAbs.const((p.addr + 2) & 0xFF), alarms)
        st = AbstractState(_with(s.regs, Reg.SP, BitvecAbs.const((sp - 1) & 0xFF)), mem, s.cmp)
        ctx = p.context + (p.addr,)
        succs.append((self._point(p, ins.imm, ctx), st))

    def _ret(self, p, s: AbstractState, succs, alarms):
        sp = self.num(s.regs[Reg.SP]).singleton
        if sp is None:
            alarms.append((AlarmKind.UnresolvedJump, "return with an unknown stack pointer"))
            return
        sp = (sp + 1) & 0xFF
        target = self.num(self.load(s, BitvecAbs.const(sp), alarms))
        if not p.context:
            alarms.append((AlarmKind.UnresolvedJump, "return with an empty call stack"))
            return
        expected = (p.context[-1] + 2) & 0xFF
        if target.singleton != expected:
            alarms.append((AlarmKind.UnresolvedJump,
                           f"return address {target} may differ from {expected:#04x}"))
            if expected not in target:
                return
        st = AbstractState(_with(s.regs, Reg.SP, BitvecAbs.const(sp)), s.mem, s.cmp)
        succs.append((self._point(p, expected, p.context[:-1]), st))

    # -- fixpoint
    def _is_widen_point(self, p: ProgramPoint) -> bool:
        if not p.context and not p.unroll and p.addr in self.entries:
            return True
        return any(k == SUMMARY and head == p.addr and d == len(p.context)
                   for head, _, d, k in p.unroll)

    def analyze(self, inits: list[tuple[ProgramPoint, AbstractState]]) -> Invariant:
        lat = self.lat
        states: dict[ProgramPoint, AbstractState] = {}
        visits: dict[ProgramPoint, int] = {}
        cfg: set = set()
        heap: list = []
        queued: set = set()

        def push(q):
            if q not in queued:
                queued.add(q)
                heapq.heappush(heap, (-len(q.context), q))

        def propagate(q, st):
            old = states.get(q)
            if old is None:
                states[q] = st
                visits[q] = 1
                push(q)
                return
            if st.leq(old, lat):
                return
            visits[q] += 1
            j = old.join(st, lat)
            if self._is_widen_point(q) and visits[q] > WIDEN_DELAY:
                j = old.widen(j, lat)
            states[q] = j
            push(q)

        for q, st in inits:
            propagate(q, st)
        pops = 0
        while heap:
            _, p = heapq.heappop(heap)
            queued.discard(p)
            pops += 1
            if pops > self.budget:
                raise BudgetExceeded(f"worklist budget of {self.budget} pops exhausted")
            succs, _, _ = self.transfer(p, states[p])
            for q, st in succs:
                cfg.add((p, q))
                propagate(q, st)

        inv = Invariant(states, cfg, [], lat, self.kernel, self.code_range, iterations=pops)
        narrowed = self._narrow(states, inits)
        if narrowed is not None and not self._check(narrowed, inits):
            inv.states = narrowed
            inv.narrowed = True
        inv.self_check = self._check(inv.states, inits)
        self._collect(inv)
        return inv

    def _post(self, states, inits):
        """Join of the initial states and the image of ``states`` under transfer."""
        new: dict[ProgramPoint, AbstractState] = {}

        def add(q, st):
            new[q] = st if q not in new else new[q].join(st, self.lat)

        for q, st in inits:
            add(q, st)
        for p, st in states.items():
            for q, s2 in self.transfer(p, st)[0]:
                add(q, s2)
        return new

    def _narrow(self, states, inits):
        new = self._post(states, inits)
        out = {}
        for q, old in states.items():
            if q not in new:
                continue
            cand = new[q]
            if cand.leq(old, self.lat):
                out[q] = _narrow_state(old, cand, self.lat)
            else:
                out[q] = old
        return out

    def _check(self, states, inits) -> list[str]:
        """Inductiveness: every transfer from the invariant stays inside it."""
        bad = []
        for q, st in inits:
            if q not in states or not st.leq(states[q], self.lat):
                bad.append(f"initial state at {q} not contained")
        for p, st in states.items():
            for q, s2 in self.transfer(p, st)[0]:
                if q not in states or not s2.leq(states[q], self.lat):
                    bad.append(f"edge {p} -> {q} leaves the invariant")
        return bad

    def _collect(self, inv: Invariant):
        seen = set()
        alarms = []
        for p in sorted(inv.states):
            succs, al, havoc = self.transfer(p, inv.states[p])
            for kind, detail in al:
                key = (kind, p, detail)
                if key not in seen:
                    seen.add(key)
                    alarms.append(Alarm(kind, p, detail))
            if havoc is not None:
                inv.havoc_points.append((p, havoc))
        inv.alarms = alarms


def _with(regs: tuple, r, v) -> tuple:
    regs = list(regs)
    regs[r] = v
    return tuple(regs)


def _narrow_state(old: AbstractState, new: AbstractState, lat) -> AbstractState:
    if lat is NUMERIC:
        regs = tuple(narrow(a, b) for a, b in zip(old.regs, new.regs))
        cells = {}
        for a, v in new.mem.cells.items():
            ov = old.mem.cells.get(a, BitvecAbs.top())
            cells[a] = narrow(ov, v)
        return AbstractState(regs, AbsMemory(cells), new.cmp)
    return new


def analyze(kernel: MachineImage, init: AbstractState, mode: str = "incontext",
            lattice=None, budget: int = DEFAULT_BUDGET, entry: int | None = None, **kw) -> Invariant:
    """Fixpoint from ``init`` at ``entry`` (default: the reset entry)."""
    a = Analyzer(kernel, mode, lattice, budget=budget, **kw)
    start = kernel.entry_reset if entry is None else entry
    return a.analyze([(ProgramPoint(start), init)])
