"""The u8k toy machine: ISA, encoding, image container and a concrete interpreter.

u8k is an 8-bit machine with a 256-byte address space and a fixed 2-byte
instruction encoding::

    byte0 = opcode << 3 | immediate_mode << 2 | ra
    byte1 = immediate / address / rb / selector (0 when unused)

The kernel runs with PC/SP/FLAGS and FLAGS.PRIVILEGED set. User code runs on
the same live registers with PRIVILEGED clear; on kernel entry the hardware
banks them into UPC/USP/UFLAGS, and IRET restores them. MPU1/MPU2 hold the
address of a 2-byte segment descriptor ``{base, size_and_rights}``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

MEM_SIZE = 256

FLAG_Z = 0x01
FLAG_C = 0x02  # unsigned "less than" after CMP
PRIVILEGED = 0x80

KSTACK_TOP = 0x9F
KSTACK_BOTTOM = 0x88  # kernel stack occupies [KSTACK_BOTTOM, KSTACK_TOP]
SEG_READONLY = 0x80
SEG_LIMIT_MASK = 0x0F


class Reg(enum.IntEnum):
    R0 = 0
    R1 = 1
    R2 = 2
    R3 = 3
    SP = 4
    PC = 5
    FLAGS = 6
    UPC = 7
    USP = 8
    UFLAGS = 9
    MPU1 = 10
    MPU2 = 11


GPRS = (Reg.R0, Reg.R1, Reg.R2, Reg.R3)
# selector byte of RDUREG / WRUREG
UREG_SELECT = {0: Reg.UPC, 1: Reg.USP, 2: Reg.UFLAGS}


class Op(enum.IntEnum):
    HALT = 0
    LOAD_IMM = 1
    LOAD_DIR = 2
    LOAD_IND = 3
    STORE_DIR = 4
    STORE_IND = 5
    MOV = 6
    ADD = 7
    SUB = 8
    AND = 9
    OR = 10
    XOR = 11
    SHL = 12
    SHR = 13
    DIV = 14
    CMP = 15
    JMP_ABS = 16
    JMP_IND = 17
    JEQ = 18
    JNE = 19
    JLT = 20
    JGE = 21
    CALL = 22
    RET = 23
    IRET = 24
    SYSCALL = 25
    WRMPU1 = 26
    WRMPU2 = 27
    WRUFLAGS = 28
    RDUREG = 29
    WRUREG = 30


ALU_OPS = frozenset({Op.ADD, Op.SUB, Op.AND, Op.OR, Op.XOR, Op.SHL, Op.SHR, Op.DIV, Op.CMP})
COND_OPS = frozenset({Op.JEQ, Op.JNE, Op.JLT, Op.JGE})
PRIVILEGED_OPS = frozenset({Op.WRMPU1, Op.WRMPU2, Op.WRUFLAGS, Op.IRET})

# operand shapes: which fields an opcode uses
_SHAPE = {
    Op.HALT: "",
    Op.LOAD_IMM: "ri",
    Op.LOAD_DIR: "ri",
    Op.LOAD_IND: "rr",
    Op.STORE_DIR: "ri",
    Op.STORE_IND: "rr",
    Op.MOV: "rr",
    Op.JMP_ABS: "i",
    Op.JMP_IND: "r",
    Op.JEQ: "i",
    Op.JNE: "i",
    Op.JLT: "i",
    Op.JGE: "i",
    Op.CALL: "i",
    Op.RET: "",
    Op.IRET: "",
    Op.SYSCALL: "",
    Op.WRMPU1: "r",
    Op.WRMPU2: "r",
    Op.WRUFLAGS: "r",
    Op.RDUREG: "ru",
    Op.WRUREG: "ru",
}


class DecodeError(ValueError):
    pass


class OverlapError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Instruction:
    """A decoded instruction.

    ``ra``/``rb`` are GPR indices (0..3). ``imm`` is the immediate, address or
    selector byte. For ALU ops exactly one of ``rb``/``imm`` is set.
    """

    op: Op
    ra: int | None = None
    rb: int | None = None
    imm: int | None = None

    @property
    def privileged(self) -> bool:
        return self.op in PRIVILEGED_OPS

    def encode(self) -> bytes:
        ra = self.ra or 0
        mode = 0
        if self.op in ALU_OPS:
            if self.imm is not None:
                mode, b1 = 1, self.imm
            else:
                b1 = self.rb
        elif self.rb is not None:
            b1 = self.rb
        else:
            b1 = self.imm or 0
        return bytes(((int(self.op) << 3) | (mode << 2) | ra, b1 & 0xFF))

    def __str__(self) -> str:
        return disassemble(self)


def decode(window: bytes | Sequence[int], addr: int = 0) -> Instruction:
    """Decode the 2-byte window fetched at ``addr``; raises DecodeError."""
    if addr + 1 >= MEM_SIZE:
        raise DecodeError(f"instruction at {addr:#04x} straddles the end of memory")
    b0, b1 = window[0], window[1]
    opnum, mode, ra = b0 >> 3, (b0 >> 2) & 1, b0 & 3
    try:
        op = Op(opnum)
    except ValueError:
        raise DecodeError(f"unassigned opcode {opnum} at {addr:#04x}") from None
    if op in ALU_OPS:
        if mode:
            return Instruction(op, ra=ra, imm=b1)
        if b1 > 3:
            raise DecodeError(f"bad register operand {b1:#04x} at {addr:#04x}")
        return Instruction(op, ra=ra, rb=b1)
    if mode:
        raise DecodeError(f"immediate mode on non-ALU opcode at {addr:#04x}")
    shape = _SHAPE[op]
    if "r" not in shape and ra:
        raise DecodeError(f"stray register bits at {addr:#04x}")
    if shape in ("", "r"):
        if b1:
            raise DecodeError(f"stray operand byte at {addr:#04x}")
        return Instruction(op, ra=ra if shape == "r" else None)
    if shape == "rr":
        if b1 > 3:
            raise DecodeError(f"bad register operand {b1:#04x} at {addr:#04x}")
        return Instruction(op, ra=ra, rb=b1)
    if shape == "ru":
        limit = 2 if op is Op.RDUREG else 1
        if b1 > limit:
            raise DecodeError(f"bad user-register selector {b1} at {addr:#04x}")
        return Instruction(op, ra=ra, imm=b1)
    if shape == "ri":
        return Instruction(op, ra=ra, imm=b1)
    return Instruction(op, imm=b1)


_UREG_NAMES = {0: "upc", 1: "usp", 2: "uflags"}


def disassemble(ins: Instruction) -> str:
    """Render in the assembler's own syntax (round-trips through ``asm``)."""
    op, ra, rb, imm = ins.op, ins.ra, ins.rb, ins.imm
    r = lambda i: f"r{i}"  # noqa: E731
    h = lambda v: f"0x{v:02x}"  # noqa: E731
    name = op.name.lower()
    if op is Op.LOAD_IMM:
        return f"load {r(ra)}, {h(imm)}"
    if op is Op.LOAD_DIR:
        return f"load {r(ra)}, [{h(imm)}]"
    if op is Op.LOAD_IND:
        return f"load {r(ra)}, [{r(rb)}]"
    if op is Op.STORE_DIR:
        return f"store [{h(imm)}], {r(ra)}"
    if op is Op.STORE_IND:
        return f"store [{r(rb)}], {r(ra)}"
    if op is Op.MOV:
        return f"mov {r(ra)}, {r(rb)}"
    if op in ALU_OPS:
        return f"{name} {r(ra)}, {h(imm) if imm is not None else r(rb)}"
    if op is Op.JMP_ABS:
        return f"jmp {h(imm)}"
    if op is Op.JMP_IND:
        return f"jmp {r(ra)}"
    if op in COND_OPS or op is Op.CALL:
        return f"{name} {h(imm)}"
    if op in (Op.WRMPU1, Op.WRMPU2, Op.WRUFLAGS):
        return f"{name} {r(ra)}"
    if op is Op.RDUREG:
        return f"rdureg {r(ra)}, {_UREG_NAMES[imm]}"
    if op is Op.WRUREG:
        return f"wrureg {_UREG_NAMES[imm]}, {r(ra)}"
    return name


# ---------------------------------------------------------------------------
# images


@dataclass(frozen=True)
class MachineImage:
    origin: int
    data: bytes
    entry_reset: int | None = None
    entry_syscall: int | None = None
    entry_timer: int | None = None
    symbols: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.origin < MEM_SIZE or self.origin + len(self.data) > MEM_SIZE:
            raise ImageFormatError("image does not fit in the 256-byte address space")
        for name in ("entry_reset", "entry_syscall", "entry_timer"):
            ep = getattr(self, name)
            if ep is not None and not self.origin <= ep < self.end:
                raise ImageFormatError(f"{name}={ep:#04x} outside the image")

    @property
    def end(self) -> int:
        return self.origin + len(self.data)

    def covers(self, addr: int) -> bool:
        return self.origin <= addr < self.end

    def dumps(self) -> str:
        lines = ["u8k-image v1", f"origin=0x{self.origin:02x}"]
        for key in ("reset", "syscall", "timer"):
            ep = getattr(self, f"entry_{key}")
            if ep is not None:
                lines.append(f"entry.{key}=0x{ep:02x}")
        for name in sorted(self.symbols):
            lines.append(f"sym {name}=0x{self.symbols[name]:02x}")
        for i in range(0, len(self.data), 16):
            lines.append(self.data[i : i + 16].hex(" "))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MachineImage":
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines or lines[0] != "u8k-image v1":
            raise ImageFormatError("missing 'u8k-image v1' header")
        origin = None
        entries: dict[str, int] = {}
        symbols: dict[str, int] = {}
        data = bytearray()
        for ln in lines[1:]:
            if m := re.fullmatch(r"origin=(0x[0-9a-fA-F]+)", ln):
                origin = int(m[1], 16)
            elif m := re.fullmatch(r"entry\.(reset|syscall|timer)=(0x[0-9a-fA-F]+)", ln):
                entries[f"entry_{m[1]}"] = int(m[2], 16)
            elif m := re.fullmatch(r"sym ([A-Za-z_.][\w.]*)=(0x[0-9a-fA-F]+)", ln):
                symbols[m[1]] = int(m[2], 16)
            elif re.fullmatch(r"[0-9a-fA-F]{2}( [0-9a-fA-F]{2})*", ln):
                data += bytes.fromhex(ln)
            else:
                raise ImageFormatError(f"unrecognised line: {ln!r}")
        if origin is None:
            raise ImageFormatError("missing origin")
        return cls(origin, bytes(data), symbols=symbols, **entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "MachineImage":
        with open(path, encoding="ascii") as fh:
            return cls.loads(fh.read())


# ---------------------------------------------------------------------------
# concrete semantics


class FaultKind(enum.Enum):
    IllegalOpcode = "IllegalOpcode"
    DivByZero = "DivByZero"
    PrivilegeFault = "PrivilegeFault"
    MpuViolation = "MpuViolation"
    JumpToUndecodable = "JumpToUndecodable"


class Event(enum.Enum):
    RESET = "RESET"
    SYSCALL = "SYSCALL"
    TIMER = "TIMER"


@dataclass(frozen=True)
class ConcreteState:
    mem: bytes
    regs: tuple[int, ...]
    halted: bool = False
    fault: FaultKind | None = None
    # (reset, syscall, timer) of the loaded kernel
    entries: tuple[int, int, int] = (0, 0, 0)
    kernel_range: tuple[int, int] = (0, 0)

    def reg(self, r: Reg) -> int:
        return self.regs[r]

    @property
    def pc(self) -> int:
        return self.regs[Reg.PC]

    @property
    def privileged(self) -> bool:
        return bool(self.regs[Reg.FLAGS] & PRIVILEGED)

    @property
    def kernel_controlled(self) -> bool:
        lo, hi = self.kernel_range
        return lo <= self.pc < hi

    def with_regs(self, **changes: int) -> "ConcreteState":
        regs = list(self.regs)
        for name, v in changes.items():
            regs[Reg[name]] = v & 0xFF
        return replace(self, regs=tuple(regs))


def load_images(kernel: MachineImage, user: MachineImage | None = None) -> ConcreteState:
    """Overlay both images on zeroed memory: the reset state s0."""
    mem = bytearray(MEM_SIZE)
    mem[kernel.origin : kernel.end] = kernel.data
    if user is not None and user.data:
        if user.origin < kernel.end and kernel.origin < user.end:
            raise OverlapError(
                f"user image [{user.origin:#04x},{user.end:#04x}) overlaps the kernel"
            )
        mem[user.origin : user.end] = user.data
    if kernel.entry_reset is None:
        raise ImageFormatError("kernel image has no reset entry")
    regs = [0] * len(Reg)
    regs[Reg.PC] = kernel.entry_reset
    regs[Reg.FLAGS] = PRIVILEGED
    regs[Reg.SP] = KSTACK_TOP
    entries = (
        kernel.entry_reset,
        kernel.entry_syscall if kernel.entry_syscall is not None else kernel.entry_reset,
        kernel.entry_timer if kernel.entry_timer is not None else kernel.entry_reset,
    )
    return ConcreteState(bytes(mem), tuple(regs), entries=entries,
                         kernel_range=(kernel.origin, kernel.end))


def segment_range(mem: bytes | Sequence[int], descriptor: int) -> range:
    """Writable byte range granted by the descriptor at ``descriptor``."""
    base = mem[descriptor]
    sr = mem[(descriptor + 1) & 0xFF]
    if sr & SEG_READONLY:
        return range(0)
    return range(base, min(MEM_SIZE, base + (sr & SEG_LIMIT_MASK) + 1))


def user_may_write(s: ConcreteState, addr: int) -> bool:
    return any(addr in segment_range(s.mem, s.regs[r]) for r in (Reg.MPU1, Reg.MPU2))


def interrupt(s: ConcreteState, event: Event, return_pc: int | None = None) -> ConcreteState:
    """Hardware kernel entry: bank the user context, raise privilege."""
    if event is Event.RESET:
        regs = [0] * len(Reg)
        regs[Reg.PC] = s.entries[0]
        regs[Reg.FLAGS] = PRIVILEGED
        regs[Reg.SP] = KSTACK_TOP
        return replace(s, regs=tuple(regs), halted=False, fault=None)
    regs = list(s.regs)
    regs[Reg.UPC] = s.regs[Reg.PC] if return_pc is None else return_pc & 0xFF
    regs[Reg.USP] = s.regs[Reg.SP]
    regs[Reg.UFLAGS] = s.regs[Reg.FLAGS]
    regs[Reg.FLAGS] = PRIVILEGED
    regs[Reg.SP] = KSTACK_TOP
    regs[Reg.PC] = s.entries[1] if event is Event.SYSCALL else s.entries[2]
    return replace(s, regs=tuple(regs))


def _fault(s: ConcreteState, kind: FaultKind) -> ConcreteState:
    return replace(s, fault=kind)


def alu(op: Op, a: int, b: int) -> int:
    """8-bit ALU result (CMP returns the flag bits it sets). DIV by 0 is the caller's job."""
    if op is Op.ADD:
        return (a + b) & 0xFF
    if op is Op.SUB:
        return (a - b) & 0xFF
    if op is Op.AND:
        return a & b
    if op is Op.OR:
        return a | b
    if op is Op.XOR:
        return a ^ b
    if op is Op.SHL:
        return (a << (b & 7)) & 0xFF
    if op is Op.SHR:
        return a >> (b & 7)
    if op is Op.DIV:
        return a // b
    if op is Op.CMP:
        return (FLAG_Z if a == b else 0) | (FLAG_C if a < b else 0)
    raise ValueError(op)


def step(s: ConcreteState) -> ConcreteState:
    """Execute one instruction. Faults are reported in the returned state."""
    if s.halted or s.fault is not None:
        return s
    pc = s.pc
    if pc + 1 >= MEM_SIZE:
        return _fault(s, FaultKind.JumpToUndecodable)
    try:
        ins = decode(s.mem[pc : pc + 2], pc)
    except DecodeError:
        return _fault(s, FaultKind.IllegalOpcode)
    priv = s.privileged
    if ins.privileged and not priv:
        return _fault(s, FaultKind.PrivilegeFault)
    regs = list(s.regs)
    mem = s.mem
    nxt = (pc + 2) & 0xFF
    op, ra = ins.op, ins.ra

    def store(addr: int, v: int):
        nonlocal mem
        m = bytearray(mem)
        m[addr] = v & 0xFF
        mem = bytes(m)

    if op is Op.HALT:
        return replace(s, halted=True)
    if op is Op.LOAD_IMM:
        regs[ra] = ins.imm
    elif op is Op.LOAD_DIR:
        regs[ra] = mem[ins.imm]
    elif op is Op.LOAD_IND:
        regs[ra] = mem[regs[ins.rb]]
    elif op in (Op.STORE_DIR, Op.STORE_IND):
        addr = ins.imm if op is Op.STORE_DIR else regs[ins.rb]
        if not priv and not user_may_write(s, addr):
            return _fault(s, FaultKind.MpuViolation)
        store(addr, regs[ra])
    elif op is Op.MOV:
        regs[ra] = regs[ins.rb]
    elif op in ALU_OPS:
        b = ins.imm if ins.imm is not None else regs[ins.rb]
        if op is Op.DIV and b == 0:
            return _fault(s, FaultKind.DivByZero)
        res = alu(op, regs[ra], b)
        if op is Op.CMP:
            regs[Reg.FLAGS] = (regs[Reg.FLAGS] & ~(FLAG_Z | FLAG_C) & 0xFF) | res
        else:
            regs[ra] = res
    elif op is Op.JMP_ABS:
        nxt = ins.imm
    elif op is Op.JMP_IND:
        nxt = regs[ra]
    elif op in COND_OPS:
        f = regs[Reg.FLAGS]
        taken = {
            Op.JEQ: f & FLAG_Z,
            Op.JNE: not f & FLAG_Z,
            Op.JLT: f & FLAG_C,
            Op.JGE: not f & FLAG_C,
        }[op]
        if taken:
            nxt = ins.imm
    elif op is Op.CALL:
        sp = regs[Reg.SP]
        if not priv and not user_may_write(s, sp):
            return _fault(s, FaultKind.MpuViolation)
        store(sp, nxt)
        regs[Reg.SP] = (sp - 1) & 0xFF
        nxt = ins.imm
    elif op is Op.RET:
        regs[Reg.SP] = (regs[Reg.SP] + 1) & 0xFF
        nxt = mem[regs[Reg.SP]]
    elif op is Op.IRET:
        regs[Reg.PC] = regs[Reg.UPC]
        regs[Reg.SP] = regs[Reg.USP]
        regs[Reg.FLAGS] = regs[Reg.UFLAGS]
        return replace(s, regs=tuple(regs))
    elif op is Op.SYSCALL:
        if priv:
            return _fault(s, FaultKind.IllegalOpcode)
        return interrupt(s, Event.SYSCALL, return_pc=nxt)
    elif op is Op.WRMPU1:
        regs[Reg.MPU1] = regs[ra]
    elif op is Op.WRMPU2:
        regs[Reg.MPU2] = regs[ra]
    elif op is Op.WRUFLAGS:
        regs[Reg.UFLAGS] = regs[ra]
    elif op is Op.RDUREG:
        regs[ra] = regs[UREG_SELECT[ins.imm]]
    elif op is Op.WRUREG:
        regs[UREG_SELECT[ins.imm]] = regs[ra]
    regs[Reg.PC] = nxt
    return replace(s, regs=tuple(regs), mem=mem)


# ---------------------------------------------------------------------------
# oracle runs

ScheduleItem = "Event | str | tuple"


def _normalize(item) -> tuple[Event, int]:
    if isinstance(item, tuple):
        ev, steps = item
    else:
        ev, steps = item, 0
    return (ev if isinstance(ev, Event) else Event[str(ev).upper()]), int(steps)


def run_kernel(s: ConcreteState, trace: list[ConcreteState], budget: int) -> tuple[ConcreteState, int]:
    """Step while privileged; stops on return to user mode, halt, fault or budget."""
    while budget > 0 and s.privileged and not s.halted and s.fault is None:
        s = step(s)
        trace.append(s)
        budget -= 1
    return s, budget


def run_oracle(s0: ConcreteState, schedule: Iterable, max_steps: int = 10_000) -> list[ConcreteState]:
    """Replay ``schedule`` deterministically.

    Items are events (``"RESET"``, ``"TIMER"``, ``"SYSCALL"``) or
    ``(event, user_steps)`` pairs: ``user_steps`` user instructions execute
    before the event fires. Every intermediate state is in the trace.
    """
    trace = [s0]
    s = s0
    budget = max_steps
    for item in schedule:
        ev, user_steps = _normalize(item)
        for _ in range(user_steps):
            if budget <= 0 or s.halted or s.fault is not None or s.privileged:
                break
            s = step(s)
            trace.append(s)
            budget -= 1
        if s.fault is not None or budget <= 0 or s.halted:
            break
        if ev is not Event.RESET and s.privileged:
            # the kernel is non-preemptible; escalated user code ignores interrupts too
            continue
        if ev is Event.SYSCALL:
            s = interrupt(s, ev, return_pc=s.pc + 2)
        else:
            s = interrupt(s, ev)
        trace.append(s)
        s, budget = run_kernel(s, trace, budget)
        if s.fault is not None:
            break
    return trace


def run_adversarial(s0: ConcreteState, rng, events: int = 20, max_steps: int = 20_000,
                    syscall_numbers: Sequence[int] = (0, 1, 2, 3, 4, 5, 6, 7)) -> list[ConcreteState]:
    """Reset, then alternate random legal user behaviour with interrupts.

    User behaviour is anything unprivileged code could do: arbitrary R0-R3,
    PC, SP, low FLAGS bits and arbitrary bytes inside the MPU-writable
    segments. ``rng`` is a ``random.Random``.
    """
    trace = [s0]
    s = interrupt(s0, Event.RESET)
    trace.append(s)
    s, budget = run_kernel(s, trace, max_steps)
    for _ in range(events):
        if s.fault is not None or s.halted or budget <= 0 or s.privileged:
            break
        regs = list(s.regs)
        for r in (Reg.R0, Reg.R1, Reg.R2, Reg.R3, Reg.PC, Reg.SP):
            regs[r] = rng.randrange(256)
        regs[Reg.FLAGS] = rng.randrange(128)
        ev = rng.choice((Event.SYSCALL, Event.TIMER))
        if ev is Event.SYSCALL:
            regs[Reg.R0] = rng.choice(list(syscall_numbers))
        mem = bytearray(s.mem)
        writable = [a for r in (Reg.MPU1, Reg.MPU2) for a in segment_range(s.mem, s.regs[r])]
        for a in writable:
            if rng.random() < 0.5:
                mem[a] = rng.randrange(256)
        s = replace(s, regs=tuple(regs), mem=bytes(mem))
        trace.append(s)
        s = interrupt(s, ev, return_pc=s.pc + 2 if ev is Event.SYSCALL else None)
        trace.append(s)
        s, budget = run_kernel(s, trace, budget)
    return trace
