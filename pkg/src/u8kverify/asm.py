"""Two-pass assembler for u8k.

Syntax, one statement per line, ``;`` starts a comment::

    .org 0x00            ; first .org sets the image origin, later ones pad
    .entry reset start   ; also syscall / timer
    .equ IF 0xAC         ; named constant
    start: load r0, [IF] ; LOAD.dir
           load r1, [r0] ; LOAD.ind
           load r2, 5    ; LOAD.imm
           store [cur], r0
           add r0, 1
           jmp r2        ; JMP.ind
    cur:   .byte 0xA7, next+1

Every label becomes an image symbol.
"""
from __future__ import annotations

import argparse
import re
import sys
from dataclasses import dataclass

from .machine import ALU_OPS, COND_OPS, Instruction, MachineImage, Op

__all__ = ["AsmError", "assemble", "main"]


class AsmError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


class UnknownMnemonic(AsmError):
    pass


class DuplicateLabel(AsmError):
    pass


class UnresolvedLabel(AsmError):
    pass


class RangeError(AsmError):
    pass


_SIMPLE = {
    "halt": Op.HALT, "ret": Op.RET, "iret": Op.IRET, "syscall": Op.SYSCALL,
    "wrmpu1": Op.WRMPU1, "wrmpu2": Op.WRMPU2, "wruflags": Op.WRUFLAGS,
    "call": Op.CALL, "jeq": Op.JEQ, "jne": Op.JNE, "jlt": Op.JLT, "jge": Op.JGE,
}
_ALU = {op.name.lower(): op for op in ALU_OPS}
_UREGS = {"upc": 0, "usp": 1, "uflags": 2}
MNEMONICS = frozenset(_SIMPLE) | frozenset(_ALU) | {"load", "store", "mov", "jmp", "rdureg", "wrureg"}

_REG = re.compile(r"r([0-3])$", re.I)
_LABEL = re.compile(r"([A-Za-z_.][\w.]*):")


@dataclass
class _Stmt:
    line: int
    addr: int
    kind: str  # "ins" | "byte"
    mnemonic: str
    operands: list[str]


def _split_operands(text: str) -> list[str]:
    text = text.strip()
    return [p.strip() for p in text.split(",")] if text else []


def _num(tok: str) -> int | None:
    tok = tok.strip()
    try:
        return int(tok, 0)
    except ValueError:
        return None


class _Resolver:
    def __init__(self, symbols: dict[str, int]):
        self.symbols = symbols

    def value(self, expr: str, line: int) -> int:
        expr = expr.strip()
        m = re.fullmatch(r"([^+\-]+?)\s*([+\-])\s*(\w+)", expr)
        if m and _num(m[1]) is None:
            base = self.value(m[1], line)
            off = _num(m[3])
            if off is None:
                raise AsmError(f"bad offset in {expr!r}", line)
            v = base + off if m[2] == "+" else base - off
        else:
            v = _num(expr)
            if v is None:
                if expr not in self.symbols:
                    raise UnresolvedLabel(f"unresolved label {expr!r}", line)
                v = self.symbols[expr]
        if not 0 <= v <= 0xFF:
            raise RangeError(f"value {v} out of byte range", line)
        return v


def _reg(tok: str, line: int) -> int:
    m = _REG.match(tok.strip())
    if not m:
        raise AsmError(f"expected register, got {tok!r}", line)
    return int(m[1])


def _is_reg(tok: str) -> bool:
    return bool(_REG.match(tok.strip()))


def _mem(tok: str) -> str | None:
    tok = tok.strip()
    return tok[1:-1].strip() if tok.startswith("[") and tok.endswith("]") else None


def _encode(st: _Stmt, res: _Resolver) -> Instruction:
    mn, ops, ln = st.mnemonic, st.operands, st.line

    def want(n):
        if len(ops) != n:
            raise AsmError(f"{mn} takes {n} operand(s)", ln)

    if mn in ("halt", "ret", "iret", "syscall"):
        want(0)
        return Instruction(_SIMPLE[mn])
    if mn in ("wrmpu1", "wrmpu2", "wruflags"):
        want(1)
        return Instruction(_SIMPLE[mn], ra=_reg(ops[0], ln))
    if mn in ("call", "jeq", "jne", "jlt", "jge"):
        want(1)
        return Instruction(_SIMPLE[mn], imm=res.value(ops[0], ln))
    if mn == "jmp":
        want(1)
        if _is_reg(ops[0]):
            return Instruction(Op.JMP_IND, ra=_reg(ops[0], ln))
        return Instruction(Op.JMP_ABS, imm=res.value(ops[0], ln))
    if mn == "load":
        want(2)
        ra = _reg(ops[0], ln)
        inner = _mem(ops[1])
        if inner is None:
            return Instruction(Op.LOAD_IMM, ra=ra, imm=res.value(ops[1], ln))
        if _is_reg(inner):
            return Instruction(Op.LOAD_IND, ra=ra, rb=_reg(inner, ln))
        return Instruction(Op.LOAD_DIR, ra=ra, imm=res.value(inner, ln))
    if mn == "store":
        want(2)
        inner = _mem(ops[0])
        if inner is None:
            raise AsmError("store destination must be [addr] or [reg]", ln)
        ra = _reg(ops[1], ln)
        if _is_reg(inner):
            return Instruction(Op.STORE_IND, ra=ra, rb=_reg(inner, ln))
        return Instruction(Op.STORE_DIR, ra=ra, imm=res.value(inner, ln))
    if mn == "mov":
        want(2)
        return Instruction(Op.MOV, ra=_reg(ops[0], ln), rb=_reg(ops[1], ln))
    if mn in _ALU:
        want(2)
        ra = _reg(ops[0], ln)
        if _is_reg(ops[1]):
            return Instruction(_ALU[mn], ra=ra, rb=_reg(ops[1], ln))
        return Instruction(_ALU[mn], ra=ra, imm=res.value(ops[1], ln))
    if mn == "rdureg":
        want(2)
        sel = _UREGS.get(ops[1].strip().lower())
        if sel is None:
            raise AsmError(f"unknown user register {ops[1]!r}", ln)
        return Instruction(Op.RDUREG, ra=_reg(ops[0], ln), imm=sel)
    if mn == "wrureg":
        want(2)
        sel = _UREGS.get(ops[0].strip().lower())
        if sel is None or sel == 2:
            raise AsmError(f"wrureg target must be upc or usp, got {ops[0]!r}", ln)
        return Instruction(Op.WRUREG, ra=_reg(ops[1], ln), imm=sel)
    raise UnknownMnemonic(f"unknown mnemonic {mn!r}", ln)


def assemble(src: str) -> MachineImage:
    """Assemble ``src`` into a MachineImage (deterministic)."""
    symbols: dict[str, int] = {}
    label_names: list[str] = []
    stmts: list[_Stmt] = []
    entries: dict[str, str] = {}
    origin: int | None = None
    pc = 0
    for ln, raw in enumerate(src.splitlines(), 1):
        text = raw.split(";", 1)[0].strip()
        while (m := _LABEL.match(text)):
            name = m[1]
            if name in symbols:
                raise DuplicateLabel(f"duplicate label {name!r}", ln)
            if origin is None:
                origin = pc
            symbols[name] = pc
            label_names.append(name)
            text = text[m.end():].strip()
        if not text:
            continue
        head, _, rest = text.partition(" ")
        head = head.lower()
        if head == ".org":
            v = _num(rest)
            if v is None or not 0 <= v <= 0xFF:
                raise RangeError(f"bad .org {rest!r}", ln)
            if origin is None:
                origin = pc = v
            elif v < pc:
                raise AsmError(".org moves backwards", ln)
            else:
                pc = v
        elif head == ".equ":
            parts = rest.split()
            if len(parts) != 2:
                raise AsmError(".equ NAME VALUE", ln)
            if parts[0] in symbols:
                raise DuplicateLabel(f"duplicate label {parts[0]!r}", ln)
            symbols[parts[0]] = _Resolver(symbols).value(parts[1], ln)
        elif head == ".entry":
            parts = rest.split()
            if len(parts) != 2 or parts[0] not in ("reset", "syscall", "timer"):
                raise AsmError(".entry reset|syscall|timer LABEL", ln)
            entries[parts[0]] = parts[1]
        elif head == ".byte":
            if origin is None:
                origin = pc
            for tok in _split_operands(rest):
                stmts.append(_Stmt(ln, pc, "byte", ".byte", [tok]))
                pc += 1
        elif head.startswith("."):
            raise UnknownMnemonic(f"unknown directive {head!r}", ln)
        else:
            if head not in MNEMONICS:
                raise UnknownMnemonic(f"unknown mnemonic {head!r}", ln)
            if origin is None:
                origin = pc
            stmts.append(_Stmt(ln, pc, "ins", head, _split_operands(rest)))
            pc += 2
        if pc > 0x100:
            raise RangeError("image exceeds the address space", ln)
    origin = origin or 0
    res = _Resolver(symbols)
    out = bytearray(pc - origin)
    for st in stmts:
        off = st.addr - origin
        if st.kind == "byte":
            out[off] = res.value(st.operands[0], st.line)
        else:
            out[off : off + 2] = _encode(st, res).encode()
    kw = {f"entry_{k}": res.value(v, 0) for k, v in entries.items()}
    labels = {k: symbols[k] for k in label_names}
    return MachineImage(origin, bytes(out), symbols=labels, **kw)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="u8k-asm", description="assemble u8k source into an image")
    p.add_argument("source")
    p.add_argument("-o", "--output", required=True)
    args = p.parse_args(argv)
    try:
        with open(args.source, encoding="utf-8") as fh:
            img = assemble(fh.read())
        img.save(args.output)
    except (OSError, AsmError, ValueError) as exc:
        print(f"u8k-asm: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
