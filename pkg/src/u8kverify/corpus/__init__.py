"""Bundled example systems, seeded-defect kernels and a user-image generator."""
from __future__ import annotations

from pathlib import Path

from ..asm import assemble
from ..machine import Instruction, MachineImage, Op

CORPUS_DIR = Path(__file__).resolve().parent

# variant name -> property expected to fail
RQ0_VARIANTS = {
    "bd_priv_jump": "ape",
    "bd_priv_grant": "ape",
    "bd_arb_write": "ape",
    "bd_mpu_kernel": "ape",
    "bug_arb_read": "arte",
    "bug_illegal_op": "arte",
    "bug_div_zero": "arte",
}

INTERFACE_ADDR = 0xAC
USER_BASE = 0xA2


def path(name: str) -> Path:
    return CORPUS_DIR / name


def image(name: str) -> MachineImage:
    """Assemble a bundled source (``kernel_fig1``, ``rq0/bug_div_zero``, ...)."""
    return assemble((CORPUS_DIR / f"{name}.s").read_text(encoding="utf-8"))


def generate_user(n: int, link: bool = True, per_thread_tables: bool | None = None) -> MachineImage:
    """User image with ``n`` round-robin threads for the bundled kernels.

    Layout: user code at 0xA2, the interface at 0xAC, the thread array right
    after it, then a memory table and a one-byte data segment per thread.
    When those do not fit, all threads share one table and a data area
    placed between the code and the interface. ``link=False`` leaves the
    ``next`` fields zero (the boot-linking kernel fills them). Raises
    ValueError when ``n`` threads cannot fit.
    """
    if n < 1:
        raise ValueError("need at least one thread")
    code = (Instruction(Op.SYSCALL).encode()
            + Instruction(Op.JMP_ABS, imm=USER_BASE).encode())
    threads = INTERFACE_ADDR + 2
    tail = threads + 5 * n
    if tail > 0x100:
        raise ValueError(f"{n} threads do not fit in the 256-byte address space")
    if per_thread_tables is None:
        per_thread_tables = 0x100 - tail >= 5 * n
    if per_thread_tables:
        if 0x100 - tail < 5 * n:
            raise ValueError(f"{n} threads with private tables do not fit")
        tables = [tail + 4 * i for i in range(n)]
        data = [tail + 4 * n + i for i in range(n)]
        end = tail + 5 * n
    else:
        # one shared table and data area in the gap below the interface
        gap = USER_BASE + len(code)
        tables = [gap] * n
        data = [gap + 4] * n
        end = tail
    mem = bytearray(0x100)
    mem[USER_BASE:USER_BASE + len(code)] = code
    mem[INTERFACE_ADDR] = threads
    mem[INTERFACE_ADDR + 1] = n
    code_seg = (USER_BASE, 0x80 | (len(code) - 1))  # read-only code
    for i in range(n):
        t = threads + 5 * i
        mem[t] = tables[i]
        mem[t + 1] = USER_BASE
        mem[t + 2] = data[i]
        mem[t + 3] = 0x00
        mem[t + 4] = (threads + 5 * ((i + 1) % n)) if link else 0
        mt = tables[i]
        size = 0 if per_thread_tables else INTERFACE_ADDR - data[i] - 1
        mem[mt:mt + 4] = bytes((*code_seg, data[i], size))
    return MachineImage(USER_BASE, bytes(mem[USER_BASE:end]),
                        symbols={"ucode": USER_BASE, "if": INTERFACE_ADDR, "threads": threads})
