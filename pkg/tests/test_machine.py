import random

import pytest
from hypothesis import given, settings, strategies as st

from u8kverify.asm import assemble
from u8kverify.machine import (
    FLAG_Z, KSTACK_TOP, MEM_SIZE, PRIVILEGED, ConcreteState, DecodeError, Event, FaultKind,
    ImageFormatError, Instruction, MachineImage, Op, OverlapError, Reg, decode, load_images,
    run_oracle, step,
)


def state(code: bytes, origin=0, priv=True, **regs):
    mem = bytearray(MEM_SIZE)
    mem[origin:origin + len(code)] = code
    r = [0] * len(Reg)
    r[Reg.PC] = origin
    r[Reg.FLAGS] = PRIVILEGED if priv else 0
    r[Reg.SP] = KSTACK_TOP
    for k, v in regs.items():
        r[Reg[k]] = v
    return ConcreteState(bytes(mem), tuple(r), entries=(0, 0x40, 0x50), kernel_range=(0, 0x60))


def test_halt_is_zero_opcode():
    assert decode(b"\x00\x00") == Instruction(Op.HALT)
    assert assemble("halt").data == b"\x00\x00"


def test_opcode_byte_ff_is_unassigned():
    with pytest.raises(DecodeError):
        decode(b"\xff\x00")


def test_decode_total_over_all_windows():
    ok = 0
    for b0 in range(256):
        for b1 in range(256):
            try:
                ins = decode(bytes((b0, b1)))
            except DecodeError:
                continue
            ok += 1
            # every accepted window is canonical
            assert ins.encode() == bytes((b0, b1))
    assert ok > 0
    # opcode 31 is never assigned
    assert all(_fails(bytes(((31 << 3) | low, b1))) for low in range(8) for b1 in range(256))


def _fails(w):
    try:
        decode(w)
    except DecodeError:
        return True
    return False


def test_indirect_jump_round_trip():
    img = assemble("jmp r2")
    assert decode(img.data) == Instruction(Op.JMP_IND, ra=2)
    assert str(decode(img.data)) == "jmp r2"


@given(st.integers(0, 255), st.integers(0, 255))
def test_decode_disassemble_assemble(b0, b1):
    try:
        ins = decode(bytes((b0, b1)))
    except DecodeError:
        return
    assert assemble(str(ins)).data == bytes((b0, b1))


def test_straddling_the_end_is_rejected():
    with pytest.raises(DecodeError):
        decode(b"\x00\x00", addr=0xFF)


def test_div_by_zero_faults():
    code = Instruction(Op.DIV, ra=0, rb=1).encode()
    s = step(state(code, R0=9, R1=0))
    assert s.fault is FaultKind.DivByZero


def test_privileged_instruction_in_user_mode_faults():
    s = step(state(Instruction(Op.WRMPU1, ra=0).encode(), priv=False))
    assert s.fault is FaultKind.PrivilegeFault


def test_user_store_outside_segments_faults():
    code = Instruction(Op.STORE_DIR, ra=0, imm=0x90).encode()
    s = step(state(code, priv=False))
    assert s.fault is FaultKind.MpuViolation
    # privileged mode bypasses the MPU
    assert step(state(code)).mem[0x90] == 0


def test_user_store_inside_writable_segment():
    code = Instruction(Op.STORE_DIR, ra=0, imm=0xC3).encode()
    s = state(code, priv=False, R0=7, MPU1=0x80)
    mem = bytearray(s.mem)
    mem[0x80:0x82] = bytes((0xC0, 0x0F))
    s = step(ConcreteState(bytes(mem), s.regs, entries=s.entries, kernel_range=s.kernel_range))
    assert s.fault is None and s.mem[0xC3] == 7
    # the read-only bit forbids it
    mem[0x81] = 0x8F
    s2 = step(ConcreteState(bytes(mem), state(code, priv=False, R0=7, MPU1=0x80).regs))
    assert s2.fault is FaultKind.MpuViolation


def test_iret_three_instruction_kernel():
    src = """
    .entry reset k
    k: load r0, 0x20
       wruflags r0
       iret
    """
    img = assemble(src)
    s = load_images(img)
    s = s.with_regs(UPC=0x30, USP=0x31)
    for _ in range(3):
        s = step(s)
    assert s.fault is None
    assert s.pc == 0x30 and s.reg(Reg.SP) == 0x31
    assert s.reg(Reg.FLAGS) == 0x20 and not s.privileged


def test_syscall_enters_kernel():
    s = step(state(Instruction(Op.SYSCALL).encode(), priv=False, SP=0x77, FLAGS=FLAG_Z))
    assert s.privileged and s.pc == 0x40
    assert s.reg(Reg.UPC) == 2 and s.reg(Reg.USP) == 0x77 and s.reg(Reg.UFLAGS) == FLAG_Z


def test_load_images_example_dump(kernel, user):
    s = load_images(kernel, user)
    assert (s.mem[0xA0], s.mem[0xA1], s.mem[0xAC], s.mem[0xAD]) == (0xA7, 0xA8, 0xA2, 0x02)
    assert s.pc == kernel.entry_reset and s.privileged


def test_load_images_without_user(kernel):
    s = load_images(kernel)
    assert all(b == 0 for b in s.mem[kernel.end:])


def test_overlapping_images():
    k = MachineImage(0, bytes(0x20), entry_reset=0)
    with pytest.raises(OverlapError):
        load_images(k, MachineImage(0x10, bytes(4)))


def test_image_bounds_checked():
    with pytest.raises(ImageFormatError):
        MachineImage(0xF0, bytes(0x20))
    with pytest.raises(ImageFormatError):
        MachineImage(0, bytes(4), entry_reset=8)


def test_image_text_round_trip(kernel, user, tmp_path):
    for img in (kernel, user):
        assert MachineImage.loads(img.dumps()) == img
        p = tmp_path / "x.img"
        img.save(p)
        assert p.read_text() == img.dumps()


def test_oracle_reset_reaches_first_exit(kernel, user):
    tr = run_oracle(load_images(kernel, user), ["RESET"])
    last = tr[-1]
    assert not last.privileged and last.fault is None
    assert last.reg(Reg.MPU1) == 0xAE
    prev = tr[-2]
    assert decode(prev.mem[prev.pc:prev.pc + 2]).op is Op.IRET


def test_oracle_empty_schedule(kernel, user):
    s0 = load_images(kernel, user)
    assert run_oracle(s0, []) == [s0]


def test_oracle_round_robin(kernel, user):
    s0 = load_images(kernel, user)
    curs = []
    for n in range(1, 4):
        tr = run_oracle(s0, ["RESET"] + ["TIMER"] * (n - 1))
        curs.append(tr[-1].mem[0xA0])
    assert curs[0] != curs[1] and curs[0] == curs[2]
    assert set(curs) == {0xA2, 0xA7}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["SYSCALL", "TIMER"]), st.integers(0, 6)), max_size=49))
def test_example_kernel_never_faults(kernel, user, sched):
    tr = run_oracle(load_images(kernel, user), ["RESET"] + sched)
    assert all(s.fault is None for s in tr)


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=2, max_size=2), st.lists(st.integers(0, 255), min_size=12, max_size=12),
       st.integers(0, 253))
def test_user_step_never_gains_privilege(window, regs, pc):
    mem = bytearray(random.Random(pc).randbytes(MEM_SIZE))
    mem[pc:pc + 2] = window
    regs[Reg.PC] = pc
    regs[Reg.FLAGS] &= 0x7F
    s = ConcreteState(bytes(mem), tuple(regs), entries=(0, 0x40, 0x50))
    t = step(s)
    if t.fault is None and t.privileged:
        assert decode(window).op is Op.SYSCALL and t.pc == 0x40
