"""Byte-level abstract memory for numerically addressed (kernel / in-context) cells.

Only cells with a non-⊤ abstraction are stored; an absent address means
"anything". Maps are never mutated in place: every update returns a new
``AbsMemory`` sharing nothing mutable with the old one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..alarms import AlarmKind
from .value import BitvecAbs, join as vjoin, widen_sets as vwiden

WEAK_UPDATE_CAP = 16


class NumericLattice:
    """Value lattice for purely numeric states."""

    top = BitvecAbs.top()

    @staticmethod
    def join(a, b):
        return vjoin(a, b)

    @staticmethod
    def widen(a, b):
        return vwiden(a, b)

    @staticmethod
    def leq(a, b) -> bool:
        return a.leq(b)

    @staticmethod
    def is_top(v) -> bool:
        return v.is_top

    @staticmethod
    def is_bottom(v) -> bool:
        return v.is_bottom

    @staticmethod
    def numeric(v) -> BitvecAbs:
        return v


NUMERIC = NumericLattice()


@dataclass(frozen=True)
class AbsMemory:
    cells: Mapping[int, object] = field(default_factory=dict)

    @classmethod
    def from_bytes(cls, data: bytes | bytearray, base: int = 0) -> "AbsMemory":
        return cls({base + i: BitvecAbs.const(b) for i, b in enumerate(data)})

    def __getitem__(self, addr: int):
        return self.cells.get(addr, BitvecAbs.top())

    def tracked(self) -> list[int]:
        return sorted(self.cells)

    def set(self, addr: int, v, lat=NUMERIC) -> "AbsMemory":
        cells = dict(self.cells)
        if lat.is_top(v):
            cells.pop(addr, None)
        else:
            cells[addr] = v
        return AbsMemory(cells)

    def join(self, other: "AbsMemory", lat=NUMERIC) -> "AbsMemory":
        cells = {}
        for a in self.cells.keys() & other.cells.keys():
            v = lat.join(self.cells[a], other.cells[a])
            if not lat.is_top(v):
                cells[a] = v
        return AbsMemory(cells)

    def widen(self, other: "AbsMemory", lat=NUMERIC) -> "AbsMemory":
        cells = {}
        for a in self.cells.keys() & other.cells.keys():
            v = lat.widen(self.cells[a], other.cells[a])
            if not lat.is_top(v):
                cells[a] = v
        return AbsMemory(cells)

    def leq(self, other: "AbsMemory", lat=NUMERIC) -> bool:
        for a, ov in other.cells.items():
            if a not in self.cells or not lat.leq(self.cells[a], ov):
                return False
        return True

    def is_bottom(self, lat=NUMERIC) -> bool:
        return any(lat.is_bottom(v) for v in self.cells.values())


def store(m: AbsMemory, addr: BitvecAbs, v, lat=NUMERIC, *,
          cap: int = WEAK_UPDATE_CAP, code_cells: Iterable[int] = ()) -> tuple[AbsMemory, list]:
    """Abstract store; returns the new memory and a list of ``(AlarmKind, detail)``."""
    alarms = []
    if addr.is_bottom:
        return m, alarms
    code_hit = sorted(set(addr.values()) & set(code_cells)) if len(addr) < 256 else sorted(code_cells)
    if code_hit:
        alarms.append((AlarmKind.SelfModification,
                       "store may hit kernel code at " + ",".join(f"{a:#04x}" for a in code_hit[:8])))
    single = addr.singleton
    if single is not None:
        return m.set(single, v, lat), alarms
    if addr.is_top:
        alarms.append((AlarmKind.WildStore, "store through an unconstrained address"))
        return AbsMemory({}), alarms
    targets = addr.values()
    if len(targets) <= cap:
        cells = dict(m.cells)
        for a in targets:
            if a in cells:
                nv = lat.join(cells[a], v)
                if lat.is_top(nv):
                    del cells[a]
                else:
                    cells[a] = nv
        return AbsMemory(cells), alarms
    cells = {a: c for a, c in m.cells.items() if a not in addr}
    return AbsMemory(cells), alarms


def load(m: AbsMemory, addr: BitvecAbs, lat=NUMERIC):
    """Join of every cell ``addr`` may denote; an untracked candidate gives ⊤."""
    if addr.is_bottom:
        return BitvecAbs.bottom()
    if addr.is_top:
        return lat.top
    out = None
    for a in addr.values():
        if a not in m.cells:
            return lat.top
        out = m.cells[a] if out is None else lat.join(out, m.cells[a])
        if lat.is_top(out):
            return lat.top
    return out


def havoc_range(m: AbsMemory, ranges: Iterable[tuple[int, int]]) -> AbsMemory:
    """Forget every cell inside the half-open ``[base, end)`` ranges."""
    ranges = [(lo, hi) for lo, hi in ranges if lo < hi]
    if not ranges:
        return m
    return AbsMemory({a: v for a, v in m.cells.items()
                      if not any(lo <= a < hi for lo, hi in ranges)})
