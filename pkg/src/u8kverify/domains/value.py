"""Reduced product of unsigned interval, signed interval, congruence and a small value set.

An element is kept in reduced form as the bitmask of its concretization
(bit ``x`` set iff ``x`` is a possible value). Every mask produced by this
module is *representable*: either it has at most ``K`` members (the value-set
component is present and exact) or it is precisely the intersection of an
unsigned interval, a signed interval and a congruence class.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable, NamedTuple

from ..machine import FLAG_C, FLAG_Z, Op, alu

FULL = (1 << 256) - 1
DEFAULT_VSET_CAP = 16
_vset_cap = DEFAULT_VSET_CAP

U_THRESHOLDS = (0, 1, 7, 127, 255)
S_THRESHOLDS = (-128, -1, 0, 1, 7, 127)


def set_vset_cap(k: int) -> int:
    """Change the value-set cap K; returns the previous value."""
    global _vset_cap
    old, _vset_cap = _vset_cap, int(k)
    return old


def vset_cap() -> int:
    return _vset_cap


def _range_mask(lo: int, hi: int) -> int:
    if lo > hi:
        return 0
    return ((1 << (hi + 1)) - 1) ^ ((1 << lo) - 1)


def _signed_mask(lo: int, hi: int) -> int:
    """Mask of unsigned bytes whose signed reading lies in [lo, hi]."""
    if lo > hi:
        return 0
    m = 0
    if hi >= 0:
        m |= _range_mask(max(lo, 0), hi)
    if lo < 0:
        m |= _range_mask(lo + 256, min(hi, -1) + 256)
    return m


@lru_cache(maxsize=None)
def _cong_mask(mod: int, res: int) -> int:
    m = 0
    for x in range(res, 256, mod):
        m |= 1 << x
    return m


def _members(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def _to_signed(x: int) -> int:
    return x - 256 if x >= 128 else x


def _umin(mask: int) -> int:
    return (mask & -mask).bit_length() - 1


def _umax(mask: int) -> int:
    return mask.bit_length() - 1


def _smin(mask: int) -> int:
    neg = mask >> 128
    return _umin(neg) - 128 if neg else _umin(mask)


def _smax(mask: int) -> int:
    pos = mask & _range_mask(0, 127)
    return _umax(pos) if pos else _umax(mask) - 256


def _cong_of(mask: int) -> tuple[int, int]:
    """Tightest (modulus, residue) containing the set; modulus divides 256."""
    xs = _members(mask)
    x0 = xs[0]
    g = 256
    for x in xs[1:]:
        g = math.gcd(g, x - x0)
        if g == 1:
            return 1, 0
    return g, x0 % g


def _hull(mask: int) -> int:
    """Intersection of the tightest unsigned interval, signed interval and congruence."""
    if not mask:
        return 0
    mod, res = _cong_of(mask)
    return (
        _range_mask(_umin(mask), _umax(mask))
        & _signed_mask(_smin(mask), _smax(mask))
        & _cong_mask(mod, res)
    )


def _normalize(mask: int) -> int:
    mask &= FULL
    if mask.bit_count() <= _vset_cap:
        return mask
    return _hull(mask)


class BitvecAbs:
    """An abstract 8-bit value. Immutable; compare with ``==``/``leq``."""

    __slots__ = ("mask",)

    def __init__(self, mask: int, *, _normalized: bool = False):
        object.__setattr__(self, "mask", mask if _normalized else _normalize(mask))

    def __setattr__(self, *_):
        raise AttributeError("BitvecAbs is immutable")

    # -- construction
    @classmethod
    def top(cls) -> "BitvecAbs":
        return _TOP

    @classmethod
    def bottom(cls) -> "BitvecAbs":
        return _BOT

    @classmethod
    def const(cls, v: int) -> "BitvecAbs":
        return cls(1 << (v & 0xFF), _normalized=True)

    @classmethod
    def of(cls, values: Iterable[int]) -> "BitvecAbs":
        m = 0
        for v in values:
            m |= 1 << (v & 0xFF)
        return cls(m)

    @classmethod
    def urange(cls, lo: int, hi: int) -> "BitvecAbs":
        return cls(_range_mask(max(lo, 0), min(hi, 255)))

    @classmethod
    def srange(cls, lo: int, hi: int) -> "BitvecAbs":
        return cls(_signed_mask(max(lo, -128), min(hi, 127)))

    @classmethod
    def congruence(cls, mod: int, res: int) -> "BitvecAbs":
        return cls(_cong_mask(mod, res % mod))

    @classmethod
    def product(cls, ui=(0, 255), si=(-128, 127), cong=(1, 0)) -> "BitvecAbs":
        """Build from explicit components (reduced on construction)."""
        return cls(_range_mask(*ui) & _signed_mask(*si) & _cong_mask(cong[0], cong[1] % cong[0]))

    # -- views
    @property
    def is_bottom(self) -> bool:
        return self.mask == 0

    @property
    def is_top(self) -> bool:
        return self.mask == FULL

    def __len__(self) -> int:
        return self.mask.bit_count()

    def __contains__(self, v: int) -> bool:
        return bool(self.mask >> (v & 0xFF) & 1)

    def values(self) -> list[int]:
        return _members(self.mask)

    @property
    def singleton(self) -> int | None:
        m = self.mask
        return _umin(m) if m and m & (m - 1) == 0 else None

    @property
    def vset(self) -> frozenset[int] | None:
        return frozenset(_members(self.mask)) if len(self) <= _vset_cap else None

    @property
    def uival(self) -> tuple[int, int] | None:
        return None if self.is_bottom else (_umin(self.mask), _umax(self.mask))

    @property
    def sival(self) -> tuple[int, int] | None:
        return None if self.is_bottom else (_smin(self.mask), _smax(self.mask))

    @property
    def cong(self) -> tuple[int, int] | None:
        return None if self.is_bottom else _cong_of(self.mask)

    # -- lattice
    def leq(self, other: "BitvecAbs") -> bool:
        return self.mask & ~other.mask == 0

    def join(self, other: "BitvecAbs") -> "BitvecAbs":
        return join(self, other)

    def meet(self, other: "BitvecAbs") -> "BitvecAbs":
        return BitvecAbs(self.mask & other.mask)

    def __eq__(self, other) -> bool:
        return isinstance(other, BitvecAbs) and self.mask == other.mask

    def __hash__(self) -> int:
        return hash(self.mask)

    def __repr__(self) -> str:
        return f"BitvecAbs({self})"

    def __str__(self) -> str:
        if self.is_bottom:
            return "⊥"
        if self.is_top:
            return "⊤"
        if len(self) <= _vset_cap:
            return "{" + ",".join(f"{v:#04x}" for v in self.values()) + "}"
        lo, hi = self.uival
        parts = [f"[{lo:#04x},{hi:#04x}]"]
        slo, shi = self.sival
        if (slo, shi) != (_to_signed(lo), _to_signed(hi)) or lo < 128 <= hi:
            parts.append(f"s[{slo},{shi}]")
        m, r = self.cong
        if m > 1:
            parts.append(f"{m}r{r}")
        return " ".join(parts)


_TOP = BitvecAbs(FULL, _normalized=True)
_BOT = BitvecAbs(0, _normalized=True)


def join(a: BitvecAbs, b: BitvecAbs) -> BitvecAbs:
    """Least upper bound in the product; value sets survive while ≤ K."""
    return BitvecAbs(a.mask | b.mask)


def _next_up(v: int, ths) -> int:
    return next(t for t in ths if t >= v)


def _next_down(v: int, ths) -> int:
    return next(t for t in reversed(ths) if t <= v)


def widen(a: BitvecAbs, b: BitvecAbs) -> BitvecAbs:
    """Threshold widening: unstable bounds jump to the next threshold.

    The value-set component is dropped as soon as the bound grows; an
    unstable congruence goes straight to ⊤.
    """
    if a.is_bottom:
        return b
    if b.leq(a):
        return a
    j = a.mask | b.mask
    alo, ahi = a.uival
    ulo, uhi = _umin(j), _umax(j)
    ulo = alo if ulo >= alo else _next_down(ulo, U_THRESHOLDS)
    uhi = ahi if uhi <= ahi else _next_up(uhi, U_THRESHOLDS)
    aslo, ashi = a.sival
    slo, shi = _smin(j), _smax(j)
    slo = aslo if slo >= aslo else _next_down(slo, S_THRESHOLDS)
    shi = ashi if shi <= ashi else _next_up(shi, S_THRESHOLDS)
    mod, res = _cong_of(j)
    if (mod, res) != a.cong:
        mod, res = 1, 0
    m = _range_mask(ulo, uhi) & _signed_mask(slo, shi) & _cong_mask(mod, res)
    m |= j
    # stay out of value-set mode: a widened value is a product, not a set
    return BitvecAbs(_hull(m), _normalized=True)


def widen_sets(a: BitvecAbs, b: BitvecAbs) -> BitvecAbs:
    """Widening used by the fixpoint engine: exact while the union is a value set.

    Value sets of at most K members form a finite-height lattice, so joining
    them cannot loop forever; beyond K this is ``widen``.
    """
    j = a.mask | b.mask
    if j.bit_count() <= _vset_cap:
        return BitvecAbs(j, _normalized=True)
    return widen(a, b)


def narrow(a: BitvecAbs, b: BitvecAbs) -> BitvecAbs:
    """Standard narrowing: the meet (γ only shrinks to b ⊓ a)."""
    return BitvecAbs(a.mask & b.mask)


# ---------------------------------------------------------------------------
# transfer functions


class AluResult(NamedTuple):
    value: BitvecAbs
    maybe_div_zero: bool = False


def _exact(op: Op, a: BitvecAbs, b: BitvecAbs) -> int:
    m = 0
    bs = b.values()
    for x in a.values():
        for y in bs:
            if op is Op.DIV and y == 0:
                continue
            m |= 1 << alu(op, x, y)
    return m


def _add_rule(a: BitvecAbs, b: BitvecAbs, sign: int) -> int:
    (al, ah), (bl, bh) = a.uival, b.uival
    if sign > 0:
        lo, hi = al + bl, ah + bh
    else:
        lo, hi = al - bh, ah - bl
    um = _range_mask(lo & 0xFF, hi & 0xFF) if hi - lo < 256 and (lo >> 8) == (hi >> 8) else FULL
    (sal, sah), (sbl, sbh) = a.sival, b.sival
    if sign > 0:
        slo, shi = sal + sbl, sah + sbh
    else:
        slo, shi = sal - sbh, sah - sbl
    if -128 <= slo and shi <= 127:
        sm = _signed_mask(slo, shi)
    else:
        sm = FULL
    (ma, ra), (mb, rb) = a.cong, b.cong
    g = math.gcd(ma, mb, 256)
    cm = _cong_mask(g, (ra + sign * rb) % g)
    return um & sm & cm


def _pow2_ceil_mask(v: int) -> int:
    return (1 << v.bit_length()) - 1


def _rule(op: Op, a: BitvecAbs, b: BitvecAbs) -> int:
    if op is Op.ADD:
        return _add_rule(a, b, 1)
    if op is Op.SUB:
        return _add_rule(a, b, -1)
    (al, ah), (bl, bh) = a.uival, b.uival
    if op is Op.AND:
        return _range_mask(0, min(ah, bh))
    if op is Op.OR:
        return _range_mask(max(al, bl), _pow2_ceil_mask(max(ah, bh)))
    if op is Op.XOR:
        return _range_mask(0, _pow2_ceil_mask(max(ah, bh)))
    if op in (Op.SHL, Op.SHR):
        m = 0
        for k in sorted({y & 7 for y in b.values()}):
            if op is Op.SHR:
                m |= _range_mask(al >> k, ah >> k)
            else:
                ma, ra = a.cong
                g = math.gcd(ma << k, 256)
                cm = _cong_mask(g, (ra << k) % g)
                um = _range_mask(al << k, ah << k) if ah << k < 256 else FULL
                m |= cm & um
        return m
    if op is Op.DIV:
        bl = max(bl, 1)
        if bh == 0:
            return 0
        return _range_mask(al // bh, ah // bl)
    raise ValueError(op)


def _cmp_flags(a: BitvecAbs, b: BitvecAbs) -> int:
    (al, ah), (bl, bh) = a.uival, b.uival
    z_possible = bool(a.mask & b.mask)
    nz_possible = not (a.singleton is not None and a.singleton == b.singleton)
    c_possible = al < bh
    nc_possible = ah >= bl
    m = 0
    for z in ((True,) if not nz_possible else (False, True) if z_possible else (False,)):
        for c in (False, True):
            if (c and not c_possible) or (not c and not nc_possible) or (z and c):
                continue
            m |= 1 << ((FLAG_Z if z else 0) | (FLAG_C if c else 0))
    return m


def transfer_alu(op: Op, a: BitvecAbs, b: BitvecAbs) -> AluResult:
    """Sound 8-bit transfer for the ALU ops.

    CMP yields the possible {Z, C} flag-bit patterns. DIV excludes a zero
    divisor from the result and reports it through ``maybe_div_zero``.
    """
    maybe_dz = op is Op.DIV and 0 in b
    if a.is_bottom or b.is_bottom:
        return AluResult(_BOT, False)
    if op is Op.CMP:
        return AluResult(BitvecAbs(_cmp_flags(a, b)), False)
    if len(a) * len(b) <= 256:
        return AluResult(BitvecAbs(_exact(op, a, b)), maybe_dz)
    return AluResult(BitvecAbs(_rule(op, a, b)), maybe_dz)


# ---------------------------------------------------------------------------
# guards (used for branch refinement)


def refine_lt(a: BitvecAbs, b: BitvecAbs) -> tuple[BitvecAbs, BitvecAbs]:
    """Refine (a, b) under the unsigned guard a < b."""
    if a.is_bottom or b.is_bottom:
        return _BOT, _BOT
    a2 = a.meet(BitvecAbs(_range_mask(0, b.uival[1] - 1)))
    if a2.is_bottom:
        return _BOT, _BOT
    b2 = b.meet(BitvecAbs(_range_mask(a2.uival[0] + 1, 255)))
    return (a2, b2) if not b2.is_bottom else (_BOT, _BOT)


def refine_ge(a: BitvecAbs, b: BitvecAbs) -> tuple[BitvecAbs, BitvecAbs]:
    """Refine (a, b) under the unsigned guard a >= b."""
    if a.is_bottom or b.is_bottom:
        return _BOT, _BOT
    a2 = a.meet(BitvecAbs(_range_mask(b.uival[0], 255)))
    if a2.is_bottom:
        return _BOT, _BOT
    b2 = b.meet(BitvecAbs(_range_mask(0, a2.uival[1])))
    return (a2, b2) if not b2.is_bottom else (_BOT, _BOT)


def refine_eq(a: BitvecAbs, b: BitvecAbs) -> tuple[BitvecAbs, BitvecAbs]:
    m = a.meet(b)
    return m, m


def refine_ne(a: BitvecAbs, b: BitvecAbs) -> tuple[BitvecAbs, BitvecAbs]:
    a2, b2 = a, b
    if b.singleton is not None:
        a2 = BitvecAbs(a.mask & ~(1 << b.singleton))
    if a.singleton is not None:
        b2 = BitvecAbs(b.mask & ~(1 << a.singleton))
    if a2.is_bottom or b2.is_bottom:
        return _BOT, _BOT
    return a2, b2
