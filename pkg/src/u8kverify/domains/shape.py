"""Type-based weak shape domain.

Addresses carry labels ``t_o`` (type name, byte offset). Labels are ordered
by a subtyping relation derived from the annotated types: a type containing
``t`` at offset ``o`` has ``s_{o+k} ⊑ t_k``, a refinement is below its base,
``Int8`` and every pointer type are below ``Word``. A type denotes the values
admissible for a byte so labelled; pointers denote addresses whose label is
below the pointed-to type.

Registers and kernel cells may hold typed abstractions (``PointerTo`` /
``ScalarOf``); the contents of typed user memory are never tracked, only
kept admissible by checking every store.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import lru_cache

from ..alarms import AlarmKind
from .typesys import (
    PBin, PName, PSelf, SCALARS, TArray, TNamed, TPtr, TRefined, TScalar, TStruct,
    TypeEnv, UnboundParam, conjuncts, eval_pred, pred_fields,
)
from .value import BitvecAbs, join as vjoin, widen_sets as vwiden

ALL_VALUES = frozenset(range(256))


@dataclass(frozen=True, order=True)
class Label:
    tname: str
    offset: int = 0

    def __str__(self):
        return f"{self.tname}_{self.offset}"


def _key(t) -> str:
    return t.name if isinstance(t, TNamed) else t.key


# ---------------------------------------------------------------------------
# subtyping


class Subtyping:
    """The ⊑ relation over labels, computed on demand from the type definitions."""

    def __init__(self, env: TypeEnv, bindings: dict[str, int] | None = None):
        self.env = env
        self.bindings = dict(bindings or {})
        self._supers: dict[Label, frozenset[Label]] = {}

    def resolve(self, key: str) -> str:
        return self.env.resolve_key(key, self.bindings)

    def direct_supers(self, lab: Label) -> list[Label]:
        key, k = lab.tname, lab.offset
        if key == "Int8":
            return [Label("Word", 0)]
        if key == "Word":
            return []
        t = self.env.expr(key)
        if isinstance(t, TScalar):
            return [Label(t.name, k)]
        if isinstance(t, TNamed):
            return [Label(t.name, k)]
        if isinstance(t, TPtr):
            if self.env.is_named(key):
                return [Label(self.resolve(t.key), k)]
            return [Label("Word", 0)]
        if isinstance(t, TRefined):
            return [Label(self.resolve(_key(t.base)), k)]
        if isinstance(t, TStruct):
            off = 0
            for _, ft in t.fields:
                size = self.env.sizeof(ft, self.bindings)
                if size is None:
                    return []
                if off <= k < off + size:
                    return [Label(self.resolve(_key(ft)), k - off)]
                off += size
            return []
        if isinstance(t, TArray):
            es = self.env.sizeof(t.elem, self.bindings)
            return [Label(self.resolve(_key(t.elem)), k % es)] if es else []
        return []

    def supers(self, lab: Label) -> frozenset[Label]:
        """Reflexive-transitive upward closure."""
        got = self._supers.get(lab)
        if got is None:
            seen = {lab}
            todo = [lab]
            while todo:
                for s in self.direct_supers(todo.pop()):
                    if s not in seen:
                        seen.add(s)
                        todo.append(s)
            got = frozenset(seen)
            self._supers[lab] = got
        return got

    def leq(self, a: Label, b: Label) -> bool:
        return b in self.supers(a)

    def comparable(self, a: Label, b: Label) -> bool:
        return self.leq(a, b) or self.leq(b, a)

    def edges(self, roots) -> set[tuple[Label, Label]]:
        """Direct edges reachable upwards from ``roots``."""
        out, seen, todo = set(), set(), list(roots)
        while todo:
            lab = todo.pop()
            if lab in seen:
                continue
            seen.add(lab)
            for s in self.direct_supers(lab):
                out.add((lab, s))
                todo.append(s)
        return out

    def common_supers(self, a: Label, b: Label) -> list[Label]:
        """Minimal common upper bounds, sorted for determinism."""
        common = self.supers(a) & self.supers(b)
        return sorted(c for c in common
                      if not any(d != c and self.leq(d, c) for d in common))


def derive_subtyping(env: TypeEnv, bindings: dict[str, int] | None = None) -> Subtyping:
    return Subtyping(env, bindings)


def transitive_reduction(edges: set[tuple[Label, Label]]) -> set[tuple[Label, Label]]:
    succ: dict[Label, set[Label]] = {}
    for a, b in edges:
        succ.setdefault(a, set()).add(b)

    def reach(a, skip):
        seen, todo = set(), [s for s in succ.get(a, ()) if (a, s) != skip]
        while todo:
            x = todo.pop()
            if x not in seen:
                seen.add(x)
                todo.extend(succ.get(x, ()))
        return seen

    return {(a, b) for a, b in edges if a != b and b not in reach(a, (a, b))}


# ---------------------------------------------------------------------------
# labelings


@dataclass
class Labeling:
    """Concrete address -> label map, plus every claim made on each address."""

    labels: dict[int, Label] = field(default_factory=dict)
    claims: dict[int, list[Label]] = field(default_factory=dict)

    def __getitem__(self, addr: int) -> Label:
        return self.labels[addr]

    def get(self, addr: int) -> Label | None:
        return self.labels.get(addr)

    def __contains__(self, addr: int) -> bool:
        return addr in self.labels

    def __len__(self):
        return len(self.labels)

    def addresses_below(self, sub: Subtyping, target: Label) -> frozenset[int]:
        return frozenset(a for a, lab in self.labels.items() if sub.leq(lab, target))


@dataclass(frozen=True)
class TypingViolation:
    address: int
    label: Label | None
    value: int
    admissible: frozenset[int]
    reason: str = "inadmissible value"

    def __str__(self):
        lab = self.label if self.label is not None else "-"
        return f"{self.address:#04x}: {lab} holds {self.value:#04x} ({self.reason})"


def _self_eq_param(pred) -> str | None:
    """``self == NAME`` (either orientation) -> NAME."""
    if isinstance(pred, PBin) and pred.op == "==":
        l, r = pred.left, pred.right
        if isinstance(l, PSelf) and l.field is None and isinstance(r, PName):
            return r.name
        if isinstance(r, PSelf) and r.field is None and isinstance(l, PName):
            return l.name
    return None


def _lookup(env: TypeEnv, bindings: dict[str, int]):
    def look(name):
        if name in bindings:
            return bindings[name], bindings[name]
        v = env.params.get(name)
        if v is not None:
            return v, v
        raise UnboundParam(name)
    return look


def _bind_from_struct(env: TypeEnv, key: str, addr: int, mem, bindings: dict[str, int], base=0):
    """Bind parameters fixed by ``self == param`` fields of the struct at ``addr``."""
    for _, off, ft in env.field_layout(key):
        if isinstance(ft, TRefined):
            name = _self_eq_param(ft.pred)
            if name is not None and name not in bindings and env.params.get(name) is None:
                bindings[name] = mem[(addr + base + off) & 0xFF]
        elif isinstance(ft, TNamed) and env.field_layout(ft.name):
            _bind_from_struct(env, ft.name, addr, mem, bindings, base + off)


def _pointer_supers(sub: Subtyping, lab: Label) -> list[TPtr]:
    out = []
    for s in sub.supers(lab):
        if s.offset == 0 and s.tname not in SCALARS:
            t = sub.env.expr(s.tname)
            if isinstance(t, TPtr) and not sub.env.is_named(s.tname):
                out.append(t)
    return sorted(out, key=lambda t: t.key)


def build_labeling(env: TypeEnv, mem, bindings: dict[str, int] | None = None,
                   roots: list[tuple[int, str]] = ()):
    """Label a concrete memory from the declared regions, following typed pointers.

    Returns ``(labeling, bindings, problems)``. Placement is deterministic:
    declared concrete regions first, then pointer targets in ascending order
    of the pointer's address. A pointer whose target conflicts with an
    existing label is left for the well-typedness check to report.
    """
    bindings = dict(bindings or {})
    for n, v in env.params.items():
        if v is not None:
            bindings.setdefault(n, v)
    lab = Labeling()
    problems: list[TypingViolation] = []
    sub = Subtyping(env, bindings)

    def fits(addr: int, key: str) -> bool:
        size = env.sizeof(key, bindings)
        if size is None or addr + size > 256:
            return False
        for k in range(size):
            old = lab.get(addr + k)
            if old is not None and not sub.comparable(old, Label(key, k)):
                return False
        return True

    def place(addr: int, key: str) -> bool:
        _bind_from_struct(env, key, addr, mem, bindings)
        key = env.resolve_key(key, bindings)
        sub.bindings = bindings
        size = env.sizeof(key, bindings)
        if size is None:
            problems.append(TypingViolation(addr, None, mem[addr], frozenset(),
                                            f"size of {key} depends on an unbound parameter"))
            return False
        if addr + size > 256:
            problems.append(TypingViolation(addr, Label(key, 0), mem[addr], frozenset(),
                                            "region runs past the address space"))
            return False
        for k in range(size):
            a, new = addr + k, Label(key, k)
            lab.claims.setdefault(a, []).append(new)
            old = lab.get(a)
            if old is None or sub.leq(new, old):
                lab.labels[a] = new
            elif not sub.leq(old, new):
                problems.append(TypingViolation(a, old, mem[a], frozenset(),
                                                f"overlapping regions {old} and {new}"))
        return True

    for addr, key in roots:
        place(addr, _key(key) if not isinstance(key, str) else key)
    for _, t, addr in env.regions:
        if addr is not None:
            place(addr, _key(t))

    done: set[int] = set()
    heap = sorted(lab.labels)
    while heap:
        a = heapq.heappop(heap)
        if a in done:
            continue
        done.add(a)
        for ptr in _pointer_supers(sub, lab[a]):
            v = mem[a]
            if v == 0 and ptr.nullable:
                continue
            target = env.resolve_key(_key(ptr.target), bindings)
            if v not in lab and fits(v, target):
                before = set(lab.labels)
                place(v, target)
                for b in set(lab.labels) - before:
                    heapq.heappush(heap, b)

    for name, t, addr in env.regions:
        if addr is None:
            key = env.resolve_key(_key(t), bindings)
            if not any(l == Label(key, 0) for l in lab.labels.values()):
                problems.append(TypingViolation(0, Label(key, 0), 0, frozenset(),
                                                f"region {name} is not reachable from the interface"))
    return lab, bindings, problems


# ---------------------------------------------------------------------------
# interpretation


def _own_values(env: TypeEnv, sub: Subtyping, lab: Labeling, l: Label,
                bindings: dict[str, int]) -> frozenset[int] | None:
    """Constraint contributed by ``l`` itself (None: unconstrained)."""
    if l.tname in SCALARS:
        return None
    t = env.expr(l.tname)
    if isinstance(t, TPtr) and not env.is_named(l.tname):
        target = Label(env.resolve_key(_key(t.target), bindings), 0)
        vals = set(lab.addresses_below(sub, target))
        if t.nullable:
            vals.add(0)
        return frozenset(vals)
    if isinstance(t, TRefined):
        return _refined_values(env, t, l.offset, _lookup(env, bindings), exact=True)
    return None


def _refined_values(env: TypeEnv, t: TRefined, offset: int, look, exact: bool, under=False):
    """Values at ``offset`` allowed by the refinement (3-valued when not exact)."""
    layout = env.field_layout(_key(t.base)) if not isinstance(t.base, (TScalar,)) else []
    if not layout:
        preds = [t.pred]
        fname = None
    else:
        fname = next((n for n, off, ft in layout
                      if off == offset and env.sizeof(ft) == 1), None)
        if fname is None:
            return None
        preds = [c for c in conjuncts(t.pred) if pred_fields(c) == {fname}]
        if not preds:
            return None
    out = set()
    for x in range(256):
        sv = {fname: (x, x)} if fname else (x, x)
        ok = True
        for p in preds:
            r = eval_pred(p, sv, look)
            if r is False or (r is None and (exact or under)):
                ok = False
                break
        if ok:
            out.add(x)
    return frozenset(out)


def interpret(env: TypeEnv, lab: Labeling, t, bindings: dict[str, int] | None = None,
              sub: Subtyping | None = None) -> frozenset[int]:
    """Admissible values of type key or label ``t`` under a concrete labeling."""
    bindings = dict(bindings or {})
    for n, v in env.params.items():
        if v is not None:
            bindings.setdefault(n, v)
    sub = sub or Subtyping(env, bindings)
    l = t if isinstance(t, Label) else Label(env.resolve_key(t, bindings), 0)
    out = ALL_VALUES
    for s in sorted(sub.supers(l)):
        own = _own_values(env, sub, lab, s, bindings)
        if own is not None:
            out = out & own
    return out


def check_welltyped(env: TypeEnv, lab: Labeling, mem, bindings: dict[str, int] | None = None,
                    sub: Subtyping | None = None) -> list[TypingViolation]:
    bindings = dict(bindings or {})
    for n, v in env.params.items():
        if v is not None:
            bindings.setdefault(n, v)
    sub = sub or Subtyping(env, bindings)
    out = []
    cache: dict[Label, frozenset[int]] = {}
    for a in sorted(lab.labels):
        l = lab[a]
        if l not in cache:
            cache[l] = interpret(env, lab, l, bindings, sub)
        if mem[a] not in cache[l]:
            out.append(TypingViolation(a, l, mem[a], cache[l]))
    return out


def check_separation(lab: Labeling, sub: Subtyping) -> list[tuple[int, Label, Label]]:
    """Addresses claimed by two regions whose labels are not subtype-related."""
    out = []
    for a in sorted(lab.claims):
        cs = lab.claims[a]
        for i, x in enumerate(cs):
            for y in cs[i + 1:]:
                if not sub.comparable(x, y):
                    out.append((a, x, y))
    return out


# ---------------------------------------------------------------------------
# typed abstract values


@dataclass(frozen=True)
class TypedValue:
    """``ptr``: addresses labelled below ``tname_offset``; ``scalar``: values in ⟦tname_offset⟧."""

    role: str  # "ptr" | "scalar"
    tname: str
    offset: int = 0
    nullable: bool = False

    @property
    def label(self) -> Label:
        return Label(self.tname, self.offset)

    def __str__(self):
        if self.role == "ptr":
            return f"{'nullable ' if self.nullable else ''}PointerTo({self.tname},{self.offset})"
        return f"ScalarOf({self.tname}" + (f",{self.offset})" if self.offset else ")")


def PointerTo(tname: str, offset: int = 0, nullable: bool = False) -> TypedValue:
    return TypedValue("ptr", tname, offset, nullable)


def ScalarOf(tname: str, offset: int = 0) -> TypedValue:
    return TypedValue("scalar", tname, offset)


class TypedLattice:
    """Value lattice mixing numeric abstractions and typed facts.

    Numeric projections of typed values use interval reasoning over the
    parameters: ``over`` for what a value may be, ``under`` for what a
    location is guaranteed to accept.
    """

    top = BitvecAbs.top()

    def __init__(self, env: TypeEnv, bindings: dict[str, int] | None = None,
                 concrete: Labeling | None = None):
        self.env = env
        self.bindings = {n: v for n, v in env.params.items() if v is not None}
        self.bindings.update(bindings or {})
        self.sub = Subtyping(env, self.bindings)
        self.concrete = concrete or Labeling()
        self._cache: dict = {}

    # -- label facts
    def _look(self, name):
        if name in self.bindings:
            v = self.bindings[name]
            return v, v
        if name in self.env.params:
            return 0, 255
        raise UnboundParam(name)

    def _constrained(self, l: Label) -> list[Label]:
        out = []
        for s in sorted(self.sub.supers(l)):
            if s.tname in SCALARS:
                continue
            t = self.env.expr(s.tname)
            if (isinstance(t, TPtr) and not self.env.is_named(s.tname)) or isinstance(t, TRefined):
                out.append(s)
        return out

    def bounds(self, l: Label) -> tuple[BitvecAbs, BitvecAbs]:
        """(over, under) numeric approximations of ⟦l⟧."""
        key = ("b", l)
        if key in self._cache:
            return self._cache[key]
        over = under = frozenset(range(256))
        for s in self._constrained(l):
            t = self.env.expr(s.tname)
            if isinstance(t, TPtr):
                target = Label(self.sub.resolve(_key(t.target)), 0)
                known = set(self.concrete.addresses_below(self.sub, target))
                if t.nullable:
                    known.add(0)
                under = under & frozenset(known)
                # addresses of symbolic regions are unknown: no numeric bound
            else:
                o = _refined_values(self.env, t, s.offset, self._look, exact=False)
                u = _refined_values(self.env, t, s.offset, self._look, exact=False, under=True)
                if o is not None:
                    over = over & o
                if u is not None:
                    under = under & u
        res = BitvecAbs.of(over), BitvecAbs.of(under)
        self._cache[key] = res
        return res

    def leaf_type(self, l: Label) -> Label | None:
        """Most specific one-byte type above ``l`` (the type of the byte's content)."""
        leaves = []
        for s in self.sub.supers(l):
            if s.offset != 0:
                continue
            if s.tname in SCALARS:
                leaves.append(s)
                continue
            t = self.env.expr(s.tname)
            if self.env.field_layout(s.tname) or isinstance(t, TArray):
                continue
            if self.env.sizeof(s.tname, self.bindings) == 1:
                leaves.append(s)
        best = [x for x in leaves if all(self.sub.leq(x, y) for y in leaves)]
        return best[0] if best else None

    def content(self, l: Label):
        """Abstraction of the byte content at an address labelled ``l``."""
        key = ("c", l)
        if key in self._cache:
            return self._cache[key]
        leaf = self.leaf_type(l)
        res = self.top
        if leaf is not None:
            t = self.env.expr(leaf.tname) if leaf.tname not in SCALARS else TScalar(leaf.tname)
            while isinstance(t, TNamed):
                t = self.env.expr(t.name)
            if isinstance(t, TPtr):
                res = PointerTo(self.sub.resolve(_key(t.target)), 0, t.nullable)
            else:
                lsup = self.sub.supers(leaf)
                if all(c in lsup for c in self._constrained(l)):
                    res = self.top if leaf.tname in SCALARS else ScalarOf(leaf.tname, 0)
                else:
                    res = ScalarOf(l.tname, l.offset)
        self._cache[key] = res
        return res

    # -- lattice interface
    def numeric(self, v) -> BitvecAbs:
        if isinstance(v, BitvecAbs):
            return v
        if v.role == "ptr":
            return self.top
        return self.bounds(v.label)[0]

    def is_top(self, v) -> bool:
        return isinstance(v, BitvecAbs) and v.is_top

    def is_bottom(self, v) -> bool:
        return isinstance(v, BitvecAbs) and v.is_bottom

    def join(self, a, b):
        if a == b:
            return a
        if isinstance(a, BitvecAbs) and a.is_bottom:
            return b
        if isinstance(b, BitvecAbs) and b.is_bottom:
            return a
        if isinstance(a, TypedValue) and isinstance(b, TypedValue) and a.role == b.role:
            cs = self.sub.common_supers(a.label, b.label)
            if a.role == "ptr":
                cs = [c for c in cs if c.tname not in SCALARS]
            if cs:
                c = cs[0]
                return TypedValue(a.role, c.tname, c.offset, a.nullable or b.nullable)
        for x, y in ((a, b), (b, a)):
            if isinstance(x, TypedValue) and x.role == "ptr" and isinstance(y, BitvecAbs) \
                    and y.singleton == 0:
                return PointerTo(x.tname, x.offset, True)
        return vjoin(self.numeric(a), self.numeric(b))

    def widen(self, a, b):
        if isinstance(a, BitvecAbs) and isinstance(b, BitvecAbs):
            return vwiden(a, b)
        j = self.join(a, b)
        if isinstance(j, BitvecAbs) and not (isinstance(a, BitvecAbs) and j == a):
            return self.top if not j.leq(self.numeric(a)) else j
        return j

    def leq(self, a, b) -> bool:
        if isinstance(b, BitvecAbs) and b.is_top:
            return True
        if isinstance(a, BitvecAbs) and a.is_bottom:
            return True
        if isinstance(a, TypedValue) and isinstance(b, TypedValue):
            if a.role != b.role:
                return False
            if a.nullable and not b.nullable:
                return False
            return self.sub.leq(a.label, b.label)
        if isinstance(b, BitvecAbs):
            return self.numeric(a).leq(b)
        # numeric below typed
        if b.role == "ptr":
            return a.leq(self._ptr_under(b))
        return a.leq(self.bounds(b.label)[1])

    def _ptr_under(self, p: TypedValue) -> BitvecAbs:
        vals = set(self.concrete.addresses_below(self.sub, p.label))
        if p.nullable:
            vals.add(0)
        return BitvecAbs.of(vals)

    # -- pointer arithmetic
    def offset_by(self, p: TypedValue, delta: int):
        """``p + delta`` when it stays inside the same region, else None."""
        new = p.offset + delta
        if new < 0:
            return None
        size = self.env.sizeof(p.tname, self.bindings)
        if size is None:
            t = self.env.expr(p.tname)
            if isinstance(t, TArray):
                size = self.env.sizeof(t.elem, self.bindings)  # element 0 always exists
        if size is None or new >= size:
            return None
        return PointerTo(p.tname, new, False)

    # -- checks
    def admits(self, dest: Label, v) -> bool:
        """Every value abstracted by ``v`` is admissible at a byte labelled ``dest``."""
        if isinstance(v, BitvecAbs):
            return v.leq(self.bounds(dest)[1])
        cons = self._constrained(dest)
        if v.role == "ptr":
            for c in cons:
                t = self.env.expr(c.tname)
                if isinstance(t, TPtr):
                    target = Label(self.sub.resolve(_key(t.target)), 0)
                    if not self.sub.leq(v.label, target) or (v.nullable and not t.nullable):
                        return False
                else:
                    return False
            return True
        vsup = self.sub.supers(v.label)
        over = self.bounds(v.label)[0]
        for c in cons:
            if c in vsup:
                continue
            if not over.leq(self.bounds(c)[1]):
                return False
        return True


def typed_load(lat: TypedLattice, p: TypedValue):
    """Returns ``(content, alarms)``; never reads concrete user memory."""
    alarms = []
    if p.nullable:
        alarms.append((AlarmKind.MaybeNullDeref, f"load through {p} which may be null"))
    return lat.content(p.label), alarms


def typed_store(lat: TypedLattice, p: TypedValue, v) -> list:
    """Alarms for storing ``v`` through ``p`` (empty list: the store preserves typing)."""
    alarms = []
    if p.nullable:
        alarms.append((AlarmKind.MaybeNullDeref, f"store through {p} which may be null"))
    if not lat.admits(p.label, v):
        alarms.append((AlarmKind.TypingViolationStore,
                       f"storing {v} at {p.label} may break well-typedness"))
    return alarms
