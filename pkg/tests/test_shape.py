import random

import pytest
from hypothesis import given, settings, strategies as st

from u8kverify.alarms import AlarmKind
from u8kverify.domains.shape import (
    Label, Labeling, PointerTo, ScalarOf, TypedLattice, build_labeling, check_separation,
    check_welltyped, derive_subtyping, interpret, transitive_reduction, typed_load, typed_store,
)
from u8kverify.domains.typesys import (
    IllFormedPredicate, ParseError, UnboundParam, UndefinedTypeName, parse_annotations,
)
from u8kverify.domains.value import BitvecAbs
from u8kverify.machine import load_images

L = Label

# Subtyping inside a Thread[2] region, transcribed from the published lattice
# drawing (lower label first).
GOLDEN_EDGES = {
    (L("Int8"), L("Word")),
    (L("Memory_Table*"), L("Word")),
    (L("Thread*"), L("Word")),
    (L("Context", 2), L("Flags")),
    (L("Thread"), L("Memory_Table*")),
    (L("Thread", 4), L("Thread*")),
    (L("Context"), L("Int8")),
    (L("Context", 1), L("Int8")),
    (L("Flags"), L("Int8")),
    (L("Thread", 1), L("Context")),
    (L("Thread", 2), L("Context", 1)),
    (L("Thread", 3), L("Context", 2)),
} | {(L("Thread[2]", k), L("Thread", k % 5)) for k in range(10)}


@pytest.fixture(scope="module")
def dump(kernel, user):
    return load_images(kernel, user).mem


@pytest.fixture(scope="module")
def example_lab(env, dump):
    lab, bindings, problems = build_labeling(env, dump)
    assert not problems
    return lab, bindings


def test_parse_interface_types(env):
    assert set(env.defs) == {"Flags", "Context", "Segment", "Memory_Table", "Thread", "Interface"}
    assert env.sizeof("Thread") == 5
    assert env.sizeof("Context") == 3


def test_scalar_alias():
    e = parse_annotations("type T = Int8;")
    assert e.sizeof("T") == 1


@pytest.mark.parametrize("src, exc", [
    ("type A = struct { B x; }", UndefinedTypeName),
    ("type A = struct { Int8 x; ", ParseError),
    ("type A = Int8 with self.nope == 0;", IllFormedPredicate),
])
def test_parse_errors(src, exc):
    with pytest.raises(exc):
        parse_annotations(src)


def test_parse_error_has_position():
    with pytest.raises(ParseError) as ei:
        parse_annotations("type A = struct {\n  Int8 x\n  Int8 ; }")
    assert ei.value.line >= 2


def test_nullable_pointer(env):
    e = parse_annotations("type N = struct { Int8 v; nullable N *next; };")
    lab = Labeling({0x10: L("N"), 0x11: L("N", 1)})
    assert interpret(e, lab, L("N", 1)) == {0, 0x10}


def test_subtyping_golden(env):
    sub = derive_subtyping(env, {"nb_threads": 2})
    roots = [L("Thread[2]", k) for k in range(10)]
    assert transitive_reduction(sub.edges(roots)) == GOLDEN_EDGES


def test_subtyping_examples(env):
    sub = derive_subtyping(env, {"nb_threads": 2})
    assert sub.leq(L("Thread", 3), L("Context", 2))
    assert sub.leq(L("Context", 2), L("Flags"))
    assert sub.leq(L("Thread[2]", 4), L("Thread*"))
    for a, b in GOLDEN_EDGES:
        assert sub.leq(a, a) and sub.leq(b, b)
        assert not sub.leq(b, a)


def test_interpret_examples(env, example_lab):
    lab, b = example_lab
    assert interpret(env, lab, "Context*", b) == {0xA3, 0xA8}
    assert interpret(env, lab, "Int8", b) == set(range(256))
    assert interpret(env, lab, "Flags", b) == set(range(128))
    assert interpret(env, lab, "Thread*", b) == {0xA2, 0xA7}


def test_interpret_needs_bindings(env):
    with pytest.raises(UnboundParam):
        interpret(env, Labeling(), L("Interface", 1), {})


def test_example_welltyped_and_separated(env, dump, example_lab):
    lab, b = example_lab
    assert check_welltyped(env, lab, dump, b) == []
    assert check_separation(lab, derive_subtyping(env, b)) == []
    # every pair of labelled addresses: incomparable labels never share an address
    sub = derive_subtyping(env, b)
    for a, labs in lab.claims.items():
        for x in labs:
            for y in labs:
                assert sub.comparable(x, y)


def test_corrupted_dump(env, dump, example_lab):
    lab, b = example_lab
    bad = bytearray(dump)
    bad[0xA6] = 0xAE
    v = check_welltyped(env, lab, bad, b)
    assert [x.address for x in v] == [0xA6]
    assert v[0].admissible == {0xA2, 0xA7}


def test_empty_labeling_is_welltyped(env, dump):
    assert check_welltyped(env, Labeling(), dump) == []


def test_interpret_antitone(env, example_lab):
    lab, b = example_lab
    sub = derive_subtyping(env, b)
    labels = set(lab.labels.values())
    for s in labels:
        vs = interpret(env, lab, s, b, sub)
        for t in sub.supers(s):
            assert vs <= interpret(env, lab, t, b, sub)


@pytest.fixture(scope="module")
def lat(env, example_lab):
    lab, b = example_lab
    return TypedLattice(env, b, concrete=lab)


def test_typed_loads(lat):
    assert typed_load(lat, PointerTo("Thread"))[0] == PointerTo("Memory_Table")
    assert typed_load(lat, PointerTo("Context", 2))[0] == ScalarOf("Flags")
    assert typed_load(lat, PointerTo("Thread", 4))[0] == PointerTo("Thread")
    _, al = typed_load(lat, PointerTo("Thread", 4, nullable=True))
    assert [k for k, _ in al] == [AlarmKind.MaybeNullDeref]


def test_typed_stores(lat):
    assert typed_store(lat, PointerTo("Context", 2), ScalarOf("Flags")) == []
    al = typed_store(lat, PointerTo("Context", 2), BitvecAbs.top())
    assert [k for k, _ in al] == [AlarmKind.TypingViolationStore]
    assert typed_store(lat, PointerTo("Thread", 4), PointerTo("Thread")) == []
    al = typed_store(lat, PointerTo("Thread", 4), PointerTo("Context"))
    assert [k for k, _ in al] == [AlarmKind.TypingViolationStore]


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_admitted_stores_preserve_welltypedness(env, dump, example_lab, lat, rng):
    lab, b = example_lab
    addrs = sorted(lab.labels)
    mem = bytearray(dump)
    for _ in range(8):
        a = rng.choice(addrs)
        v = rng.randrange(256)
        if typed_store(lat, PointerTo(lab[a].tname, lab[a].offset), BitvecAbs.const(v)):
            continue
        mem[a] = v
        assert check_welltyped(env, lab, mem, b) == []
