"""Annotated interface types: expressions, predicates and the annotation-file parser.

The grammar is C-like::

    type Flags = Int8 with (self & PRIVILEGED) == 0;
    type Thread = struct { Memory_Table *mt; Context ctx; nullable Thread *next; };
    param nb_threads;                    // free symbolic parameter
    param kernel_last_addr = 0xA2;       // kernel-fixed parameter
    region if : Interface @ 0xAC;        // concretely placed region
    region threads : Thread[nb_threads]; // symbolic region
    global cur : Thread* @ 0xA0;         // typed kernel cell at the boot/runtime boundary
    register UFLAGS : Flags;             // typed register at the boot/runtime boundary
    exitpoint 0x1A;
    include "other.types";

Semicolons after type definitions are optional. Free identifiers in array
lengths and predicates are implicitly parameters.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Callable, Union

BUILTIN_CONSTANTS = {"PRIVILEGED": 0x80}
SCALARS = ("Int8", "Word")


class AnnotationError(ValueError):
    def __init__(self, msg: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {msg}" if line else msg)
        self.line, self.col = line, col


class ParseError(AnnotationError):
    pass


class UndefinedTypeName(AnnotationError):
    pass


class IllFormedPredicate(AnnotationError):
    pass


class UnboundParam(KeyError):
    pass


# ---------------------------------------------------------------------------
# predicates


@dataclass(frozen=True)
class PConst:
    value: int

    def __str__(self):
        return f"0x{self.value:02x}" if self.value > 9 else str(self.value)


@dataclass(frozen=True)
class PSelf:
    field: str | None = None

    def __str__(self):
        return "self" if self.field is None else f"self.{self.field}"


@dataclass(frozen=True)
class PName:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class PBin:
    op: str
    left: "Pred"
    right: "Pred"

    def __str__(self):
        return f"({self.left} {self.op} {self.right})"


Pred = Union[PConst, PSelf, PName, PBin]
CMP_OPS = ("==", "!=", "<=", ">=", "<", ">")


def pred_names(p: Pred) -> set[str]:
    if isinstance(p, PName):
        return {p.name}
    if isinstance(p, PBin):
        return pred_names(p.left) | pred_names(p.right)
    return set()


def pred_fields(p: Pred) -> set[str | None]:
    if isinstance(p, PSelf):
        return {p.field}
    if isinstance(p, PBin):
        return pred_fields(p.left) | pred_fields(p.right)
    return set()


def conjuncts(p: Pred) -> list[Pred]:
    if isinstance(p, PBin) and p.op == "&&":
        return conjuncts(p.left) + conjuncts(p.right)
    return [p]


# three-valued evaluation over intervals: values are (lo, hi) pairs of ints,
# booleans are True / False / None (unknown)

def _ival_bin(op: str, a, b):
    (al, ah), (bl, bh) = a, b
    if op == "+":
        return al + bl, ah + bh
    if op == "-":
        return al - bh, ah - bl
    if op == "&":
        if al == ah and bl == bh:
            return al & bl, al & bl
        if al >= 0 and bl >= 0:
            return 0, min(ah, bh)
        return min(al, bl, 0), max(ah, bh)
    raise IllFormedPredicate(f"unsupported operator {op!r}")


def _cmp3(op: str, a, b):
    (al, ah), (bl, bh) = a, b
    if op == "==":
        if al == ah == bl == bh:
            return True
        return None if al <= bh and bl <= ah else False
    if op == "!=":
        r = _cmp3("==", a, b)
        return None if r is None else not r
    if op == "<":
        return True if ah < bl else False if al >= bh else None
    if op == "<=":
        return True if ah <= bl else False if al > bh else None
    if op == ">":
        return _cmp3("<", b, a)
    if op == ">=":
        return _cmp3("<=", b, a)
    raise IllFormedPredicate(f"unknown comparison {op!r}")


def eval_pred(p: Pred, self_val, lookup: Callable[[str], tuple[int, int]]):
    """Evaluate ``p`` three-valuedly.

    ``self_val`` is an interval (or a dict field -> interval for struct
    predicates); ``lookup`` maps a parameter name to its interval.
    """

    def term(t):
        if isinstance(t, PConst):
            return t.value, t.value
        if isinstance(t, PSelf):
            if t.field is None:
                if isinstance(self_val, dict):
                    raise IllFormedPredicate("bare 'self' in a struct predicate")
                return self_val
            if not isinstance(self_val, dict) or t.field not in self_val:
                return 0, 255
            return self_val[t.field]
        if isinstance(t, PName):
            if t.name in BUILTIN_CONSTANTS:
                v = BUILTIN_CONSTANTS[t.name]
                return v, v
            return lookup(t.name)
        if t.op in CMP_OPS or t.op in ("&&",):
            raise IllFormedPredicate("comparison used as a value")
        return _ival_bin(t.op, term(t.left), term(t.right))

    def boolean(t):
        if isinstance(t, PBin) and t.op == "&&":
            a, b = boolean(t.left), boolean(t.right)
            if a is False or b is False:
                return False
            return True if a is True and b is True else None
        if isinstance(t, PBin) and t.op in CMP_OPS:
            return _cmp3(t.op, term(t.left), term(t.right))
        raise IllFormedPredicate(f"predicate {t} is not a comparison")

    return boolean(p)


# ---------------------------------------------------------------------------
# type expressions


@dataclass(frozen=True)
class TScalar:
    name: str  # Int8 | Word

    @property
    def key(self):
        return self.name


@dataclass(frozen=True)
class TNamed:
    name: str

    @property
    def key(self):
        return self.name


@dataclass(frozen=True)
class TPtr:
    target: "TypeExpr"
    nullable: bool = False

    @property
    def key(self):
        return ("nullable " if self.nullable else "") + self.target.key + "*"


@dataclass(frozen=True)
class TArray:
    elem: "TypeExpr"
    length: int | str

    @property
    def key(self):
        return f"{self.elem.key}[{self.length}]"


@dataclass(frozen=True)
class TStruct:
    fields: tuple[tuple[str, "TypeExpr"], ...]

    @property
    def key(self):
        return "struct{" + " ".join(f"{t.key} {n};" for n, t in self.fields) + "}"


@dataclass(frozen=True)
class TRefined:
    base: "TypeExpr"
    pred: Pred

    @property
    def key(self):
        return f"({self.base.key} with {self.pred})"


TypeExpr = Union[TScalar, TNamed, TPtr, TArray, TStruct, TRefined]


@dataclass
class TypeEnv:
    defs: dict[str, TypeExpr] = field(default_factory=dict)
    params: dict[str, int | None] = field(default_factory=dict)
    regions: list[tuple[str, TypeExpr, int | None]] = field(default_factory=list)
    globals: list[tuple[str, TypeExpr, int]] = field(default_factory=list)
    registers: list[tuple[str, TypeExpr]] = field(default_factory=list)
    exitpoint: int | None = None
    manual_lines: int = 0

    def __post_init__(self):
        self._exprs: dict[str, TypeExpr] = {}
        for name, expr in self.defs.items():
            self.register(expr)
            self._exprs[name] = expr

    # -- expression registry (keys <-> expressions)
    def register(self, t: TypeExpr) -> str:
        if isinstance(t, TNamed):
            return t.name
        self._exprs.setdefault(t.key, t)
        if isinstance(t, TPtr):
            self.register(t.target)
        elif isinstance(t, TArray):
            self.register(t.elem)
        elif isinstance(t, TStruct):
            for _, ft in t.fields:
                self.register(ft)
        elif isinstance(t, TRefined):
            self.register(t.base)
        return t.key

    def expr(self, key: str) -> TypeExpr:
        """Definition behind a type key (named types resolve to their body)."""
        if key in SCALARS:
            return TScalar(key)
        if key in self._exprs:
            return self._exprs[key]
        m = re.fullmatch(r"(.+)\[(\w+)\]", key)
        if m:
            elem = self.expr(m[1])
            n = m[2]
            length = int(n, 0) if n[0].isdigit() else n
            t = TArray(TNamed(m[1]) if m[1] in self.defs else elem, length)
            self._exprs[key] = t
            return t
        if key.endswith("*"):
            nullable = key.startswith("nullable ")
            inner = key[len("nullable "):-1] if nullable else key[:-1]
            t = TPtr(TNamed(inner) if inner in self.defs else self.expr(inner), nullable)
            self._exprs[key] = t
            return t
        raise UndefinedTypeName(f"undefined type {key!r}")

    def is_named(self, key: str) -> bool:
        return key in self.defs

    def resolve_key(self, key: str, bindings: dict[str, int]) -> str:
        """Substitute bound parameters in array lengths (``Thread[n]`` -> ``Thread[2]``)."""
        def sub(m):
            n = m[1]
            if n in bindings:
                return f"[{bindings[n]}]"
            if n in self.params and self.params[n] is not None:
                return f"[{self.params[n]}]"
            return m[0]
        return re.sub(r"\[([A-Za-z_]\w*)\]", sub, key)

    def sizeof(self, key_or_expr, bindings: dict[str, int] | None = None) -> int | None:
        """Byte size; None when it depends on an unbound parameter."""
        t = self.expr(key_or_expr) if isinstance(key_or_expr, str) else key_or_expr
        if isinstance(t, (TScalar, TPtr)):
            return 1
        if isinstance(t, TNamed):
            return self.sizeof(self.defs[t.name] if t.name in self.defs else t.name, bindings)
        if isinstance(t, TRefined):
            return self.sizeof(t.base, bindings)
        if isinstance(t, TStruct):
            total = 0
            for _, ft in t.fields:
                s = self.sizeof(ft, bindings)
                if s is None:
                    return None
                total += s
            return total
        if isinstance(t, TArray):
            n = t.length
            if isinstance(n, str):
                n = (bindings or {}).get(n, self.params.get(n))
                if n is None:
                    return None
            es = self.sizeof(t.elem, bindings)
            return None if es is None else n * es
        raise UndefinedTypeName(str(t))

    def field_layout(self, key: str) -> list[tuple[str, int, TypeExpr]]:
        """(name, offset, type) of a struct-shaped key (through names/refinements)."""
        t = self.expr(key)
        while isinstance(t, (TRefined, TNamed)):
            t = t.base if isinstance(t, TRefined) else self.expr(t.name)
        if not isinstance(t, TStruct):
            return []
        out, off = [], 0
        for name, ft in t.fields:
            out.append((name, off, ft))
            off += self.sizeof(ft) or 0
        return out

    def param_interval(self, name: str, bindings: dict[str, int] | None = None) -> tuple[int, int]:
        if bindings and name in bindings:
            v = bindings[name]
            return v, v
        v = self.params.get(name)
        if v is not None:
            return v, v
        if name in self.params:
            return 0, 255
        raise UnboundParam(name)


# ---------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<comment>//[^\n]*|/\*.*?\*/)"
    r"|(?P<num>0[xX][0-9a-fA-F]+|\d+)"
    r"|(?P<str>\"[^\"]*\")"
    r"|(?P<op>\$\\ge\$|\$\\le\$|==|!=|<=|>=|&&|≥|≤|[{}()\[\];:,*=<>&+\-@.])"
    r"|(?P<name>[A-Za-z_]\w*))",
    re.S,
)
_OP_ALIASES = {"$\\ge$": ">=", "≥": ">=", "$\\le$": "<=", "≤": "<=", "=": "=="}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(src: str) -> list[_Tok]:
    toks, pos = [], 0
    line_starts = [0] + [m.end() for m in re.finditer("\n", src)]

    def where(p):
        import bisect
        ln = bisect.bisect_right(line_starts, p)
        return ln, p - line_starts[ln - 1] + 1

    while pos < len(src):
        if src[pos:].strip() == "":
            break
        m = _TOKEN.match(src, pos)
        if not m or m.end() == pos:
            ln, col = where(pos + len(src[pos:]) - len(src[pos:].lstrip()))
            raise ParseError(f"unexpected character {src[pos:].lstrip()[:1]!r}", ln, col)
        pos = m.end()
        kind = m.lastgroup
        if kind == "comment":
            continue
        ln, col = where(m.start(kind))
        toks.append(_Tok(kind, m[kind], ln, col))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.i = 0

    def peek(self, k: int = 0) -> _Tok | None:
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def at(self, text: str) -> bool:
        t = self.peek()
        return t is not None and t.text == text

    def next(self) -> _Tok:
        t = self.peek()
        if t is None:
            last = self.toks[-1] if self.toks else _Tok("", "", 1, 1)
            raise ParseError("unexpected end of input", last.line, last.col)
        self.i += 1
        return t

    def expect(self, text: str) -> _Tok:
        t = self.next()
        if t.text != text:
            raise ParseError(f"expected {text!r}, got {t.text!r}", t.line, t.col)
        return t

    def name(self) -> _Tok:
        t = self.next()
        if t.kind != "name":
            raise ParseError(f"expected a name, got {t.text!r}", t.line, t.col)
        return t

    def number(self) -> int:
        t = self.next()
        if t.kind != "num":
            raise ParseError(f"expected a number, got {t.text!r}", t.line, t.col)
        return int(t.text, 0)

    # -- types
    def type_expr(self) -> TypeExpr:
        nullable = False
        if self.at("nullable"):
            self.next()
            nullable = True
        t = self.base_type()
        t = self.postfix(t, nullable)
        return t

    def base_type(self) -> TypeExpr:
        tok = self.peek()
        if tok is not None and tok.text == "struct":
            self.next()
            self.expect("{")
            fields = []
            while not self.at("}"):
                fields.append(self.field_decl())
            self.expect("}")
            return TStruct(tuple(fields))
        if tok is not None and tok.text == "(":
            self.next()
            t = self.type_expr()
            if self.at("with"):
                self.next()
                t = TRefined(t, self.pred())
            self.expect(")")
            return t
        name = self.name().text
        return TScalar(name) if name in SCALARS else TNamed(name)

    def postfix(self, t: TypeExpr, nullable: bool) -> TypeExpr:
        while True:
            if self.at("*"):
                self.next()
                t = TPtr(t, nullable)
                nullable = False
            elif self.at("["):
                self.next()
                tok = self.next()
                if tok.kind == "num":
                    length: int | str = int(tok.text, 0)
                elif tok.kind == "name":
                    length = tok.text
                else:
                    raise ParseError("bad array length", tok.line, tok.col)
                self.expect("]")
                t = TArray(t, length)
            else:
                return t

    def field_decl(self) -> tuple[str, TypeExpr]:
        nullable = False
        if self.at("nullable"):
            self.next()
            nullable = True
        t = self.base_type()
        t = self.postfix(t, nullable)
        name = self.name().text
        if self.at("["):
            t = self.postfix(t, False)
        self.expect(";")
        return name, t

    # -- predicates
    def pred(self) -> Pred:
        left = self.comparison()
        while self.at("&&"):
            self.next()
            left = PBin("&&", left, self.comparison())
        return left

    def comparison(self) -> Pred:
        left = self.arith()
        t = self.peek()
        if t is not None and (t.text in CMP_OPS or t.text in _OP_ALIASES):
            self.next()
            op = _OP_ALIASES.get(t.text, t.text)
            return PBin(op, left, self.arith())
        return left

    def arith(self) -> Pred:
        left = self.atom()
        while self.peek() is not None and self.peek().text in ("&", "+", "-"):
            op = self.next().text
            left = PBin(op, left, self.atom())
        return left

    def atom(self) -> Pred:
        t = self.next()
        if t.text == "(":
            p = self.pred()
            self.expect(")")
            return p
        if t.kind == "num":
            return PConst(int(t.text, 0))
        if t.text == "self":
            if self.at("."):
                self.next()
                return PSelf(self.name().text)
            return PSelf()
        if t.kind == "name":
            return PName(t.text)
        raise IllFormedPredicate(f"unexpected {t.text!r} in predicate", t.line, t.col)


def _check_pred(p: Pred, where: _Tok):
    def is_bool(q):
        return isinstance(q, PBin) and (q.op in CMP_OPS or q.op == "&&")

    def check(q, want_bool):
        if want_bool:
            if not is_bool(q):
                raise IllFormedPredicate(f"predicate {q} is not a comparison", where.line, where.col)
            if q.op == "&&":
                check(q.left, True)
                check(q.right, True)
            else:
                check(q.left, False)
                check(q.right, False)
        elif is_bool(q):
            raise IllFormedPredicate(f"comparison {q} used as a value", where.line, where.col)
        elif isinstance(q, PBin):
            check(q.left, False)
            check(q.right, False)

    check(p, True)


def parse_annotations(src: str, base_dir: str | None = None) -> TypeEnv:
    """Parse annotation text into a TypeEnv (see module docstring for the grammar)."""
    p = _Parser(src)
    defs: dict[str, TypeExpr] = {}
    params: dict[str, int | None] = {}
    regions, globals_, registers = [], [], []
    exitpoint = None
    manual = 0
    uses: list[tuple[TypeExpr, _Tok]] = []
    preds: list[tuple[Pred, _Tok, TypeExpr | None]] = []

    def collect(t: TypeExpr, tok):
        uses.append((t, tok))
        if isinstance(t, TRefined):
            preds.append((t.pred, tok, t.base))
            collect(t.base, tok)
        elif isinstance(t, TPtr):
            collect(t.target, tok)
        elif isinstance(t, TArray):
            collect(t.elem, tok)
        elif isinstance(t, TStruct):
            for _, ft in t.fields:
                collect(ft, tok)

    while p.peek() is not None:
        tok = p.next()
        kw = tok.text
        if kw == "type":
            name = p.name().text
            p.expect("=")
            t = p.type_expr()
            if p.at("with"):
                p.next()
                t = TRefined(t, p.pred())
            if p.at(";"):
                p.next()
            if name in defs:
                raise ParseError(f"type {name!r} defined twice", tok.line, tok.col)
            defs[name] = t
            collect(t, tok)
        elif kw == "param":
            name = p.name().text
            value = None
            if p.at("="):
                p.next()
                value = p.number()
            p.expect(";")
            params[name] = value
            manual += 1
        elif kw == "region":
            name = p.name().text
            p.expect(":")
            t = p.type_expr()
            addr = None
            if p.at("@"):
                p.next()
                addr = p.number()
            p.expect(";")
            regions.append((name, t, addr))
            collect(t, tok)
            manual += 1
        elif kw == "global":
            name = p.name().text
            p.expect(":")
            t = p.type_expr()
            p.expect("@")
            addr = p.number()
            p.expect(";")
            globals_.append((name, t, addr))
            collect(t, tok)
            manual += 1
        elif kw == "register":
            name = p.name().text.upper()
            p.expect(":")
            t = p.type_expr()
            p.expect(";")
            registers.append((name, t))
            collect(t, tok)
            manual += 1
        elif kw == "exitpoint":
            exitpoint = p.number()
            p.expect(";")
            manual += 1
        elif kw == "include":
            path = p.next()
            if path.kind != "str":
                raise ParseError("include expects a quoted path", path.line, path.col)
            p.expect(";")
            full = os.path.join(base_dir or ".", path.text.strip('"'))
            with open(full, encoding="utf-8") as fh:
                sub = parse_annotations(fh.read(), os.path.dirname(full))
            for n, t in sub.defs.items():
                defs[n] = t
                collect(t, tok)
            for n, v in sub.params.items():
                params.setdefault(n, v)
        else:
            raise ParseError(f"unexpected {kw!r}", tok.line, tok.col)

    for pr, tok, _ in preds:
        _check_pred(pr, tok)
        for n in pred_names(pr):
            if n not in BUILTIN_CONSTANTS:
                params.setdefault(n, None)
    for t, tok in uses:
        if isinstance(t, TNamed) and t.name not in defs:
            raise UndefinedTypeName(f"undefined type {t.name!r}", tok.line, tok.col)
        if isinstance(t, TArray) and isinstance(t.length, str):
            params.setdefault(t.length, None)
    env = TypeEnv(defs, params, regions, globals_, registers, exitpoint, manual)
    for pr, tok, base in preds:
        fields = pred_fields(pr) - {None}
        if not fields:
            continue
        body = base
        while isinstance(body, TNamed) and body.name in defs:
            body = defs[body.name]
        names = {f for f, _ in body.fields} if isinstance(body, TStruct) else set()
        for f in sorted(fields - names):
            raise IllFormedPredicate(f"'self.{f}' names no field of the refined type", tok.line, tok.col)
    for name in defs:
        if env.sizeof(name) == 0:
            raise AnnotationError(f"type {name!r} has zero size")
    return env


def load_annotations(path) -> TypeEnv:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh.read(), os.path.dirname(os.path.abspath(path)))
