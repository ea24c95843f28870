"""Parser for the declaration DSL.

Grammar (whitespace-insensitive):

    document  := { decl }
    decl      := param | system | cv | transform | vf
    param     := "param" IDENT "(" "t" "," "x" ")" [ "with" IDENT "=" expr ] ";"
    system    := "system" IDENT "{" { IDENT "=" expr ";" } "}"
    cv        := "cv" IDENT "=" "(" expr "," expr ")" [ "on" IDENT ] ";"
    transform := "transform" IDENT "{" { IDENT "~" "=" expr ";" }
                 "inverse" "{" { IDENT "=" expr ";" } "}" "}"
    vf        := "vf" IDENT "=" expr ";"    (expr linear in dt, dx, d<dep>)

Expressions use + - * / ^ with precedence
unary minus < +,- < *,/ < ^ (right-associative), integer literals (rationals
come from division), exp(...), log(...), identifiers with t/x derivative
suffixes after "_" (u_tx), the operator synonym D[u,t,x,x], and parameter
values at composed arguments alpha_x(e1, e2).  Implicit multiplication is
rejected.  Inside a transform's inverse block (and in other target-chart
inputs) identifiers carry a tilde: t~, u~; the tilde marks the chart and
resolves to the same underlying symbol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .expr import Expr, ExprError
from .jet import PDESystem, ParamFunction, Rule, VectorField, Workspace
from .conslaw import ConservedVector
from .transform import PointTransformation

__all__ = [
    "DslError",
    "DslSyntaxError",
    "UnknownSymbol",
    "BadDerivativeSuffix",
    "DuplicateName",
    "ForwardReference",
    "Document",
    "parse_document",
    "parse_expr",
]


class DslError(Exception):
    """Parse-level error with a source location."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}" if line else message)
        self.message = message
        self.line = line
        self.col = col


class DslSyntaxError(DslError):
    pass


class UnknownSymbol(DslError):
    pass


class BadDerivativeSuffix(UnknownSymbol):
    """Derivative suffix with characters other than t/x."""


class DuplicateName(DslError):
    pass


class ForwardReference(DslError):
    pass


# ---------------------------------------------------------------------------
# Lexer

_PUNCT = {"+", "-", "*", "/", "^", "=", "(", ")", "{", "}", "[", "]", ",", ";", "~"}


@dataclass
class Token:
    kind: str  # 'ident' | 'int' | punctuation | 'eof'
    text: str
    line: int
    col: int


def _tokenize(text: str) -> List[Token]:
    out = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if c.isspace():
            i += 1
            col += 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            out.append(Token("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c.isalpha():
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(Token("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c in _PUNCT:
            out.append(Token(c, c, line, col))
            i += 1
            col += 1
            continue
        raise DslSyntaxError(f"unexpected character {c!r}", line, col)
    out.append(Token("eof", "", line, col))
    return out


# ---------------------------------------------------------------------------
# Symbol resolution


def _split_suffix(name: str, tok: Token) -> Tuple[str, int, int]:
    """Split a derivative-suffixed identifier into (base, kt, kx)."""
    if "_" not in name:
        return name, 0, 0
    base, _, suffix = name.partition("_")
    if not suffix or not base:
        raise UnknownSymbol(f"malformed identifier {name!r}", tok.line, tok.col)
    kt = kx = 0
    for ch in suffix:
        if ch == "t":
            kt += 1
        elif ch == "x":
            kx += 1
        else:
            raise BadDerivativeSuffix(
                f"derivative suffix of {name!r} may contain only t and x",
                tok.line, tok.col)
    return base, kt, kx


class _Scope:
    """Resolves identifiers against a workspace plus extras (d-symbols)."""

    def __init__(self, ws: Workspace, tilde_ok: bool = False,
                 require_tilde: bool = False, extras: Optional[Dict[str, Expr]] = None):
        self.ws = ws
        self.tilde_ok = tilde_ok or require_tilde
        self.require_tilde = require_tilde
        self.extras = extras or {}

    def resolve(self, name: str, tok: Token, tilde: bool,
                args: Optional[Tuple[Expr, Expr]]) -> Expr:
        ws = self.ws
        if tilde and not self.tilde_ok:
            raise DslSyntaxError(
                "tilde'd identifiers are only valid in target-chart expressions",
                tok.line, tok.col)
        if not tilde and self.require_tilde and name not in self.extras:
            base0 = name.split("_")[0]
            if base0 not in ("t", "x") or True:
                raise UnknownSymbol(
                    f"{name!r}: inverse-map expressions are written in the target "
                    "chart; use tilde'd identifiers (t~, x~, u~)", tok.line, tok.col)
        if name in self.extras:
            if args is not None:
                raise DslSyntaxError(f"{name} takes no arguments", tok.line, tok.col)
            return self.extras[name]
        base, kt, kx = _split_suffix(name, tok)
        if args is not None:
            if not ws.has_parameter(base):
                raise UnknownSymbol(
                    f"{base!r} is not a parameter function; only parameter values "
                    "take composed arguments", tok.line, tok.col)
            return ws.param(base, kt, kx, args)
        if base == "t" and not kt and not kx:
            return ws.atom_expr(ws.t)
        if base == "x" and not kt and not kx:
            return ws.atom_expr(ws.x)
        if ws.has_parameter(base):
            return ws.param(base, kt, kx)
        if ws.has_dependent(base):
            return ws.jet(base, kt, kx)
        raise UnknownSymbol(f"unknown symbol {name!r}", tok.line, tok.col)


# ---------------------------------------------------------------------------
# Expression parser (recursive descent, spec precedence)


class _ExprParser:
    def __init__(self, tokens: List[Token], pos: int, scope: _Scope):
        self.toks = tokens
        self.i = pos
        self.scope = scope
        self.ws = scope.ws

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind: str) -> Token:
        t = self.peek()
        if t.kind != kind:
            raise DslSyntaxError(f"expected {kind!r}, found {t.text!r}", t.line, t.col)
        return self.next()

    def parse(self) -> Expr:
        # unary minus binds loosest: "-a + b" is -(a + b)
        if self.peek().kind == "-":
            tok = self.next()
            return -self.parse()
        return self.addsub()

    def addsub(self) -> Expr:
        left = self.muldiv()
        while self.peek().kind in ("+", "-"):
            op = self.next()
            right = self.muldiv()
            left = left + right if op.kind == "+" else left - right
        return left

    def muldiv(self) -> Expr:
        left = self.power()
        while True:
            t = self.peek()
            if t.kind in ("*", "/"):
                self.next()
                right = self.power()
                try:
                    left = left * right if t.kind == "*" else left / right
                except ExprError as err:
                    raise DslSyntaxError(str(err), t.line, t.col) from err
            elif t.kind in ("ident", "int") or t.kind == "(":
                raise DslSyntaxError(
                    "implicit multiplication is not allowed; write '*'",
                    t.line, t.col)
            else:
                return left

    def power(self) -> Expr:
        base = self.primary()
        if self.peek().kind == "^":
            tok = self.next()
            k = self.exponent()
            try:
                return base ** k
            except ExprError as err:
                raise DslSyntaxError(str(err), tok.line, tok.col) from err
        return base

    def exponent(self) -> int:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return int(t.text)
        if t.kind == "(":
            self.next()
            neg = False
            if self.peek().kind == "-":
                self.next()
                neg = True
            it = self.expect("int")
            self.expect(")")
            return -int(it.text) if neg else int(it.text)
        raise DslSyntaxError(
            "exponent must be an integer literal (rational powers are not "
            "supported)", t.line, t.col)

    def primary(self) -> Expr:
        t = self.next()
        if t.kind == "int":
            return self.ws.num(int(t.text))
        if t.kind == "(":
            inner = self.parse()
            self.expect(")")
            return inner
        if t.kind == "ident":
            if t.text in ("exp", "log"):
                self.expect("(")
                arg = self.parse()
                self.expect(")")
                try:
                    return self.ws.exp(arg) if t.text == "exp" else self.ws.log(arg)
                except ExprError as err:
                    raise DslSyntaxError(str(err), t.line, t.col) from err
            if t.text == "D" and self.peek().kind == "[":
                return self.d_operator(t)
            tilde = False
            if self.peek().kind == "~":
                self.next()
                tilde = True
            args = None
            if self.peek().kind == "(":
                self.next()
                a1 = self.parse()
                self.expect(",")
                a2 = self.parse()
                self.expect(")")
                args = (a1, a2)
            return self.scope.resolve(t.text, t, tilde, args)
        raise DslSyntaxError(f"unexpected token {t.text!r}", t.line, t.col)

    def d_operator(self, t: Token) -> Expr:
        self.expect("[")
        name = self.expect("ident")
        kt = kx = 0
        while self.peek().kind == ",":
            self.next()
            d = self.expect("ident")
            if d.text == "t":
                kt += 1
            elif d.text == "x":
                kx += 1
            else:
                raise BadDerivativeSuffix(
                    f"D[...] directions must be t or x, not {d.text!r}",
                    d.line, d.col)
        self.expect("]")
        suffixed = name.text + ("_" + "t" * kt + "x" * kx if kt or kx else "")
        return self.scope.resolve(suffixed, name, False, None)


def parse_expr(text: str, ws: Workspace, tilde_ok: bool = False) -> Expr:
    """Parse one expression against the workspace's declared symbols."""
    toks = _tokenize(text)
    p = _ExprParser(toks, 0, _Scope(ws, tilde_ok=tilde_ok))
    e = p.parse()
    t = p.peek()
    if t.kind != "eof":
        raise DslSyntaxError(f"unexpected trailing input {t.text!r}", t.line, t.col)
    return e


# ---------------------------------------------------------------------------
# Document parser


@dataclass
class Document:
    """Parsed declaration file: named parameters, systems, conserved vectors,
    transformations and vector fields over a shared workspace."""

    ws: Workspace = field(default_factory=Workspace)
    params: Dict[str, ParamFunction] = field(default_factory=dict)
    systems: Dict[str, PDESystem] = field(default_factory=dict)
    cvs: Dict[str, ConservedVector] = field(default_factory=dict)
    cv_systems: Dict[str, str] = field(default_factory=dict)
    transforms: Dict[str, PointTransformation] = field(default_factory=dict)
    vfs: Dict[str, VectorField] = field(default_factory=dict)

    def merge(self, other: "Document"):
        raise NotImplementedError("parse multi-file input as one concatenated text")

    def parse_expr(self, text: str, tilde_ok: bool = False) -> Expr:
        return parse_expr(text, self.ws, tilde_ok=tilde_ok)

    def is_empty(self) -> bool:
        return not (self.params or self.systems or self.cvs
                    or self.transforms or self.vfs)


class _DocParser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0
        self.doc = Document()

    def peek(self) -> Token:
        return self.toks[self.i]

    def next(self) -> Token:
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind: str) -> Token:
        t = self.peek()
        if t.kind != kind:
            raise DslSyntaxError(f"expected {kind!r}, found {t.text!r}", t.line, t.col)
        return self.next()

    def expect_ident(self, word: Optional[str] = None) -> Token:
        t = self.expect("ident")
        if word is not None and t.text != word:
            raise DslSyntaxError(f"expected {word!r}, found {t.text!r}", t.line, t.col)
        return t

    def parse(self) -> Document:
        while True:
            t = self.peek()
            if t.kind == "eof":
                return self.doc
            if t.kind != "ident":
                raise DslSyntaxError(f"expected a declaration, found {t.text!r}",
                                     t.line, t.col)
            if t.text == "param":
                self.parse_param()
            elif t.text == "system":
                self.parse_system()
            elif t.text == "cv":
                self.parse_cv()
            elif t.text == "transform":
                self.parse_transform()
            elif t.text == "vf":
                self.parse_vf()
            else:
                raise DslSyntaxError(
                    f"unknown declaration keyword {t.text!r}", t.line, t.col)

    def sub_expr(self, scope: _Scope) -> Expr:
        p = _ExprParser(self.toks, self.i, scope)
        e = p.parse()
        self.i = p.i
        return e

    # -- declarations --------------------------------------------------------

    def parse_param(self):
        self.next()
        name = self.expect("ident")
        if self.doc.ws.has_parameter(name.text) or self.doc.ws.has_dependent(name.text):
            raise DuplicateName(f"symbol {name.text!r} already declared",
                                name.line, name.col)
        self.expect("(")
        self.expect_ident("t")
        self.expect(",")
        self.expect_ident("x")
        self.expect(")")
        ws = self.doc.ws
        ws.parameter(name.text)
        lead = None
        rhs = None
        if self.peek().kind == "ident" and self.peek().text == "with":
            self.next()
            lhs = self.expect("ident")
            base, kt, kx = _split_suffix(lhs.text, lhs)
            if base != name.text:
                raise DslSyntaxError(
                    f"constraint must solve a derivative of {name.text!r}",
                    lhs.line, lhs.col)
            if kt < 1:
                raise DslSyntaxError(
                    "constraint must lead in a t-derivative (kt >= 1)",
                    lhs.line, lhs.col)
            self.expect("=")
            rhs = self.sub_expr(_Scope(ws))
            lead = (kt, kx)
        self.expect(";")
        try:
            pf = ws.declare_parameter(name.text, lead, rhs)
        except ExprError as err:
            raise DslSyntaxError(str(err), name.line, name.col) from err
        self.doc.params[name.text] = pf

    def parse_system(self):
        self.next()
        name = self.expect("ident")
        if name.text in self.doc.systems:
            raise DuplicateName(f"system {name.text!r} already declared",
                                name.line, name.col)
        self.expect("{")
        ws = self.doc.ws
        rules = []
        param_names = []
        while self.peek().kind != "}":
            lhs = self.expect("ident")
            base, kt, kx = _split_suffix(lhs.text, lhs)
            if kt == 0 and kx == 0:
                raise DslSyntaxError(
                    "system lines solve a derivative (the leading), e.g. u_t = ...",
                    lhs.line, lhs.col)
            if ws.has_parameter(base):
                raise DslSyntaxError(
                    f"{base!r} is a parameter function; constrain it in its "
                    "param declaration", lhs.line, lhs.col)
            ws.dependent(base)
            self.expect("=")
            rhs = self.sub_expr(_Scope(ws))
            self.expect(";")
            rules.append(Rule(ws.jet_atom(base, kt, kx), rhs))
            for a in rhs.atoms():
                pname = getattr(a, "param", None)
                if pname and pname not in param_names:
                    param_names.append(pname)
        self.expect("}")
        params = [self.doc.params[p] for p in param_names if p in self.doc.params]
        try:
            system = PDESystem(ws, name.text, rules, params)
        except ExprError as err:
            raise DslSyntaxError(f"system {name.text}: {err}",
                                 name.line, name.col) from err
        self.doc.systems[name.text] = system

    def parse_cv(self):
        self.next()
        name = self.expect("ident")
        if name.text in self.doc.cvs:
            raise DuplicateName(f"cv {name.text!r} already declared",
                                name.line, name.col)
        self.expect("=")
        self.expect("(")
        scope = _Scope(self.doc.ws)
        T = self.sub_expr(scope)
        self.expect(",")
        X = self.sub_expr(scope)
        self.expect(")")
        if self.peek().kind == "ident" and self.peek().text == "on":
            self.next()
            sysname = self.expect("ident")
            if sysname.text not in self.doc.systems:
                raise ForwardReference(
                    f"cv {name.text!r} references undeclared system "
                    f"{sysname.text!r}", sysname.line, sysname.col)
            self.doc.cv_systems[name.text] = sysname.text
        self.expect(";")
        self.doc.cvs[name.text] = ConservedVector(T, X, name=name.text)

    def parse_transform(self):
        self.next()
        name = self.expect("ident")
        if name.text in self.doc.transforms:
            raise DuplicateName(f"transform {name.text!r} already declared",
                                name.line, name.col)
        self.expect("{")
        ws = self.doc.ws
        forward: Dict[str, Expr] = {}
        while not (self.peek().kind == "ident" and self.peek().text == "inverse"):
            lhs = self.expect("ident")
            self.expect("~")
            self.expect("=")
            if lhs.text not in ("t", "x") and not ws.has_dependent(lhs.text):
                raise UnknownSymbol(
                    f"transform maps undeclared coordinate {lhs.text!r}",
                    lhs.line, lhs.col)
            if lhs.text in forward:
                raise DuplicateName(f"duplicate forward map for {lhs.text!r}",
                                    lhs.line, lhs.col)
            forward[lhs.text] = self.sub_expr(_Scope(ws))
            self.expect(";")
        self.expect_ident("inverse")
        self.expect("{")
        inverse: Dict[str, Expr] = {}
        while self.peek().kind != "}":
            lhs = self.expect("ident")
            self.expect("=")
            if lhs.text in inverse:
                raise DuplicateName(f"duplicate inverse map for {lhs.text!r}",
                                    lhs.line, lhs.col)
            inverse[lhs.text] = self.sub_expr(_Scope(ws, require_tilde=True))
            self.expect(";")
        self.expect("}")
        self.expect("}")
        try:
            g = PointTransformation(ws, forward, inverse, name=name.text)
        except ExprError as err:
            raise DslSyntaxError(f"transform {name.text}: {err}",
                                 name.line, name.col) from err
        self.doc.transforms[name.text] = g

    def parse_vf(self):
        self.next()
        name = self.expect("ident")
        if name.text in self.doc.vfs:
            raise DuplicateName(f"vf {name.text!r} already declared",
                                name.line, name.col)
        self.expect("=")
        ws = self.doc.ws
        deps = [d for d in ws.dependents() if not d.startswith("_")]
        extras = {}
        for label in ["t", "x"] + deps:
            pname = f"_dir_{label}"
            ws.parameter(pname)
            extras["d" + label] = ws.param(pname)
        scope = _Scope(ws, extras=extras)
        tok = self.peek()
        e = self.sub_expr(scope)
        self.expect(";")
        tau = xi = None
        etas = {}
        rebuilt = ws.zero
        for label in ["t", "x"] + deps:
            datom = next(iter(extras["d" + label].atoms()))
            coeff = ws.partial(e, datom)
            for other in extras.values():
                oatom = next(iter(other.atoms()))
                if not ws.partial(coeff, oatom).is_zero():
                    raise DslSyntaxError(
                        "vector field must be linear in dt/dx/d<dep> terms",
                        tok.line, tok.col)
            if label == "t":
                tau = coeff
            elif label == "x":
                xi = coeff
            elif coeff:
                etas[label] = coeff
            rebuilt = rebuilt + coeff * extras["d" + label]
        if not (e - rebuilt).is_zero():
            raise DslSyntaxError(
                "vector field expression must be a sum of coefficients times "
                "dt, dx, d<dep>", tok.line, tok.col)
        try:
            Q = VectorField(ws, tau, xi, etas, name=name.text)
        except ExprError as err:
            raise DslSyntaxError(str(err), name.line, name.col) from err
        self.doc.vfs[name.text] = Q


def parse_document(text: str) -> Document:
    """Parse a full declaration file into a Document."""
    return _DocParser(text).parse()
