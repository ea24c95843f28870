"""Exact symbolic expressions over jet-space coordinates.

Expressions are canonical rational forms: a pair of multivariate polynomials
(numerator, denominator) with Fraction coefficients over atoms.  Atoms are
independent variables, jet coordinates (a dependent variable together with a
t/x derivative multi-index), derivatives of declared parameter functions, and
log kernels.  Exponentials are not atoms: every monomial carries an
"exponential part" mapping coefficient-stripped base expressions to Fraction
exponents, so that exp(a)*exp(b) -> exp(a+b), exp(0) -> 1 and
exp(n*log(s)) -> s^n hold by construction.  log(exp(s)) -> s and log(1) -> 0
are applied when log() is built.  No other transcendental identities are
used: anything outside this rule set stays syntactically distinct.

All construction goes through a Session, which interns atoms and expressions
(hash-consing).  Exprs are immutable and may be read from any thread; a
Session must be confined to one thread while expressions are being built.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Callable, Iterable, Optional, Union

__all__ = [
    "Session",
    "Expr",
    "Atom",
    "Indep",
    "Jet",
    "ParamD",
    "LogAtom",
    "ExprError",
    "DivisionByZero",
    "NumericSingularity",
]


class ExprError(Exception):
    """Base class for expression-kernel errors."""


class DivisionByZero(ExprError):
    """Division by an expression that canonicalizes to zero."""


class NumericSingularity(ExprError):
    """Numeric evaluation hit a vanishing denominator or a domain edge."""


# ---------------------------------------------------------------------------
# Atoms


class Atom:
    """A coordinate symbol.  Interned; compare with `is`/`==` freely."""

    __slots__ = ("aid", "skey", "_hash")

    def __init__(self, aid, skey):
        self.aid = aid
        self.skey = skey
        self._hash = hash((type(self).__name__, skey))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return self is other

    def __repr__(self):
        return f"<{type(self).__name__} {self}>"


def _suffix(kt: int, kx: int) -> str:
    return ("_" + "t" * kt + "x" * kx) if (kt or kx) else ""


class Indep(Atom):
    """Independent variable, t or x."""

    __slots__ = ("name",)

    def __init__(self, aid, name, index):
        super().__init__(aid, (0, index))
        self.name = name

    def __str__(self):
        return self.name


class Jet(Atom):
    """Jet coordinate: dependent variable `dep` differentiated kt times in t
    and kx times in x.  (kt, kx) == (0, 0) is the dependent itself."""

    __slots__ = ("dep", "kt", "kx")

    def __init__(self, aid, dep, dep_id, kt, kx):
        super().__init__(aid, (1, dep_id, kt, kx))
        self.dep = dep
        self.kt = kt
        self.kx = kx

    @property
    def order(self):
        return self.kt + self.kx

    def __str__(self):
        return self.dep + _suffix(self.kt, self.kx)


class ParamD(Atom):
    """Derivative of a parameter function.  `args` is None when the function
    is taken at the ambient (t, x); otherwise it is a pair of argument
    expressions (a composed value, as produced by point transformations)."""

    __slots__ = ("param", "kt", "kx", "args")

    def __init__(self, aid, param, param_id, kt, kx, args):
        akey = (-1, -1) if args is None else (args[0].eid, args[1].eid)
        super().__init__(aid, (2, param_id, kt, kx, akey))
        self.param = param
        self.kt = kt
        self.kx = kx
        self.args = args

    @property
    def order(self):
        return self.kt + self.kx

    def __str__(self):
        base = self.param + _suffix(self.kt, self.kx)
        if self.args is None:
            return base
        return f"{base}({self.args[0]}, {self.args[1]})"


class LogAtom(Atom):
    """Opaque log kernel; the argument is a canonical Expr."""

    __slots__ = ("arg",)

    def __init__(self, aid, arg):
        super().__init__(aid, (3, aid))
        self.arg = arg

    def __str__(self):
        return f"log({self.arg})"


# ---------------------------------------------------------------------------
# Monomials
#
# mono = (ord_part, exp_part)
#   ord_part: tuple of (Atom, int exponent > 0), sorted by atom sort key
#   exp_part: tuple of (Expr base, Fraction exponent != 0), sorted by base
#             expression id; the monomial carries the factor
#             exp(sum(exponent * base)).
#
# A polynomial is a dict {mono: Fraction}, never containing zero coefficients.

_EMPTY_MONO = ((), ())
_F0 = Fraction(0)


def _mono_key(m):
    ords, eps = m
    return (
        tuple((a.skey, e) for a, e in ords),
        tuple((b.eid, f) for b, f in eps),
    )


def _normalize_exp_map(ep):
    """Keep log-base exponents inside [0, 1): exp(c*log s) with c = n + r,
    n integer, splits into the factor s^n and exp(r*log s).  Other bases
    keep their exponent untouched.  Returns (entries tuple, extracts)."""
    extracts = []
    for b in list(ep):
        la = b._as_log_monomial()
        if la is None:
            continue
        n = ep[b].numerator // ep[b].denominator  # floor
        if n:
            extracts.append((la.arg, n))
            r = ep[b] - n
            if r:
                ep[b] = r
            else:
                del ep[b]
    return tuple(sorted(ep.items(), key=lambda p: p[0].eid)), tuple(extracts)


def _mono_mul(m1, m2):
    """Multiply monomials.  Returns (mono, extracts) where extracts is a
    tuple of (Expr, int) factors pulled out by exp(n*log s) -> s^n; empty in
    the common case."""
    o1, e1 = m1
    o2, e2 = m2
    if not o2 and not e2:
        return m1, ()
    if not o1 and not e1:
        return m2, ()
    if o2 and o1:
        d = dict(o1)
        for a, e in o2:
            d[a] = d.get(a, 0) + e
        ords = tuple(sorted(((a, e) for a, e in d.items() if e), key=lambda p: p[0].skey))
    else:
        ords = o1 or o2
    if not e1 and not e2:
        return (ords, ()), ()
    ep = dict(e1)
    for b, f in e2:
        nf = ep.get(b, 0) + f
        if nf:
            ep[b] = nf
        else:
            ep.pop(b, None)
    eps, extracts = _normalize_exp_map(ep)
    return (ords, eps), extracts


def _mono_pow(m, k):
    ords, eps = m
    o = tuple((a, e * k) for a, e in ords)
    ep = dict()
    for b, f in eps:
        ep[b] = f * k
    eps2, extracts = _normalize_exp_map(ep)
    return (o, eps2), extracts


def _poly_add(p1, p2):
    if not p1:
        return dict(p2)
    if not p2:
        return dict(p1)
    out = dict(p1)
    for m, c in p2.items():
        nc = out.get(m, 0) + c
        if nc:
            out[m] = nc
        else:
            out.pop(m, None)
    return out


def _poly_neg(p):
    return {m: -c for m, c in p.items()}


def _poly_scale(p, c):
    if not c:
        return {}
    return {m: cc * c for m, cc in p.items()}


def _poly_mul(p1, p2):
    """Multiply polynomials.  Returns (poly, pending) where pending is a list
    of (coeff, mono, extracts) products that require expression-level fixup
    because an integer power of a log base was extracted."""
    out = {}
    pending = []
    for m1, c1 in p1.items():
        for m2, c2 in p2.items():
            m, ex = _mono_mul(m1, m2)
            c = c1 * c2
            if ex:
                pending.append((c, m, ex))
                continue
            nc = out.get(m, 0) + c
            if nc:
                out[m] = nc
            else:
                out.pop(m, None)
    return out, pending


def _exp_content(p):
    """Per-base minimum exponential exponent over all monomials (0 counts for
    monomials lacking a base).  {} when nothing to strip."""
    monos = list(p)
    if not monos:
        return {}
    keys = set()
    for m in monos:
        for b, _ in m[1]:
            keys.add(b)
    content = {}
    for b in keys:
        mn = min(dict(m[1]).get(b, _F0) for m in monos)
        if mn:
            content[b] = mn
    return content


def _lead_mono(p):
    return max(p, key=_mono_key)


def _poly_key(p):
    return tuple(sorted(((m, c) for m, c in p.items()), key=lambda q: _mono_key(q[0])))


# ---------------------------------------------------------------------------
# Plain encoded polynomials for gcd / exact division.
#
# Monomials are re-encoded as tuples of (var index, int exponent), where vars
# are ordinary atoms and pseudo-variables standing for exponential bases
# (scaled so exponents are integers).  Lex order over the fixed var list.


def _encode(polys):
    """Encode polys (after exp-content stripping) over a shared variable
    list.  Returns (encoded polys, decode) or None when fractional exponents
    cannot be cleared (never happens: lcm always clears)."""
    atoms = set()
    bases = {}
    for p in polys:
        for (ords, eps) in p:
            for a, _ in ords:
                atoms.add(a)
            for b, f in eps:
                bases.setdefault(b, 1)
                bases[b] = _lcm(bases[b], f.denominator)
    avars = sorted(atoms, key=lambda a: a.skey)
    bvars = sorted(bases, key=lambda b: b.eid)
    index = {a: i for i, a in enumerate(avars)}
    nb = len(avars)
    for i, b in enumerate(bvars):
        index[b] = nb + i
    nvars = nb + len(bvars)

    def enc(p):
        out = {}
        for (ords, eps), c in p.items():
            v = [0] * nvars
            for a, e in ords:
                v[index[a]] = e
            for b, f in eps:
                v[index[b]] = int(f * bases[b])
            out[tuple(v)] = c
        return out

    def dec(p):
        out = {}
        for v, c in p.items():
            ords = []
            eps = []
            ok = True
            for i, e in enumerate(v):
                if not e:
                    continue
                if i < nb:
                    if e < 0:
                        ok = False
                        break
                    ords.append((avars[i], e))
                else:
                    b = bvars[i - nb]
                    fr = Fraction(e, bases[b])
                    if b._as_log_monomial() is not None and not (0 <= fr < 1):
                        ok = False  # would need extraction; caller falls back
                        break
                    eps.append((b, fr))
            if not ok:
                return None
            m = (
                tuple(sorted(ords, key=lambda q: q[0].skey)),
                tuple(sorted(eps, key=lambda q: q[0].eid)),
            )
            out[m] = out.get(m, 0) + c
        return out

    return [enc(p) for p in polys], dec, nvars


def _lcm(a, b):
    return a * b // math.gcd(a, b)


def _pp_zero(p):
    return not p


def _pp_mul(p1, p2):
    out = {}
    for v1, c1 in p1.items():
        for v2, c2 in p2.items():
            v = tuple(a + b for a, b in zip(v1, v2))
            nc = out.get(v, 0) + c1 * c2
            if nc:
                out[v] = nc
            else:
                del out[v]
    return out


def _pp_sub(p1, p2):
    out = dict(p1)
    for v, c in p2.items():
        nc = out.get(v, 0) - c
        if nc:
            out[v] = nc
        else:
            out.pop(v, None)
    return out


def _pp_scale(p, c):
    return {v: cc * c for v, cc in p.items()} if c else {}


def _pp_mono_content(p):
    """Componentwise min exponent vector."""
    vecs = list(p)
    lo = list(vecs[0])
    for v in vecs[1:]:
        for i, e in enumerate(v):
            if e < lo[i]:
                lo[i] = e
    return tuple(lo)


def _pp_mono_shift(p, shift):
    """Divide by the monomial `shift` (componentwise subtract)."""
    if not any(shift):
        return p
    return {tuple(a - b for a, b in zip(v, shift)): c for v, c in p.items()}


def _pp_lead(p):
    return max(p)


def _pp_div_exact(f, g):
    """Exact division in the encoded ring; None if not divisible."""
    if not f:
        return {}
    out = {}
    lead_g = _pp_lead(g)
    cg = g[lead_g]
    rem = dict(f)
    steps = 0
    while rem:
        steps += 1
        if steps > 10000:
            return None
        lead = _pp_lead(rem)
        q = tuple(a - b for a, b in zip(lead, lead_g))
        if any(e < 0 for e in q):
            return None
        c = rem[lead] / cg
        out[q] = out.get(q, 0) + c
        rem = _pp_sub(rem, _pp_mul({q: c}, g))
    return out


def _pp_univ(p, vi):
    """View as univariate in variable vi: {deg: coefficient poly}."""
    out = {}
    for v, c in p.items():
        d = v[vi]
        rest = v[:vi] + (0,) + v[vi + 1 :]
        sub = out.setdefault(d, {})
        nc = sub.get(rest, 0) + c
        if nc:
            sub[rest] = nc
        else:
            del sub[rest]
    return {d: sub for d, sub in out.items() if sub}


def _pp_from_univ(u, vi):
    out = {}
    for d, sub in u.items():
        for v, c in sub.items():
            w = v[:vi] + (d,) + v[vi + 1 :]
            out[w] = c
    return out


def _pp_gcd(p, q, depth=0):
    """Multivariate gcd over Q, monic-normalized.  Primitive PRS."""
    if not p:
        return _pp_monic(q)
    if not q:
        return _pp_monic(p)
    nvars = len(next(iter(p)))
    shift_p = _pp_mono_content(p)
    shift_q = _pp_mono_content(q)
    shift = tuple(min(a, b) for a, b in zip(shift_p, shift_q))
    p = _pp_mono_shift(p, shift_p)
    q = _pp_mono_shift(q, shift_q)
    used = [False] * nvars
    for poly in (p, q):
        for v in poly:
            for i, e in enumerate(v):
                if e:
                    used[i] = True
    vis = [i for i, u in enumerate(used) if u]
    g = _pp_gcd_inner(p, q, vis)
    g = _pp_mul(g, {shift: Fraction(1)})
    return _pp_monic(g)


def _pp_gcd_inner(p, q, vis):
    if len(p) == 1 or len(q) == 1:
        # against a monomial the gcd is the common monomial content (already
        # stripped by the caller), i.e. 1
        one = tuple(0 for _ in next(iter(p)))
        return {one: Fraction(1)}
    if not vis:
        one = tuple(0 for _ in next(iter(p)))
        return {one: Fraction(1)}
    vi = vis[-1]
    up = _pp_univ(p, vi)
    uq = _pp_univ(q, vi)
    if max(up) == 0 and max(uq) == 0:
        return _pp_gcd_inner(p, q, vis[:-1])
    if max(up) == 0:
        return _pp_gcd_many([p] + list(uq.values()), vis[:-1])
    if max(uq) == 0:
        return _pp_gcd_many([q] + list(up.values()), vis[:-1])
    cont_p = _pp_gcd_many(list(up.values()), vis[:-1])
    cont_q = _pp_gcd_many(list(uq.values()), vis[:-1])
    cont = _pp_gcd(cont_p, cont_q)
    a = _pp_univ_map(up, lambda s: _pp_div_exact(s, cont_p))
    b = _pp_univ_map(uq, lambda s: _pp_div_exact(s, cont_q))
    if max(a) < max(b):
        a, b = b, a
    # primitive pseudo-remainder sequence
    while True:
        if max(b) == 0:
            pp_gcd = None
            break
        r = _pp_prem(a, b, vi)
        if not r:
            pp_gcd = b
            break
        rc = _pp_gcd_many(list(r.values()), vis[:-1])
        r = _pp_univ_map(r, lambda s: _pp_div_exact(s, rc))
        a, b = b, r
    if pp_gcd is None:
        return cont
    g = _pp_mul(_pp_from_univ(pp_gcd, vi), cont)
    return g


def _pp_univ_map(u, fn):
    return {d: fn(s) for d, s in u.items()}


def _pp_gcd_many(polys, vis):
    g = polys[0]
    for p in polys[1:]:
        g = _pp_gcd(g, p)
        if len(g) == 1 and not any(next(iter(g))):
            break
    return g


def _pp_prem(a, b, vi):
    """Pseudo-remainder of univariate-in-vi polys with poly coefficients."""
    da, db = max(a), max(b)
    lb = b[db]
    r = {d: dict(s) for d, s in a.items()}
    dr = da
    while r and max(r) >= db:
        dr = max(r)
        lr = r[dr]
        # r = lb*r - lr*b shifted
        new = {}
        for d, s in r.items():
            new[d] = _pp_mul(s, lb)
        for d, s in b.items():
            t = _pp_mul(s, lr)
            nd = d + dr - db
            new[nd] = _pp_sub(new.get(nd, {}), t)
        r = {d: s for d, s in new.items() if s}
        if r and max(r) == dr:  # leading failed to cancel: shouldn't happen
            r.pop(dr)
    return r


def _pp_monic(p):
    if not p:
        return p
    c = p[_pp_lead(p)]
    if c == 1:
        return p
    return {v: cc / c for v, cc in p.items()}


# ---------------------------------------------------------------------------
# Expr


Number = Union[int, Fraction]


class Expr:
    """Canonical rational form.  Immutable, interned per session: two equal
    canonical forms built in one session are the same object."""

    __slots__ = ("session", "num", "den", "eid", "_hash", "_support")

    def __init__(self, session, num, den, eid):
        self.session = session
        self.num = num
        self.den = den
        self.eid = eid
        self._hash = None
        self._support = None

    # -- predicates ---------------------------------------------------------

    def is_zero(self):
        return not self.num

    def is_one(self):
        return self.den == _ONE_POLY and self.num == _ONE_POLY

    def is_rational(self):
        """A bare number: no atoms, no kernels."""
        if self.den != _ONE_POLY:
            return False
        return not self.num or self.num.keys() == {_EMPTY_MONO}

    def as_fraction(self):
        if not self.is_rational():
            raise ExprError(f"not a constant: {self}")
        return self.num.get(_EMPTY_MONO, Fraction(0))

    def _as_log_monomial(self) -> Optional[LogAtom]:
        """The LogAtom when this expression is exactly log(s), else None."""
        if self.den != _ONE_POLY or len(self.num) != 1:
            return None
        (m, c), = self.num.items()
        if c != 1:
            return None
        ords, eps = m
        if eps or len(ords) != 1:
            return None
        a, e = ords[0]
        if e == 1 and isinstance(a, LogAtom):
            return a
        return None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = self.session._coerce(other)
        return self.session._add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        other = self.session._coerce(other)
        return self.session._add(self, self.session._neg(other))

    def __rsub__(self, other):
        other = self.session._coerce(other)
        return self.session._add(other, self.session._neg(self))

    def __mul__(self, other):
        other = self.session._coerce(other)
        return self.session._mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self.session._coerce(other)
        return self.session._div(self, other)

    def __rtruediv__(self, other):
        other = self.session._coerce(other)
        return self.session._div(other, self)

    def __neg__(self):
        return self.session._neg(self)

    def __pow__(self, k):
        if not isinstance(k, int):
            raise ExprError("only integer powers are supported")
        return self.session._pow(self, k)

    def __bool__(self):
        return not self.is_zero()

    def __eq__(self, other):
        if self is other:
            return True
        if isinstance(other, (int, Fraction)):
            return self.is_rational() and self.as_fraction() == other
        return False

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((_poly_key(self.num), _poly_key(self.den)))
        return self._hash

    # -- structure ----------------------------------------------------------

    def atoms(self):
        """All base atoms (Indep/Jet/ParamD), recursing through kernels and
        composed-argument expressions."""
        if self._support is None:
            out = set()
            for poly in (self.num, self.den):
                for (ords, eps) in poly:
                    for a, _ in ords:
                        if isinstance(a, LogAtom):
                            out |= a.arg.atoms()
                        else:
                            out.add(a)
                            if isinstance(a, ParamD) and a.args is not None:
                                out |= a.args[0].atoms()
                                out |= a.args[1].atoms()
                    for b, _ in eps:
                        out |= b.atoms()
            self._support = frozenset(out)
        return self._support

    def max_jet_order(self):
        orders = [a.order for a in self.atoms() if isinstance(a, Jet)]
        return max(orders, default=0)

    def __str__(self):
        return self.session.format(self)

    def __repr__(self):
        return f"Expr({self})"


_ONE_POLY = {_EMPTY_MONO: Fraction(1)}


# ---------------------------------------------------------------------------
# Session


class Session:
    """Interner and factory for atoms and expressions.

    Independent variables are fixed to t and x.  Dependent variables and
    parameter functions are declared through `dependent` / `parameter`; the
    declaration order fixes the global atom order used by the canonical
    monomial ordering.
    """

    def __init__(self):
        self._aid = 0
        self._eid = 0
        self._intern = {}
        self._jets = {}
        self._params = {}
        self._logs = {}
        self._deps = {}
        self._param_ids = {}
        self.t = Indep(self._next_aid(), "t", 0)
        self.x = Indep(self._next_aid(), "x", 1)
        self.zero = self._build({}, dict(_ONE_POLY))
        self.one = self._build(dict(_ONE_POLY), dict(_ONE_POLY))

    def _next_aid(self):
        self._aid += 1
        return self._aid

    # -- declarations -------------------------------------------------------

    def dependent(self, name: str) -> Expr:
        """Declare (or fetch) a dependent variable; returns its order-0 jet."""
        if name not in self._deps:
            self._deps[name] = len(self._deps)
        return self.jet(name, 0, 0)

    def dependents(self):
        return list(self._deps)

    def has_dependent(self, name):
        return name in self._deps

    def parameter(self, name: str) -> Expr:
        """Declare (or fetch) a parameter function of (t, x)."""
        if name not in self._param_ids:
            self._param_ids[name] = len(self._param_ids)
        return self.param(name, 0, 0)

    def has_parameter(self, name):
        return name in self._param_ids

    # -- atoms --------------------------------------------------------------

    def jet_atom(self, dep: str, kt: int, kx: int) -> Jet:
        if dep not in self._deps:
            raise ExprError(f"undeclared dependent variable: {dep}")
        key = (dep, kt, kx)
        a = self._jets.get(key)
        if a is None:
            a = Jet(self._next_aid(), dep, self._deps[dep], kt, kx)
            self._jets[key] = a
        return a

    def param_atom(self, name: str, kt: int, kx: int, args=None) -> ParamD:
        if name not in self._param_ids:
            raise ExprError(f"undeclared parameter function: {name}")
        key = (name, kt, kx, None if args is None else (args[0].eid, args[1].eid))
        a = self._params.get(key)
        if a is None:
            a = ParamD(self._next_aid(), name, self._param_ids[name], kt, kx, args)
            self._params[key] = a
        return a

    def _log_atom(self, arg: Expr) -> LogAtom:
        a = self._logs.get(arg)
        if a is None:
            a = LogAtom(self._next_aid(), arg)
            self._logs[arg] = a
        return a

    def atom_expr(self, a: Atom) -> Expr:
        return self._build({(((a, 1),), ()): Fraction(1)}, dict(_ONE_POLY))

    def jet(self, dep, kt=0, kx=0) -> Expr:
        return self.atom_expr(self.jet_atom(dep, kt, kx))

    def param(self, name, kt=0, kx=0, args=None) -> Expr:
        return self.param_atom_expr(self.param_atom(name, kt, kx, args))

    def param_atom_expr(self, a: ParamD) -> Expr:
        return self.atom_expr(a)

    def num(self, value: Number) -> Expr:
        value = Fraction(value)
        if not value:
            return self.zero
        return self._build({_EMPTY_MONO: value}, dict(_ONE_POLY))

    def _coerce(self, v):
        if isinstance(v, Expr):
            if v.session is not self:
                raise ExprError("expressions belong to different sessions")
            return v
        if isinstance(v, (int, Fraction)):
            return self.num(v)
        raise ExprError(f"cannot coerce {v!r} to an expression")

    # -- interning ----------------------------------------------------------

    def _build(self, num, den) -> Expr:
        key = (_poly_key(num), _poly_key(den))
        e = self._intern.get(key)
        if e is None:
            self._eid += 1
            e = Expr(self, num, den, self._eid)
            self._intern[key] = e
        return e

    # -- normalized constructors --------------------------------------------

    def _fold_pending(self, poly, pending) -> Expr:
        """poly plus pending (coeff, mono, extracts) products, as an Expr."""
        total = self._make(poly, dict(_ONE_POLY))
        for c, m, ex in pending:
            term = self._build({m: c}, dict(_ONE_POLY))
            for arg, n in ex:
                term = self._mul(term, self._pow(arg, n))
            total = self._add(total, term)
        return total

    def _make(self, num, den) -> Expr:
        if not den:
            raise DivisionByZero("division by zero expression")
        if not num:
            return self.zero
        # strip the denominator's exponential content into the numerator
        content = _exp_content(den)
        if content:
            neg = tuple(sorted(((b, -f) for b, f in content.items()), key=lambda p: p[0].eid))
            unit = {((), neg): Fraction(1)}
            num2, pn = _poly_mul(num, unit)
            den2, pd = _poly_mul(den, unit)
            if pn or pd:
                return self._div(self._fold_pending(num2, pn), self._fold_pending(den2, pd))
            num, den = num2, den2
        # cancel the gcd
        if den != _ONE_POLY:
            g = self._frac_gcd(num, den)
            if g is not None:
                num_q = self._frac_div(num, g)
                den_q = self._frac_div(den, g)
                if num_q is not None and den_q is not None:
                    num, den = num_q, den_q
            c = den[_lead_mono(den)]
            if c != 1:
                num = _poly_scale(num, 1 / c)
                den = _poly_scale(den, 1 / c)
        return self._build(num, den)

    def _frac_gcd(self, p, q):
        """gcd of two rich polynomials, ignoring exp-unit factors; None when
        it cannot be represented without extraction (caller skips cancel)."""
        cp = _exp_content(p)
        cq = _exp_content(q)
        ps = self._strip_exp(p, cp)
        qs = self._strip_exp(q, cq)
        enc, dec, _ = _encode([ps, qs])
        g = _pp_gcd(enc[0], enc[1])
        if len(g) == 1 and not any(next(iter(g))):
            return None  # gcd is 1
        return dec(g)

    @staticmethod
    def _strip_exp(p, content):
        if not content:
            return p
        out = {}
        for (ords, eps), c in p.items():
            ep = dict(eps)
            for b, f in content.items():
                nf = ep.get(b, Fraction(0)) - f
                if nf:
                    ep[b] = nf
                else:
                    ep.pop(b, None)
            out[(ords, tuple(sorted(ep.items(), key=lambda q: q[0].eid)))] = c
        return out

    def _frac_div(self, p, g):
        """Exact division of a rich polynomial by g; None on failure.
        Exponential factors are units: the quotient carries exp(cp - cg)."""
        cp = _exp_content(p)
        cg = _exp_content(g)
        ps = self._strip_exp(p, cp)
        gs = self._strip_exp(g, cg)
        enc, dec, _ = _encode([ps, gs])
        q = _pp_div_exact(enc[0], enc[1])
        if q is None:
            return None
        qd = dec(q)
        if qd is None:
            return None
        back = dict(cp)
        for b, f in cg.items():
            nf = back.get(b, _F0) - f
            if nf:
                back[b] = nf
            else:
                back.pop(b, None)
        if back:
            unit = {((), tuple(sorted(back.items(), key=lambda r: r[0].eid))): Fraction(1)}
            qd, pend = _poly_mul(qd, unit)
            if pend:
                return None
        return qd

    def exact_quotient(self, a: Expr, b: Expr) -> Optional[Expr]:
        """a/b when b's numerator exactly divides a's numerator (times b's
        denominator) as polynomials, exponential units aside; None when the
        division leaves a remainder."""
        a = self._coerce(a)
        b = self._coerce(b)
        if b.is_zero():
            raise DivisionByZero("division by zero expression")
        if a.is_zero():
            return self.zero
        n, pend = _poly_mul(a.num, b.den)
        if pend:
            return None
        q = self._frac_div(n, b.num)
        if q is None:
            return None
        return self._make(q, dict(a.den))

    # -- arithmetic core ----------------------------------------------------

    def _add(self, a: Expr, b: Expr) -> Expr:
        if a.is_zero():
            return b
        if b.is_zero():
            return a
        if a.den == b.den:
            return self._make(_poly_add(a.num, b.num), dict(a.den))
        n1, p1 = _poly_mul(a.num, b.den)
        n2, p2 = _poly_mul(b.num, a.den)
        d, p3 = _poly_mul(a.den, b.den)
        if p1 or p2 or p3:
            return self._div(
                self._add(self._fold_pending(n1, p1), self._fold_pending(n2, p2)),
                self._fold_pending(d, p3),
            )
        return self._make(_poly_add(n1, n2), d)

    def _neg(self, a: Expr) -> Expr:
        if a.is_zero():
            return a
        return self._build(_poly_neg(a.num), a.den)

    def _mul(self, a: Expr, b: Expr) -> Expr:
        if a.is_zero() or b.is_zero():
            return self.zero
        if a.is_one():
            return b
        if b.is_one():
            return a
        n, pn = _poly_mul(a.num, b.num)
        d, pd = _poly_mul(a.den, b.den)
        if pn or pd:
            return self._div(self._fold_pending(n, pn), self._fold_pending(d, pd))
        return self._make(n, d)

    def _div(self, a: Expr, b: Expr) -> Expr:
        if b.is_zero():
            raise DivisionByZero("division by zero expression")
        if a.is_zero():
            return self.zero
        n, pn = _poly_mul(a.num, b.den)
        d, pd = _poly_mul(a.den, b.num)
        if pn or pd:
            return self._div(self._fold_pending(n, pn), self._fold_pending(d, pd))
        return self._make(n, d)

    def _pow(self, a: Expr, k: int) -> Expr:
        if k == 0:
            return self.one
        if a.is_zero():
            if k < 0:
                raise DivisionByZero("zero to a negative power")
            return self.zero
        if k < 0:
            return self._div(self.one, self._pow(a, -k))
        out = self.one
        base = a
        while k:
            if k & 1:
                out = self._mul(out, base)
            base_next = None
            k >>= 1
            if k:
                base_next = self._mul(base, base)
                base = base_next
        return out

    # -- kernels ------------------------------------------------------------

    def exp(self, e) -> Expr:
        """exp kernel.  The argument is decomposed per numerator monomial so
        products of exponentials always merge."""
        e = self._coerce(e)
        if e.is_zero():
            return self.one
        acc_mono = {}
        extracts = []
        den_is_one = e.den == _ONE_POLY
        for m, c in e.num.items():
            if den_is_one:
                base = self._build({m: Fraction(1)}, dict(_ONE_POLY))
            else:
                base = self._make({m: Fraction(1)}, dict(e.den))
                # _make may cancel into a constant multiple; renormalize the
                # coefficient so the base is coefficient-stripped
                cbase = base._coeff_normal()
                if cbase != 1:
                    c = c * cbase
                    base = self._mul(base, self.num(Fraction(1, 1) / cbase))
            f = acc_mono.get(base, Fraction(0)) + Fraction(c)
            if f:
                acc_mono[base] = f
            else:
                acc_mono.pop(base, None)
        eps, extracted = _normalize_exp_map(acc_mono)
        extracts.extend(extracted)
        out = self._build({((), eps): Fraction(1)}, dict(_ONE_POLY)) if eps else self.one
        for arg, n in extracts:
            out = self._mul(out, self._pow(arg, n))
        return out

    def log(self, e) -> Expr:
        e = self._coerce(e)
        if e.is_zero():
            raise DivisionByZero("log of zero expression")
        if e.is_one():
            return self.zero
        # log(exp(s)) -> s: argument is exactly one exp monomial, coeff 1
        if e.den == _ONE_POLY and len(e.num) == 1:
            (m, c), = e.num.items()
            ords, eps = m
            if c == 1 and not ords and eps:
                out = self.zero
                for b, f in eps:
                    out = self._add(out, self._mul(self.num(f), b))
                return out
        return self.atom_expr(self._log_atom(e))

    # -- canonicalize (raw trees) --------------------------------------------

    def canonicalize(self, tree) -> Expr:
        """Canonicalize a raw expression tree.

        Trees are Exprs, numbers, Atoms, or tuples ('add'|'sub'|'mul'|'div'|
        'neg'|'pow'|'exp'|'log', operands...); 'pow' takes an integer
        exponent."""
        if isinstance(tree, Expr):
            return tree
        if isinstance(tree, (int, Fraction)):
            return self.num(tree)
        if isinstance(tree, Atom):
            return self.atom_expr(tree)
        if not isinstance(tree, tuple) or not tree:
            raise ExprError(f"bad raw tree node: {tree!r}")
        op, *args = tree
        if op == "add":
            return self.canonicalize(args[0]) + self.canonicalize(args[1])
        if op == "sub":
            return self.canonicalize(args[0]) - self.canonicalize(args[1])
        if op == "mul":
            return self.canonicalize(args[0]) * self.canonicalize(args[1])
        if op == "div":
            return self.canonicalize(args[0]) / self.canonicalize(args[1])
        if op == "neg":
            return -self.canonicalize(args[0])
        if op == "pow":
            if not isinstance(args[1], int):
                raise ExprError("pow exponent must be an integer")
            return self.canonicalize(args[0]) ** args[1]
        if op == "exp":
            return self.exp(self.canonicalize(args[0]))
        if op == "log":
            return self.log(self.canonicalize(args[0]))
        raise ExprError(f"unknown raw tree operator: {op!r}")

    # -- calculus -----------------------------------------------------------

    def partial(self, e: Expr, a: Atom) -> Expr:
        """Formal partial derivative: all atoms other than `a` are constants;
        the chain rule applies through exp/log kernels and composed-argument
        parameter values."""
        e = self._coerce(e)
        if a not in e.atoms():
            return self.zero
        num_d = self._poly_partial(e.num, a)
        if e.den == _ONE_POLY:
            return num_d
        den_d = self._poly_partial(e.den, a)
        den = self._build(dict(e.den), dict(_ONE_POLY))
        num = self._build(dict(e.num), dict(_ONE_POLY))
        return self._div(num_d * den - num * den_d, den * den)

    def _poly_partial(self, p, a) -> Expr:
        total = self.zero
        for m, c in p.items():
            ords, eps = m
            mono = self._build({m: c}, dict(_ONE_POLY))
            term = self.zero
            for atom, k in ords:
                if atom is a:
                    term = term + self.num(k) / self.atom_expr(atom)
                elif isinstance(atom, LogAtom):
                    if a in atom.arg.atoms():
                        term = term + self.num(k) * self.partial(atom.arg, a) / (
                            atom.arg * self.atom_expr(atom)
                        )
                elif isinstance(atom, ParamD) and atom.args is not None:
                    if a in self.atom_expr(atom).atoms() and atom is not a:
                        da = self._composed_partial(atom, a)
                        term = term + self.num(k) * da / self.atom_expr(atom)
            for b, f in eps:
                if a in b.atoms():
                    term = term + self.num(f) * self.partial(b, a)
            if term:
                total = total + mono * term
        return total

    def _composed_partial(self, atom: ParamD, a: Atom) -> Expr:
        """d/da of a composed parameter value, via the chain rule through its
        argument expressions."""
        A, B = atom.args
        dA = self.partial(A, a)
        dB = self.partial(B, a)
        out = self.zero
        if dA:
            out = out + self.param(atom.param, atom.kt + 1, atom.kx, atom.args) * dA
        if dB:
            out = out + self.param(atom.param, atom.kt, atom.kx + 1, atom.args) * dB
        return out

    # -- substitution -------------------------------------------------------

    def substitute(self, e: Expr, bindings: dict) -> Expr:
        """Simultaneous substitution of atoms by expressions, followed by
        canonicalization.  Keys are Atoms; kernels and composed arguments are
        rewritten recursively."""
        e = self._coerce(e)
        if not bindings or not (set(bindings) & set(e.atoms())):
            return e
        num = self._subst_poly(e.num, bindings)
        den = self._subst_poly(e.den, bindings)
        return self._div(num, den)

    def _subst_poly(self, p, bindings) -> Expr:
        total = self.zero
        for (ords, eps), c in p.items():
            term = self.num(c)
            for atom, k in ords:
                term = term * self._subst_atom(atom, bindings) ** k
            if eps:
                arg = self.zero
                for b, f in eps:
                    arg = arg + self.num(f) * self.substitute(b, bindings)
                term = term * self.exp(arg)
            total = total + term
        return total

    def _subst_atom(self, atom, bindings) -> Expr:
        if atom in bindings:
            return self._coerce(bindings[atom])
        if isinstance(atom, LogAtom):
            new_arg = self.substitute(atom.arg, bindings)
            if new_arg is atom.arg:
                return self.atom_expr(atom)
            return self.log(new_arg)
        if isinstance(atom, ParamD) and atom.args is not None:
            A = self.substitute(atom.args[0], bindings)
            B = self.substitute(atom.args[1], bindings)
            if A is atom.args[0] and B is atom.args[1]:
                return self.atom_expr(atom)
            return self.param(atom.param, atom.kt, atom.kx, (A, B))
        return self.atom_expr(atom)

    # -- numeric evaluation --------------------------------------------------

    def evaluate(self, e: Expr, point: dict) -> float:
        """Evaluate at a point mapping atoms to finite reals.  Parameter
        functions may instead be given by name as callables
        f(kt, kx, t, x) -> float, which also covers composed values.
        Raises NumericSingularity when a denominator magnitude drops below
        1e-12 or a log leaves its domain."""
        e = self._coerce(e)
        num = self._eval_poly(e.num, point)
        if e.den == _ONE_POLY:
            return num
        den = self._eval_poly(e.den, point)
        if abs(den) < 1e-12:
            raise NumericSingularity(f"denominator ~ 0 ({den!r})")
        return num / den

    def _eval_poly(self, p, point) -> float:
        total = 0.0
        for (ords, eps), c in p.items():
            v = float(c)
            for atom, k in ords:
                v *= self._eval_atom(atom, point) ** k
            if eps:
                s = 0.0
                for b, f in eps:
                    s += float(f) * self.evaluate(b, point)
                v *= math.exp(s)
            total += v
        return total

    def _eval_atom(self, atom, point) -> float:
        if atom in point:
            return float(point[atom])
        if isinstance(atom, LogAtom):
            v = self.evaluate(atom.arg, point)
            if v < 1e-12:
                raise NumericSingularity(f"log argument ~<= 0 ({v!r})")
            return math.log(v)
        if isinstance(atom, ParamD):
            fn = point.get(atom.param)
            if callable(fn):
                if atom.args is None:
                    tv = self._eval_atom(self.t, point)
                    xv = self._eval_atom(self.x, point)
                else:
                    tv = self.evaluate(atom.args[0], point)
                    xv = self.evaluate(atom.args[1], point)
                return float(fn(atom.kt, atom.kx, tv, xv))
        raise ExprError(f"no value supplied for atom {atom}")

    # -- printing -----------------------------------------------------------

    def format(self, e: Expr) -> str:
        e = self._coerce(e)
        if e.is_zero():
            return "0"
        num = self._format_poly(e.num)
        if e.den == _ONE_POLY:
            return num
        den = self._format_poly(e.den)
        return f"({num})/({den})"

    def _format_poly(self, p) -> str:
        parts = []
        for m in sorted(p, key=_mono_key, reverse=True):
            parts.append((p[m], self._format_mono(m, p[m])))
        out = []
        for i, (c, body) in enumerate(parts):
            if i == 0:
                out.append(f"(-{body})" if c < 0 else body)
            else:
                out.append(f" - {body}" if c < 0 else f" + {body}")
        return "".join(out)

    def _format_mono(self, m, coeff) -> str:
        ords, eps = m
        factors = []
        c = abs(coeff)
        if c != 1 or (not ords and not eps):
            factors.append(str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}")
        for atom, k in ords:
            s = str(atom)
            if isinstance(atom, LogAtom) or (isinstance(atom, ParamD) and atom.args is not None):
                pass  # already parenthesized by its own syntax
            factors.append(s if k == 1 else f"{s}^{k}")
        if eps:
            arg_parts = []
            for b, f in eps:
                piece = self.format(b)
                if f != 1:
                    fs = str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"
                    piece = f"{fs}*({piece})" if not piece.lstrip("-").isalnum() or f.denominator != 1 else f"{fs}*{piece}"
                arg_parts.append(piece)
            factors.append("exp(" + " + ".join(arg_parts) + ")")
        return "*".join(factors)


def _coeff_normal(self) -> Fraction:
    """Leading coefficient of the numerator (used to strip coefficients off
    exp bases so bases are unique)."""
    return self.num[_lead_mono(self.num)]


Expr._coeff_normal = _coeff_normal
