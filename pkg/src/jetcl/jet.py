"""Jet-space calculus: total derivatives, solved-form PDE systems, reduction
on solutions, and prolongation of point vector fields.

A PDESystem is a rewrite system "leading jet coordinate -> right-hand side"
plus the parameter-function constraints it references.  Reduction to normal
form modulo the system (and modulo the parameter constraints) is the
operational meaning of "vanishes for all solutions".  Systems are assumed
totally nondegenerate; that property is a user obligation and is not checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .expr import (
    Atom,
    DivisionByZero,
    Expr,
    ExprError,
    Indep,
    Jet,
    LogAtom,
    ParamD,
    Session,
)

__all__ = [
    "Workspace",
    "ParamFunction",
    "PDESystem",
    "VectorField",
    "JetError",
    "NonTerminating",
    "IncompatibleSystem",
    "total_derivative",
    "point_derivative",
    "reduce_on_solutions",
    "prolong_vector_field",
    "apply_point_field",
]

REDUCTION_STEP_BOUND = 10000


class JetError(ExprError):
    pass


class NonTerminating(JetError):
    """Reduction exceeded the step bound; the system is malformed."""


class IncompatibleSystem(JetError):
    """Cross-derivatives of rules disagree and cannot be resolved."""


# ---------------------------------------------------------------------------
# Workspace: a Session that also owns parameter-function constraints.


class Workspace(Session):
    """Session plus the registry of parameter-function constraints.

    A constraint is a global fact about the named function (it does not
    belong to any one system), so reduction always consults the registry.
    """

    def __init__(self):
        super().__init__()
        self.paramfns: Dict[str, ParamFunction] = {}

    def declare_parameter(self, name: str, lead: Optional[Tuple[int, int]] = None,
                          rhs: Optional[Expr] = None) -> "ParamFunction":
        self.parameter(name)
        pf = ParamFunction(name, lead, rhs)
        pf.validate(self)
        self.paramfns[name] = pf
        return pf


@dataclass
class ParamFunction:
    """A named function of (t, x), optionally constrained by a solved rule
    lead-derivative -> expression in the function's x-derivatives and t, x."""

    name: str
    lead: Optional[Tuple[int, int]] = None  # (kt, kx), kt >= 1
    rhs: Optional[Expr] = None

    def validate(self, ws: Workspace):
        if self.lead is None:
            return
        kt, kx = self.lead
        if kt < 1:
            raise JetError(f"parameter rule for {self.name} must lead in a t-derivative")
        for a in self.rhs.atoms():
            if isinstance(a, Jet):
                raise JetError(f"parameter rule for {self.name} mentions jet {a}")
            if isinstance(a, ParamD):
                if a.param != self.name:
                    raise JetError(
                        f"parameter rule for {self.name} mentions other function {a.param}")
                if a.kt >= 1:
                    raise JetError(
                        f"parameter rule for {self.name} must not use t-derivatives on the right")

    def covers(self, atom: ParamD) -> bool:
        if self.lead is None or atom.param != self.name:
            return False
        return atom.kt >= self.lead[0] and atom.kx >= self.lead[1]


# ---------------------------------------------------------------------------
# Derivatives


def _shift_atom(ws: Workspace, a: Atom, dt: int, dx: int) -> Atom:
    if isinstance(a, Jet):
        return ws.jet_atom(a.dep, a.kt + dt, a.kx + dx)
    if isinstance(a, ParamD):
        return ws.param_atom(a.param, a.kt + dt, a.kx + dx, a.args)
    raise JetError(f"cannot shift {a}")


def total_derivative(e: Expr, direction: str) -> Expr:
    """Total derivative D_t or D_x: jet coordinates and parameter derivatives
    advance by one index; the chain rule applies through kernels and composed
    parameter arguments."""
    ws = e.session
    if direction == "t":
        div, di = ws.t, 0
    elif direction == "x":
        div, di = ws.x, 1
    else:
        raise JetError(f"direction must be 't' or 'x', not {direction!r}")
    # the formal partial already chains through kernels and composed-argument
    # parameter values, so only plain atoms need their index advanced here
    out = ws.partial(e, div)
    for a in e.atoms():
        if isinstance(a, Jet):
            coeff = ws.partial(e, a)
            if coeff:
                out = out + coeff * ws.atom_expr(
                    _shift_atom(ws, a, 1 - di, di))
        elif isinstance(a, ParamD) and a.args is None:
            coeff = ws.partial(e, a)
            if coeff:
                out = out + coeff * ws.atom_expr(_shift_atom(ws, a, 1 - di, di))
    return out


def point_derivative(e: Expr, direction: str) -> Expr:
    """Derivative in t or x of a function of (t, x) and zero-order dependents,
    holding the dependents fixed: the explicit partial plus the parameter-
    function chain.  This is how a point vector field's tau d_t + xi d_x part
    acts on coefficients that contain parameter functions."""
    ws = e.session
    if direction == "t":
        div, shift = ws.t, (1, 0)
    else:
        div, shift = ws.x, (0, 1)
    out = ws.partial(e, div)
    for a in e.atoms():
        if isinstance(a, ParamD) and a.args is None:
            coeff = ws.partial(e, a)
            if coeff:
                out = out + coeff * ws.atom_expr(_shift_atom(ws, a, *shift))
    return out


def _derive_multi(e: Expr, dt: int, dx: int) -> Expr:
    for _ in range(dt):
        e = total_derivative(e, "t")
    for _ in range(dx):
        e = total_derivative(e, "x")
    return e


# ---------------------------------------------------------------------------
# PDE systems


@dataclass
class Rule:
    lead: Jet
    rhs: Expr

    def covers(self, atom: Jet) -> bool:
        return (atom.dep == self.lead.dep
                and atom.kt >= self.lead.kt and atom.kx >= self.lead.kx)


def _jet_rank(a) -> tuple:
    # reduction ranking: highest t-order first, then total order, then the
    # variable's declaration id
    return (a.kt, a.kt + a.kx, a.skey)


class PDESystem:
    """Solved-form rewrite system over (t, x).

    `rules` are the defining equations in declaration order; characteristic
    components and symmetry residuals range over them.  `consequences` are
    rules recovered from cross-derivative compatibility (e.g. the original
    evolution equation of a potential system); reduction uses both.

    Construction validates the solved form and pairwise compatibility of
    rules sharing a dependent; mixed consequences that do not reduce to zero
    are solved for their highest-ranked jet and recorded as consequences, and
    IncompatibleSystem is raised when that fails.
    """

    def __init__(self, ws: Workspace, name: str, rules: List[Rule],
                 params: Optional[List[ParamFunction]] = None,
                 consequences: Optional[List[Rule]] = None):
        self.ws = ws
        self.name = name
        self.rules = list(rules)
        self.consequences = list(consequences or [])
        self.params = list(params or [])
        self._cache: Dict[Tuple[Jet, Tuple[int, int]], Expr] = {}
        self._validate_solved_form()
        self._check_compatibility()

    # -- structure ----------------------------------------------------------

    @property
    def all_rules(self) -> List[Rule]:
        return self.rules + self.consequences

    def dependents(self) -> List[str]:
        seen = []
        for r in self.rules:
            if r.lead.dep not in seen:
                seen.append(r.lead.dep)
            for a in r.rhs.atoms():
                if isinstance(a, Jet) and a.dep not in seen:
                    seen.append(a.dep)
        return seen

    def rule_for(self, atom: Jet) -> Optional[Rule]:
        for r in self.all_rules:
            if r.covers(atom):
                return r
        return None

    def operator(self, rule: Rule) -> Expr:
        """The equation residual lead - rhs."""
        return self.ws.atom_expr(rule.lead) - rule.rhs

    def order(self) -> int:
        out = 0
        for r in self.all_rules:
            out = max(out, r.lead.order, r.rhs.max_jet_order())
        return out

    def __repr__(self):
        eqs = "; ".join(f"{r.lead} = {r.rhs}" for r in self.rules)
        return f"<PDESystem {self.name}: {eqs}>"

    # -- validation ---------------------------------------------------------

    def _validate_solved_form(self):
        seen = set()
        for r in self.all_rules:
            if r.lead in seen:
                raise JetError(f"duplicate rule for {r.lead} in system {self.name}")
            seen.add(r.lead)
        for r in self.all_rules:
            for a in r.rhs.atoms():
                if isinstance(a, Jet):
                    cover = self.rule_for(a)
                    if cover is not None:
                        raise JetError(
                            f"system {self.name}: right side of {r.lead}-rule contains "
                            f"{a}, a derivative of leading {cover.lead}")

    def _check_compatibility(self):
        for _ in range(8):
            missing = self._first_mismatch()
            if missing is None:
                return
            residual, pair = missing
            recovered = self._solve_consequence(residual)
            if recovered is None:
                raise IncompatibleSystem(
                    f"system {self.name}: rules for {pair[0]} and {pair[1]} have "
                    f"incompatible cross-derivatives (residual {residual})")
            self.consequences.append(recovered)
            self._cache.clear()
            self._validate_solved_form()
        raise IncompatibleSystem(
            f"system {self.name}: compatibility recovery did not stabilize")

    def _first_mismatch(self):
        rs = self.all_rules
        for i in range(len(rs)):
            for j in range(i + 1, len(rs)):
                a, b = rs[i], rs[j]
                if a.lead.dep != b.lead.dep:
                    continue
                kt = max(a.lead.kt, b.lead.kt)
                kx = max(a.lead.kx, b.lead.kx)
                da = _derive_multi(a.rhs, kt - a.lead.kt, kx - a.lead.kx)
                db = _derive_multi(b.rhs, kt - b.lead.kt, kx - b.lead.kx)
                r = reduce_on_solutions(da - db, self)
                if not r.is_zero():
                    return r, (a.lead, b.lead)
        return None

    def _solve_consequence(self, residual: Expr) -> Optional[Rule]:
        ws = self.ws
        jets = [a for a in residual.atoms() if isinstance(a, Jet)]
        if not jets:
            return None
        target = max(jets, key=_jet_rank)
        if self.rule_for(target) is not None:
            return None
        c = ws.partial(residual, target)
        if c.is_zero() or target in c.atoms():
            return None
        rest = ws.substitute(residual, {target: ws.zero})
        try:
            rhs = reduce_on_solutions(-rest / c, self)
        except DivisionByZero:
            return None
        for a in rhs.atoms():
            if isinstance(a, Jet) and _jet_rank(a) >= _jet_rank(target):
                return None
        return Rule(target, rhs)


# ---------------------------------------------------------------------------
# Reduction


def reduce_on_solutions(e: Expr, system: PDESystem) -> Expr:
    """Normal form of e modulo the system's rules (defining plus recovered
    consequences) and the parameter constraints: no derivative of a leading
    coordinate and no constrained parameter derivative remains."""
    ws = system.ws
    steps = 0
    while True:
        target = None
        rule = None
        for a in e.atoms():
            if isinstance(a, Jet):
                r = system.rule_for(a)
                if r is not None and (target is None or _jet_rank(a) > _jet_rank(target)):
                    target, rule = a, r
        if target is None:
            break
        steps += 1
        if steps > REDUCTION_STEP_BOUND:
            raise NonTerminating(f"reduction exceeded {REDUCTION_STEP_BOUND} steps")
        e = ws.substitute(e, {target: _rule_derivative(system, rule, target)})
    # parameter layer
    while True:
        target = None
        for a in e.atoms():
            if isinstance(a, ParamD):
                pf = ws.paramfns.get(a.param)
                if pf is not None and pf.covers(a):
                    if target is None or _param_rank(a) > _param_rank(target):
                        target = a
        if target is None:
            break
        steps += 1
        if steps > REDUCTION_STEP_BOUND:
            raise NonTerminating(f"reduction exceeded {REDUCTION_STEP_BOUND} steps")
        e = ws.substitute(e, {target: _param_derivative(ws, target)})
    return e


def _param_rank(a: ParamD) -> tuple:
    return (a.kt, a.kt + a.kx, a.skey)


def _rule_derivative(system: PDESystem, rule: Rule, atom: Jet) -> Expr:
    gamma = (atom.kt - rule.lead.kt, atom.kx - rule.lead.kx)
    key = (rule.lead, gamma)
    cached = system._cache.get(key)
    if cached is None:
        cached = _derive_multi(rule.rhs, *gamma)
        system._cache[key] = cached
    return cached


def _param_derivative(ws: Workspace, atom: ParamD) -> Expr:
    pf = ws.paramfns[atom.param]
    gamma = (atom.kt - pf.lead[0], atom.kx - pf.lead[1])
    plain = _derive_multi(pf.rhs, *gamma)
    if atom.args is None:
        return plain
    A, B = atom.args
    bindings = {ws.t: A, ws.x: B}
    for a in plain.atoms():
        if isinstance(a, ParamD) and a.args is None:
            bindings[a] = ws.param(a.param, a.kt, a.kx, atom.args)
    return ws.substitute(plain, bindings)


# ---------------------------------------------------------------------------
# Vector fields and prolongation


class VectorField:
    """Infinitesimal generator tau d_t + xi d_x + sum eta^a d_{dep a}.

    Coefficients are expressions in t, x, zero-order dependents, and
    parameter functions; jet coordinates of order >= 1 are rejected
    (point fields only)."""

    def __init__(self, ws: Workspace, tau: Expr = None, xi: Expr = None,
                 etas: Optional[Dict[str, Expr]] = None, name: str = ""):
        self.ws = ws
        self.tau = ws.zero if tau is None else ws._coerce(tau)
        self.xi = ws.zero if xi is None else ws._coerce(xi)
        self.etas = {}
        for dep, e in (etas or {}).items():
            e = ws._coerce(e)
            if e:
                self.etas[dep] = e
        self.name = name
        for label, coeff in self.coefficients():
            for a in coeff.atoms():
                if isinstance(a, Jet) and a.order >= 1:
                    raise JetError(
                        f"vector field coefficient over {label} contains jet {a}; "
                        "point vector fields only")

    def coefficients(self):
        yield "t", self.tau
        yield "x", self.xi
        for dep, e in self.etas.items():
            yield dep, e

    def eta(self, dep: str) -> Expr:
        return self.etas.get(dep, self.ws.zero)

    def dependents(self) -> List[str]:
        return list(self.etas)

    def is_zero(self) -> bool:
        return self.tau.is_zero() and self.xi.is_zero() and not self.etas

    def __add__(self, other):
        etas = dict(self.etas)
        for dep, e in other.etas.items():
            etas[dep] = etas.get(dep, self.ws.zero) + e
        return VectorField(self.ws, self.tau + other.tau, self.xi + other.xi, etas)

    def scale(self, c) -> "VectorField":
        c = self.ws._coerce(c)
        return VectorField(self.ws, self.tau * c, self.xi * c,
                           {d: e * c for d, e in self.etas.items()})

    def __sub__(self, other):
        return self + other.scale(-1)

    def equals(self, other) -> bool:
        if self.tau is not other.tau or self.xi is not other.xi:
            return False
        deps = set(self.etas) | set(other.etas)
        return all(self.eta(d) is other.eta(d) for d in deps)

    def __str__(self):
        parts = []
        for label, coeff in self.coefficients():
            if coeff.is_zero():
                continue
            cs = str(coeff)
            parts.append(f"({cs})*d{label}")
        return " + ".join(parts) if parts else "0"

    def __repr__(self):
        nm = f"{self.name}: " if self.name else ""
        return f"<VectorField {nm}{self}>"


def prolong_vector_field(Q: VectorField, order: int,
                         dependents: Optional[List[str]] = None) -> Dict[Tuple[str, int, int], Expr]:
    """Coefficients of the prolonged field over every jet coordinate of the
    given dependents up to the given order, via the standard recursion
    eta^{a,alpha+1_i} = D_i eta^{a,alpha} - (D_i tau) u^a_{alpha+(1,0)}
                                         - (D_i xi)  u^a_{alpha+(0,1)}."""
    ws = Q.ws
    deps = dependents if dependents is not None else Q.dependents()
    dtau_t = total_derivative(Q.tau, "t")
    dtau_x = total_derivative(Q.tau, "x")
    dxi_t = total_derivative(Q.xi, "t")
    dxi_x = total_derivative(Q.xi, "x")
    table: Dict[Tuple[str, int, int], Expr] = {}
    for dep in deps:
        table[(dep, 0, 0)] = Q.eta(dep)
        for total in range(1, order + 1):
            for kt in range(total + 1):
                kx = total - kt
                if kt > 0:
                    prev = table[(dep, kt - 1, kx)]
                    val = (total_derivative(prev, "t")
                           - dtau_t * ws.jet(dep, kt, kx)
                           - dxi_t * ws.jet(dep, kt - 1, kx + 1))
                else:
                    prev = table[(dep, kt, kx - 1)]
                    val = (total_derivative(prev, "x")
                           - dtau_x * ws.jet(dep, kt + 1, kx - 1)
                           - dxi_x * ws.jet(dep, kt, kx))
                table[(dep, kt, kx)] = val
    return table


def apply_point_field(Q: VectorField, e: Expr,
                      prolongation: Optional[Dict[Tuple[str, int, int], Expr]] = None) -> Expr:
    """Apply Q (prolonged as needed) as a derivation to a differential
    function: tau and xi act through the explicit (t, x) dependence including
    parameter functions; jet coordinates are moved by the prolonged
    coefficients."""
    ws = Q.ws
    jets = sorted((a for a in e.atoms() if isinstance(a, Jet)),
                  key=lambda a: a.skey)
    if prolongation is None:
        deps = sorted({a.dep for a in jets})
        order = max((a.order for a in jets), default=0)
        prolongation = prolong_vector_field(Q, order, deps)
    out = Q.tau * point_derivative(e, "t") + Q.xi * point_derivative(e, "x")
    for a in jets:
        coeff = prolongation.get((a.dep, a.kt, a.kx))
        if coeff is None:
            raise JetError(f"prolongation table lacks {a}")
        if coeff:
            out = out + ws.partial(e, a) * coeff
    return out
