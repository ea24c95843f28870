"""Conserved vectors: verification, characteristics, triviality/equivalence,
and potential systems.

A conserved vector (T, X) of a solved-form system satisfies
D_t T + D_x X = 0 on all solutions; the characteristic is the multiplier
tuple lambda with D_t T + D_x X = sum lambda^i * (lead_i - rhs_i) identically.
Extraction rewrites every derivative-of-leading occurrence as the derived
right-hand side plus a formal slack, collects the slack coefficients, and
applies the adjoint sign (-D)^gamma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .expr import Expr, ExprError, Jet, ParamD
from .jet import (
    IncompatibleSystem,
    JetError,
    PDESystem,
    ParamFunction,
    Rule,
    Workspace,
    _derive_multi,
    _jet_rank,
    reduce_on_solutions,
    total_derivative,
)

__all__ = [
    "ConservedVector",
    "Characteristic",
    "ConservationLawError",
    "NotAConservationLaw",
    "NotLinearInSlack",
    "IncompatiblePotential",
    "NotEliminable",
    "UnknownSymbol",
    "verify_conservation_law",
    "extract_characteristic",
    "is_trivial",
    "are_equivalent",
    "build_potential_system",
    "potential_equation",
]


class ConservationLawError(ExprError):
    pass


class NotAConservationLaw(ConservationLawError):
    """The divergence does not vanish on solutions."""


class NotLinearInSlack(ConservationLawError):
    """The rewritten divergence is not degree-1 in the slack symbols."""


class IncompatiblePotential(ConservationLawError):
    """The candidate potential rules fail the cross-derivative check."""


class NotEliminable(ConservationLawError):
    """The original dependent cannot be isolated from the v_x rule."""


class UnknownSymbol(ConservationLawError):
    """A dependent variable used by the object is not declared in the system."""


@dataclass
class ConservedVector:
    """Density/flux pair.  `order` is the maximal jet order appearing."""

    T: Expr
    X: Expr
    name: str = ""

    @property
    def order(self) -> int:
        return max(self.T.max_jet_order(), self.X.max_jet_order())

    def __add__(self, other):
        return ConservedVector(self.T + other.T, self.X + other.X)

    def __sub__(self, other):
        return ConservedVector(self.T - other.T, self.X - other.X)

    def scale(self, c) -> "ConservedVector":
        return ConservedVector(self.T * c, self.X * c)

    def is_zero(self) -> bool:
        return self.T.is_zero() and self.X.is_zero()

    def __str__(self):
        return f"({self.T}, {self.X})"


@dataclass
class Characteristic:
    """Multiplier tuple, one component per defining equation of the system."""

    components: List[Expr]
    system: PDESystem

    def is_trivial_on(self, system: PDESystem) -> bool:
        return all(reduce_on_solutions(c, system).is_zero() for c in self.components)

    def __len__(self):
        return len(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def __str__(self):
        if len(self.components) == 1:
            return str(self.components[0])
        return "(" + ", ".join(str(c) for c in self.components) + ")"


def _check_declared(cv: ConservedVector, system: PDESystem):
    deps = set(system.dependents())
    for e in (cv.T, cv.X):
        for a in e.atoms():
            if isinstance(a, Jet) and a.dep not in deps:
                raise UnknownSymbol(
                    f"dependent {a.dep} is not declared in system {system.name}")


def divergence(cv: ConservedVector) -> Expr:
    return total_derivative(cv.T, "t") + total_derivative(cv.X, "x")


def verify_conservation_law(cv: ConservedVector,
                            system: PDESystem) -> Tuple[bool, Expr]:
    """True plus residual 0 when D_t T + D_x X reduces to zero on solutions;
    False plus the nonzero reduced residual otherwise."""
    _check_declared(cv, system)
    residual = reduce_on_solutions(divergence(cv), system)
    return residual.is_zero(), residual


def extract_characteristic(cv: ConservedVector, system: PDESystem) -> Characteristic:
    """Characteristic of a verified conservation law.

    Every occurrence of a derivative of a defining leading coordinate is
    replaced by the derived right-hand side plus a fresh slack symbol; the
    divergence must then be degree 1 in the slacks with a slack-free
    remainder vanishing on solutions.  Component i is the adjoint combination
    sum_gamma (-D_t)^gt (-D_x)^gx of the slack coefficients of rule i,
    reduced on solutions."""
    ws = system.ws
    _check_declared(cv, system)
    R = divergence(cv)
    slacks: Dict[Jet, Tuple[int, Tuple[int, int]]] = {}
    steps = 0
    while True:
        target = None
        idx = None
        for a in R.atoms():
            if isinstance(a, Jet) and not a.dep.startswith("_slack"):
                for i, rule in enumerate(system.rules):
                    if rule.covers(a):
                        if target is None or _jet_rank(a) > _jet_rank(target):
                            target, idx = a, i
                        break
        if target is None:
            break
        steps += 1
        if steps > 5000:
            raise NotAConservationLaw("characteristic rewrite did not terminate")
        rule = system.rules[idx]
        gamma = (target.kt - rule.lead.kt, target.kx - rule.lead.kx)
        ws.dependent(f"_slack{idx}")
        s_atom = ws.jet_atom(f"_slack{idx}", *gamma)
        slacks[s_atom] = (idx, gamma)
        replacement = _derive_multi(rule.rhs, *gamma) + ws.atom_expr(s_atom)
        R = ws.substitute(R, {target: replacement})
    # linearity and slack-free denominators
    for s_atom in slacks:
        for (ords, _eps) in R.den.keys():
            for at, _e in ords:
                if at is s_atom:
                    raise NotLinearInSlack("slack symbol in a denominator")
    coeffs: Dict[Jet, Expr] = {}
    for s_atom in slacks:
        c = ws.partial(R, s_atom)
        for a in c.atoms():
            if isinstance(a, Jet) and a.dep.startswith("_slack"):
                raise NotLinearInSlack(
                    f"slack coefficient of {s_atom} still contains a slack symbol")
        coeffs[s_atom] = c
    remainder = ws.substitute(R, {s: ws.zero for s in slacks})
    remainder = reduce_on_solutions(remainder, system)
    if not remainder.is_zero():
        raise NotAConservationLaw(
            f"divergence leaves residual {remainder} on solutions")
    components = [ws.zero for _ in system.rules]
    for s_atom, (idx, gamma) in slacks.items():
        c = coeffs[s_atom]
        if c.is_zero():
            continue
        term = _derive_multi(c, *gamma)
        if (gamma[0] + gamma[1]) % 2:
            term = -term
        components[idx] = components[idx] + term
    components = [reduce_on_solutions(c, system) for c in components]
    return Characteristic(components, system)


def is_trivial(cv: ConservedVector, system: PDESystem) -> bool:
    """Trivial means the characteristic vanishes on solutions (equivalently
    the vector is a null divergence plus on-solution zero terms)."""
    lam = extract_characteristic(cv, system)
    return lam.is_trivial_on(system)


def are_equivalent(cv1: ConservedVector, cv2: ConservedVector,
                   system: PDESystem) -> bool:
    return is_trivial(cv1 - cv2, system)


def _collect_params(ws: Workspace, exprs) -> List[ParamFunction]:
    names = []
    for e in exprs:
        for a in e.atoms():
            if isinstance(a, ParamD) and a.param not in names:
                names.append(a.param)
    return [ws.paramfns[n] for n in names if n in ws.paramfns]


def build_potential_system(cv: ConservedVector, system: PDESystem,
                           potential: str, name: Optional[str] = None) -> PDESystem:
    """Potential system v_x = T, v_t = -X for a verified conservation law.

    For a single evolution equation the original rule is dropped from the
    defining set and recovered as the cross-derivative consequence; for
    larger systems (second-level potentials) the existing defining rules are
    kept.  The potential name must be fresh."""
    ws = system.ws
    ok, residual = verify_conservation_law(cv, system)
    if not ok:
        raise NotAConservationLaw(
            f"(T, X) is not a conservation law of {system.name}: residual {residual}")
    if potential in system.dependents() or potential in ("t", "x") \
            or ws.has_parameter(potential):
        raise ConservationLawError(f"potential name {potential!r} collides")
    ws.dependent(potential)
    single_evolution = (
        len(system.rules) == 1
        and system.rules[0].lead.kt == 1 and system.rules[0].lead.kx == 0)
    base = [] if single_evolution else list(system.rules)
    rules = base + [
        Rule(ws.jet_atom(potential, 0, 1), cv.T),
        Rule(ws.jet_atom(potential, 1, 0), -cv.X),
    ]
    params = list(system.params)
    for pf in _collect_params(ws, [cv.T, cv.X]):
        if pf not in params:
            params.append(pf)
    try:
        return PDESystem(ws, name or f"{system.name}+{potential}", rules, params)
    except IncompatibleSystem as err:
        raise IncompatiblePotential(str(err)) from err


def potential_equation(potsys: PDESystem, name: Optional[str] = None) -> PDESystem:
    """Single evolution equation in the potential, obtained by eliminating
    the original dependent u = v_x / alpha from a potential system
    {v_x = alpha*u, v_t = F(u, u_x)}."""
    ws = potsys.ws
    vx_rule = None
    vt_rule = None
    for r in potsys.rules:
        if (r.lead.kt, r.lead.kx) == (0, 1):
            vx_rule = r
        elif (r.lead.kt, r.lead.kx) == (1, 0):
            vt_rule = r
    if vx_rule is None or vt_rule is None or vx_rule.lead.dep != vt_rule.lead.dep:
        raise NotEliminable("system is not a two-rule potential system in one potential")
    v = vx_rule.lead.dep
    udeps = sorted({a.dep for r in (vx_rule, vt_rule) for a in r.rhs.atoms()
                    if isinstance(a, Jet)})
    if len(udeps) != 1:
        raise NotEliminable(f"expected one eliminable dependent, found {udeps}")
    u = udeps[0]
    u0 = ws.jet_atom(u, 0, 0)
    alpha = ws.partial(vx_rule.rhs, u0)
    if alpha.is_zero():
        raise NotEliminable(f"{u} cannot be isolated from the {v}_x rule")
    if not (vx_rule.rhs - alpha * ws.atom_expr(u0)).is_zero() or u0 in alpha.atoms():
        raise NotEliminable(f"the {v}_x rule is not linear in {u}")
    u_image = ws.jet(v, 0, 1) / alpha
    bindings = {u0: u_image, ws.jet_atom(u, 0, 1): total_derivative(u_image, "x")}
    for a in vt_rule.rhs.atoms():
        if isinstance(a, Jet) and a.dep == u and a not in bindings:
            raise NotEliminable(f"the {v}_t rule involves {a}, beyond ({u}, {u}_x)")
    rhs = ws.substitute(vt_rule.rhs, bindings)
    params = _collect_params(ws, [rhs]) or list(potsys.params)
    return PDESystem(ws, name or f"{potsys.name}:poteq",
                     [Rule(vt_rule.lead, rhs)], params)
