"""Point transformations between solved-form systems.

A transformation carries forward maps (target coordinates as expressions in
the source chart) and user-supplied inverse maps (source coordinates as
expressions in the target chart, over the same atoms).  Inverses are
validated numerically, never solved symbolically.  Prolongation to
derivatives solves the contact conditions

    D_t F = F_t~ D_t t~ + F_x~ D_t x~,   D_x F = F_t~ D_x t~ + F_x~ D_x x~

recursively, so every target jet coordinate gets an expression in source
jets.  The Jacobian J = D_t t~ D_x x~ - D_x t~ D_t x~ must not vanish.
"""

from __future__ import annotations

import random
from typing import Dict, List, Optional, Tuple

from .conslaw import Characteristic, ConservedVector, verify_conservation_law
from .expr import Expr, ExprError, Jet, NumericSingularity, ParamD
from .jet import (
    PDESystem,
    Rule,
    VectorField,
    Workspace,
    _jet_rank,
    point_derivative,
    reduce_on_solutions,
    total_derivative,
)

__all__ = [
    "PointTransformation",
    "TransformError",
    "SingularJacobian",
    "MapMismatch",
    "InverseMismatch",
    "prolong_transformation",
    "transform_conserved_vector",
    "compute_multiplier",
    "verify_system_mapping",
    "transform_characteristic",
    "push_forward_vector_field",
    "prolong_to_potential",
]


class TransformError(ExprError):
    pass


class SingularJacobian(TransformError):
    """The transformation's Jacobian in (t, x) reduces to zero."""


class MapMismatch(TransformError):
    """The transformation does not map the source system to the target."""


class InverseMismatch(TransformError):
    """The supplied inverse fails the numeric round-trip check."""


_SAMPLE_BOX = {"t": (0.25, 0.9), "x": (0.3, 1.2), "dep": (0.4, 1.6)}


class PointTransformation:
    """Invertible point transformation of the chart (t, x, dependents...).

    `forward` maps coordinate names ('t', 'x', dependent names) to
    expressions in the source chart; `inverse` maps the same names to
    expressions in the target chart.  Both charts use the same atoms; which
    chart an expression lives in is contextual.  `domain` records sampling
    restrictions as documentation only."""

    def __init__(self, ws: Workspace, forward: Dict[str, Expr],
                 inverse: Dict[str, Expr], name: str = "",
                 domain: str = "", validate: bool = True, seed: int = 7):
        self.ws = ws
        self.name = name
        self.domain = domain
        self.forward = {k: ws._coerce(v) for k, v in forward.items()}
        self.inverse = {k: ws._coerce(v) for k, v in inverse.items()}
        if set(self.forward) != set(self.inverse):
            raise TransformError("forward and inverse must map the same coordinates")
        if "t" not in self.forward or "x" not in self.forward:
            raise TransformError("a point transformation must map t and x")
        self.deps = [k for k in self.forward if k not in ("t", "x")]
        for k, e in self.forward.items():
            for a in e.atoms():
                if isinstance(a, Jet) and a.order >= 1:
                    raise TransformError(
                        f"forward map for {k} contains jet {a}; point transformations "
                        "depend on (t, x, dependents) only")
        self.jacobian = (total_derivative(self.forward["t"], "t")
                         * total_derivative(self.forward["x"], "x")
                         - total_derivative(self.forward["t"], "x")
                         * total_derivative(self.forward["x"], "t"))
        if self.jacobian.is_zero():
            raise SingularJacobian(f"transformation {name or '?'} has zero Jacobian")
        self._prolong: Dict[Tuple[str, int, int], Expr] = {}
        self._inverse_pt: Optional[PointTransformation] = None
        if validate:
            self._check_inverse(seed)

    # -- numeric inverse validation -----------------------------------------

    def _sample_point(self, rng) -> dict:
        pt = {self.ws.t: rng.uniform(*_SAMPLE_BOX["t"]),
              self.ws.x: rng.uniform(*_SAMPLE_BOX["x"])}
        for dep in self.deps:
            pt[self.ws.jet_atom(dep, 0, 0)] = rng.uniform(*_SAMPLE_BOX["dep"])
        return pt

    def _check_inverse(self, seed: int, points: int = 30, tol: float = 1e-9):
        rng = random.Random(seed)
        checked = 0
        attempts = 0
        while checked < points and attempts < points * 20:
            attempts += 1
            pt = self._sample_point(rng)
            try:
                image = {}
                image[self.ws.t] = self.ws.evaluate(self.forward["t"], pt)
                image[self.ws.x] = self.ws.evaluate(self.forward["x"], pt)
                for dep in self.deps:
                    image[self.ws.jet_atom(dep, 0, 0)] = self.ws.evaluate(
                        self.forward[dep], pt)
                back = {
                    "t": self.ws.evaluate(self.inverse["t"], image),
                    "x": self.ws.evaluate(self.inverse["x"], image),
                }
                for dep in self.deps:
                    back[dep] = self.ws.evaluate(self.inverse[dep], image)
                jval = self.ws.evaluate(self.jacobian, pt)
            except NumericSingularity:
                continue
            if abs(jval) < 1e-9:
                continue
            expect = {"t": pt[self.ws.t], "x": pt[self.ws.x]}
            for dep in self.deps:
                expect[dep] = pt[self.ws.jet_atom(dep, 0, 0)]
            for k, v in back.items():
                if abs(v - expect[k]) > tol * max(1.0, abs(expect[k])):
                    raise InverseMismatch(
                        f"inverse of {self.name or '?'} fails at {k}: "
                        f"{v} != {expect[k]}")
            checked += 1
        if checked < points:
            raise InverseMismatch(
                f"could not find {points} regular sample points for {self.name or '?'}")

    # -- structure -----------------------------------------------------------

    def inverted(self) -> "PointTransformation":
        """The inverse transformation (forward and inverse maps swapped);
        numeric validation is inherited, not repeated."""
        if self._inverse_pt is None:
            g = PointTransformation(self.ws, dict(self.inverse), dict(self.forward),
                                    name=f"{self.name}^-1", domain=self.domain,
                                    validate=False)
            g._inverse_pt = self
            self._inverse_pt = g
        return self._inverse_pt

    def prolong(self, dep: str, kt: int, kx: int) -> Expr:
        """Expression for the target jet coordinate (dep, kt, kx) in source
        jets; built on demand and cached."""
        key = (dep, kt, kx)
        got = self._prolong.get(key)
        if got is not None:
            return got
        if dep not in self.deps:
            raise TransformError(f"transformation does not map dependent {dep}")
        if kt == 0 and kx == 0:
            val = self.forward[dep]
        elif kt > 0:
            val = self._dt_target(self.prolong(dep, kt - 1, kx))
        else:
            val = self._dx_target(self.prolong(dep, kt, kx - 1))
        self._prolong[key] = val
        return val

    def _dt_target(self, F: Expr) -> Expr:
        tt = self.forward["t"]
        xx = self.forward["x"]
        return (total_derivative(F, "t") * total_derivative(xx, "x")
                - total_derivative(F, "x") * total_derivative(xx, "t")) / self.jacobian

    def _dx_target(self, F: Expr) -> Expr:
        tt = self.forward["t"]
        return (total_derivative(F, "x") * total_derivative(tt, "t")
                - total_derivative(F, "t") * total_derivative(tt, "x")) / self.jacobian

    # -- chart rewriting ------------------------------------------------------

    def source_to_target_bindings(self, exprs: List[Expr]) -> dict:
        """Bindings that rewrite source-chart expressions in the target chart:
        source atoms are replaced through the inverse transformation's
        prolongation, parameter values become composed values."""
        inv = self.inverted()
        bindings = {self.ws.t: self.inverse["t"], self.ws.x: self.inverse["x"]}
        for e in exprs:
            for a in e.atoms():
                if isinstance(a, Jet) and a.dep in self.deps and a not in bindings:
                    bindings[a] = inv.prolong(a.dep, a.kt, a.kx)
                elif isinstance(a, ParamD) and a.args is None and a not in bindings:
                    bindings[a] = self.ws.param(
                        a.param, a.kt, a.kx, (self.inverse["t"], self.inverse["x"]))
        return bindings

    def target_to_source_bindings(self, exprs: List[Expr]) -> dict:
        """Bindings that rewrite target-chart expressions in the source chart
        through the forward maps and their prolongation."""
        bindings = {self.ws.t: self.forward["t"], self.ws.x: self.forward["x"]}
        for e in exprs:
            for a in e.atoms():
                if isinstance(a, Jet) and a.dep in self.deps and a not in bindings:
                    bindings[a] = self.prolong(a.dep, a.kt, a.kx)
                elif isinstance(a, ParamD) and a.args is None and a not in bindings:
                    bindings[a] = self.ws.param(
                        a.param, a.kt, a.kx, (self.forward["t"], self.forward["x"]))
        return bindings

    def __repr__(self):
        maps = ", ".join(f"{k}~ = {v}" for k, v in self.forward.items())
        return f"<PointTransformation {self.name}: {maps}>"


def prolong_transformation(g: PointTransformation, order: int) -> Dict[Tuple[str, int, int], Expr]:
    """Prolongation table: every target jet of every mapped dependent up to
    the given order, expressed in source jets."""
    out = {}
    for dep in g.deps:
        for total in range(order + 1):
            for kt in range(total + 1):
                out[(dep, kt, total - kt)] = g.prolong(dep, kt, total - kt)
    return out


def transform_conserved_vector(cv: ConservedVector, g: PointTransformation,
                               source: PDESystem, target: PDESystem) -> ConservedVector:
    """Image of a conserved vector: the source-chart formulas

        T^g = (T D_t t~ + X D_x t~)/J,   X^g = (T D_t x~ + X D_x x~)/J

    rewritten in the target chart through the inverse maps and reduced on the
    target system.  The transformation must map source to target."""
    verify_system_mapping(g, source, target)
    ws = g.ws
    tt, xx = g.forward["t"], g.forward["x"]
    J = g.jacobian
    Tg = (cv.T * total_derivative(tt, "t") + cv.X * total_derivative(tt, "x")) / J
    Xg = (cv.T * total_derivative(xx, "t") + cv.X * total_derivative(xx, "x")) / J
    bindings = g.source_to_target_bindings([Tg, Xg])
    Tg = reduce_on_solutions(ws.substitute(Tg, bindings), target)
    Xg = reduce_on_solutions(ws.substitute(Xg, bindings), target)
    out = ConservedVector(Tg, Xg)
    ok, residual = verify_conservation_law(out, target)
    if not ok:
        raise MapMismatch(
            f"transformed vector fails on {target.name}: residual {residual}")
    return out


def compute_multiplier(g: PointTransformation, source: PDESystem,
                       target: PDESystem) -> Expr:
    """The differential function Lambda with
    (target operator written in source variables) = Lambda * (source
    operator), for single evolution equations; exact division, MapMismatch
    when a remainder is left."""
    if len(source.rules) != 1 or len(target.rules) != 1:
        raise TransformError("compute_multiplier expects single-equation systems; "
                             "use verify_system_mapping for systems")
    return verify_system_mapping(g, source, target)[0]


def verify_system_mapping(g: PointTransformation, source: PDESystem,
                          target: PDESystem) -> List[Expr]:
    """Per-rule multipliers showing g maps source to target.

    The k-th target operator is written in source variables via the
    prolongation, reduced modulo the other source equations, and exactly
    divided by the k-th source operator.  MapMismatch when rule counts
    differ or any division leaves a remainder."""
    ws = g.ws
    if len(source.rules) != len(target.rules):
        raise MapMismatch(
            f"{source.name} has {len(source.rules)} equations, "
            f"{target.name} has {len(target.rules)}")
    multipliers = []
    for k, (srule, trule) in enumerate(zip(source.rules, target.rules)):
        top = target.operator(trule)
        bindings = g.target_to_source_bindings([top])
        top = ws.substitute(top, bindings)
        top = _reduce_excluding(top, source, k)
        lam = ws.exact_quotient(top, source.operator(srule))
        if lam is None:
            raise MapMismatch(
                f"{g.name or 'transformation'} does not map equation {k + 1} of "
                f"{source.name} to equation {k + 1} of {target.name}")
        multipliers.append(lam)
    return multipliers


def _reduce_excluding(e: Expr, system: PDESystem, skip: int) -> Expr:
    """Reduction that ignores the skip-th defining rule (consequence rules and
    parameter constraints still apply)."""
    ws = system.ws
    active = [r for i, r in enumerate(system.rules) if i != skip] + system.consequences
    steps = 0
    while True:
        target = None
        rule = None
        for a in e.atoms():
            if isinstance(a, Jet):
                for r in active:
                    if r.covers(a):
                        if target is None or _jet_rank(a) > _jet_rank(target):
                            target, rule = a, r
                        break
        if target is None:
            break
        steps += 1
        if steps > 5000:
            break
        gamma = (target.kt - rule.lead.kt, target.kx - rule.lead.kx)
        rhs = rule.rhs
        for _ in range(gamma[0]):
            rhs = total_derivative(rhs, "t")
        for _ in range(gamma[1]):
            rhs = total_derivative(rhs, "x")
        e = ws.substitute(e, {target: rhs})
    return e


def transform_characteristic(lam, g: PointTransformation, multiplier: Expr,
                             source: Optional[PDESystem] = None):
    """Pull a target-chart characteristic back to the source:
    lambda = Lambda * J * (lambda~ with target variables substituted by the
    forward maps), reduced on the source system when given.  Single-equation
    case only."""
    ws = g.ws
    if isinstance(lam, Characteristic):
        if len(lam.components) != 1:
            raise TransformError("characteristic mapping is single-equation only")
        lam_expr = lam.components[0]
    else:
        lam_expr = ws._coerce(lam)
    bindings = g.target_to_source_bindings([lam_expr])
    pulled = multiplier * g.jacobian * ws.substitute(lam_expr, bindings)
    if source is not None:
        pulled = reduce_on_solutions(pulled, source)
    return pulled


def push_forward_vector_field(Q: VectorField, g: PointTransformation) -> VectorField:
    """Rewrite an infinitesimal generator in the image chart: the new
    coefficients are (Q t~, Q x~, Q u~) expressed in target variables."""
    ws = g.ws

    def act(F: Expr) -> Expr:
        out = Q.tau * point_derivative(F, "t") + Q.xi * point_derivative(F, "x")
        for dep, eta in Q.etas.items():
            a = ws.jet_atom(dep, 0, 0)
            out = out + eta * ws.partial(F, a)
        return out

    images = {name: act(e) for name, e in g.forward.items()}
    bindings = g.source_to_target_bindings(list(images.values()))
    images = {name: ws.substitute(e, bindings) for name, e in images.items()}
    return VectorField(ws, tau=images["t"], xi=images["x"],
                       etas={d: e for d, e in images.items() if d not in ("t", "x")},
                       name=f"{g.name}_*({Q.name})" if Q.name else "")


def prolong_to_potential(g: PointTransformation, potentials: List[str]) -> PointTransformation:
    """Trivial prolongation to potential variables: each listed potential is
    mapped identically."""
    ws = g.ws
    fwd = dict(g.forward)
    inv = dict(g.inverse)
    for p in potentials:
        if p in fwd:
            raise TransformError(f"transformation already maps {p}")
        ws.dependent(p)
        fwd[p] = ws.jet(p, 0, 0)
        inv[p] = ws.jet(p, 0, 0)
    return PointTransformation(ws, fwd, inv, name=f"{g.name}_pr" if g.name else "",
                               domain=g.domain, validate=False)
