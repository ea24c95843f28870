"""Lie-symmetry verification and algebra machinery.

verify_lie_symmetry applies the infinitesimal invariance criterion: for each
defining equation lead - rhs of a solved-form system, the prolonged field
applied to it must vanish on solutions.  The module also implements the
symmetry action on conserved vectors, invariant-conservation-law testing,
commutators with exact rational span/closure checks, prolongation of
potential-equation symmetries to the potential system, and pure-potential
detection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

from .conslaw import ConservedVector, UnknownSymbol
from .expr import Expr, ExprError, Jet
from .jet import (
    PDESystem,
    ParamFunction,
    VectorField,
    Workspace,
    apply_point_field,
    point_derivative,
    prolong_vector_field,
    reduce_on_solutions,
    total_derivative,
)

__all__ = [
    "SymmetryError",
    "NotASymmetry",
    "ZeroAlpha",
    "AlgebraPresentation",
    "verify_lie_symmetry",
    "symmetry_action_on_cv",
    "is_invariant_cl",
    "commutator",
    "verify_span_closure",
    "span_coefficients",
    "prolong_potential_symmetry",
    "is_pure_potential",
]


class SymmetryError(ExprError):
    pass


class NotASymmetry(SymmetryError):
    """The field fails the invariance criterion on the given system."""


class ZeroAlpha(SymmetryError):
    """The characteristic function of the potential system vanishes."""


def _check_vf_declared(Q: VectorField, system: PDESystem):
    deps = set(system.dependents())
    for d in Q.dependents():
        if d not in deps:
            raise UnknownSymbol(
                f"vector field acts on {d}, not a dependent of {system.name}")


def verify_lie_symmetry(Q: VectorField, system: PDESystem) -> Tuple[bool, List[Expr]]:
    """Infinitesimal invariance criterion: returns (all zero, residual per
    defining rule), each residual reduced on solutions."""
    _check_vf_declared(Q, system)
    ws = system.ws
    deps = system.dependents()
    order = system.order()
    table = prolong_vector_field(Q, order, deps)
    residuals = []
    for rule in system.rules:
        op = system.operator(rule)
        res = apply_point_field(Q, op, table)
        residuals.append(reduce_on_solutions(res, system))
    return all(r.is_zero() for r in residuals), residuals


def symmetry_action_on_cv(Q: VectorField, cv: ConservedVector,
                          system: PDESystem) -> ConservedVector:
    """Action of a verified symmetry on a conserved vector:

        T~ = Q(T) + T D_x xi - X D_x tau,
        X~ = Q(X) + X D_t tau - T D_t xi,

    with Q prolonged to the vector's order; the result is reduced on
    solutions and is again a conserved vector of the system."""
    ok, residuals = verify_lie_symmetry(Q, system)
    if not ok:
        raise NotASymmetry(
            f"field is not a symmetry of {system.name}: residuals "
            + ", ".join(str(r) for r in residuals))
    ws = system.ws
    deps = sorted(set(system.dependents())
                  | {a.dep for e in (cv.T, cv.X) for a in e.atoms()
                     if isinstance(a, Jet)})
    order = max(cv.order, 1)
    table = prolong_vector_field(Q, order, deps)
    Tn = (apply_point_field(Q, cv.T, table)
          + cv.T * total_derivative(Q.xi, "x")
          - cv.X * total_derivative(Q.tau, "x"))
    Xn = (apply_point_field(Q, cv.X, table)
          + cv.X * total_derivative(Q.tau, "t")
          - cv.T * total_derivative(Q.xi, "t"))
    return ConservedVector(reduce_on_solutions(Tn, system),
                           reduce_on_solutions(Xn, system))


def is_invariant_cl(Q: VectorField, cv: ConservedVector,
                    system: PDESystem) -> bool:
    out = symmetry_action_on_cv(Q, cv, system)
    return out.T.is_zero() and out.X.is_zero()


def commutator(Q1: VectorField, Q2: VectorField) -> VectorField:
    """[Q1, Q2]: coefficients Q1(coeff of Q2) - Q2(coeff of Q1)."""
    ws = Q1.ws

    def act(Q: VectorField, F: Expr) -> Expr:
        out = Q.tau * point_derivative(F, "t") + Q.xi * point_derivative(F, "x")
        for dep, eta in Q.etas.items():
            out = out + eta * ws.partial(F, ws.jet_atom(dep, 0, 0))
        return out

    deps = sorted(set(Q1.dependents()) | set(Q2.dependents()))
    tau = act(Q1, Q2.tau) - act(Q2, Q1.tau)
    xi = act(Q1, Q2.xi) - act(Q2, Q1.xi)
    etas = {d: act(Q1, Q2.eta(d)) - act(Q2, Q1.eta(d)) for d in deps}
    return VectorField(ws, tau, xi, etas)


# ---------------------------------------------------------------------------
# Exact linear algebra over the coefficient representation


def _linear_solve(rows: List[List[Fraction]], rhs: List[Fraction]) -> Optional[List[Fraction]]:
    """Solve A c = b exactly; None when inconsistent.  Under-determined
    systems get zeros on free unknowns."""
    m = len(rows)
    n = len(rows[0]) if m else 0
    A = [list(r) + [rhs[i]] for i, r in enumerate(rows)]
    piv_cols = []
    r = 0
    for c in range(n):
        piv = next((i for i in range(r, m) if A[i][c]), None)
        if piv is None:
            continue
        A[r], A[piv] = A[piv], A[r]
        scale = A[r][c]
        A[r] = [v / scale for v in A[r]]
        for i in range(m):
            if i != r and A[i][c]:
                f = A[i][c]
                A[i] = [v - f * w for v, w in zip(A[i], A[r])]
        piv_cols.append(c)
        r += 1
        if r == m:
            break
    for i in range(r, m):
        if A[i][n]:
            return None
    out = [Fraction(0)] * n
    for i, c in enumerate(piv_cols):
        out[c] = A[i][n]
    return out


def _vf_equation_rows(fields: Sequence[VectorField], target: VectorField):
    """Monomial-by-monomial linear system for sum c_i * fields[i] = target.
    Each coordinate slot is cleared of denominators first, so matching is on
    canonical polynomial coefficients."""
    ws = target.ws
    deps = sorted({d for f in list(fields) + [target] for d in f.dependents()})
    slots = [lambda f: f.tau, lambda f: f.xi] + [
        (lambda d: lambda f: f.eta(d))(d) for d in deps]
    rows: List[List[Fraction]] = []
    rhs: List[Fraction] = []
    one = ws.one
    for get in slots:
        exprs = [get(f) for f in fields] + [get(target)]
        dens = []
        for e in exprs:
            d = ws._build(dict(e.den), dict(one.num))
            if not d.is_one() and d not in dens:
                dens.append(d)
        for d in dens:
            exprs = [e * d for e in exprs]
        monos = sorted({m for e in exprs for m in e.num}, key=_mono_sort)
        for m in monos:
            rows.append([f_e.num.get(m, Fraction(0)) for f_e in exprs[:-1]])
            rhs.append(exprs[-1].num.get(m, Fraction(0)))
    return rows, rhs


def _mono_sort(m):
    from .expr import _mono_key
    return _mono_key(m)


def span_coefficients(fields: Sequence[VectorField],
                      target: VectorField) -> Optional[List[Fraction]]:
    """Exact rational coefficients expressing target in the span of fields;
    None when target is outside the span."""
    rows, rhs = _vf_equation_rows(fields, target)
    if not rows:
        return [Fraction(0)] * len(fields)
    sol = _linear_solve(rows, rhs)
    if sol is None:
        return None
    combo = VectorField(target.ws)
    for c, f in zip(sol, fields):
        combo = combo + f.scale(c)
    if not (combo - target).is_zero():
        return None
    return sol


def verify_span_closure(basis: Sequence[VectorField]):
    """Brute-force closure check: every pairwise commutator must be a
    rational linear combination of the basis.  Returns (True, structure
    constants {(i, j): coefficients}) or (False, (i, j)) for the first
    offending pair."""
    constants: Dict[Tuple[int, int], List[Fraction]] = {}
    for i in range(len(basis)):
        for j in range(i + 1, len(basis)):
            c = commutator(basis[i], basis[j])
            if c.is_zero():
                constants[(i, j)] = [Fraction(0)] * len(basis)
                continue
            sol = span_coefficients(basis, c)
            if sol is None:
                return False, (i, j)
            constants[(i, j)] = sol
    return True, constants


def basis_independent(basis: Sequence[VectorField]) -> bool:
    """Rational linear independence of the coefficient vectors against the
    shared monomial basis."""
    rows, _ = _vf_equation_rows(basis, VectorField(basis[0].ws))
    n = len(basis)
    rank = 0
    A = [list(r) for r in rows]
    m = len(A)
    r = 0
    for c in range(n):
        piv = next((i for i in range(r, m) if A[i][c]), None)
        if piv is None:
            continue
        A[r], A[piv] = A[piv], A[r]
        scale = A[r][c]
        A[r] = [v / scale for v in A[r]]
        for i in range(m):
            if i != r and A[i][c]:
                fquot = A[i][c]
                A[i] = [v - fquot * w for v, w in zip(A[i], A[r])]
        r += 1
        if r == m:
            break
    rank = r
    return rank == n


@dataclass
class AlgebraPresentation:
    """Finite basis plus parametric families (field, constrained function)."""

    name: str
    basis: List[VectorField]
    families: List[Tuple[VectorField, ParamFunction]] = field(default_factory=list)

    def validate(self):
        if self.basis and not basis_independent(self.basis):
            raise SymmetryError(f"basis of {self.name} is linearly dependent")


# ---------------------------------------------------------------------------
# Potential symmetries


def prolong_potential_symmetry(Qhat: VectorField, alpha: Expr,
                               potential: str = "v",
                               original: str = "u") -> VectorField:
    """Extend a symmetry tau d_t + xi d_x + theta d_v of the potential
    equation to the potential system {v_x = alpha u, v_t = alpha u_x -
    alpha_x u} by

        eta = (theta_v - xi_x - (alpha_t/alpha) tau - (alpha_x/alpha) xi) u
              + theta_x / alpha.
    """
    ws = Qhat.ws
    alpha = ws._coerce(alpha)
    if alpha.is_zero():
        raise ZeroAlpha("the characteristic function alpha vanishes")
    v0 = ws.jet_atom(potential, 0, 0)
    theta = Qhat.eta(potential)
    theta_v = ws.partial(theta, v0)
    xi_x = point_derivative(Qhat.xi, "x")
    alpha_t = point_derivative(alpha, "t")
    alpha_x = point_derivative(alpha, "x")
    theta_x = point_derivative(theta, "x")
    u = ws.dependent(original)
    eta = ((theta_v - xi_x - (alpha_t / alpha) * Qhat.tau
            - (alpha_x / alpha) * Qhat.xi) * u + theta_x / alpha)
    etas = dict(Qhat.etas)
    etas[original] = eta
    return VectorField(ws, Qhat.tau, Qhat.xi, etas,
                       name=f"{Qhat.name}^(u)" if Qhat.name else "")


def is_pure_potential(Q: VectorField, potentials: Sequence[str]) -> bool:
    """True when the coefficient over some non-potential dependent genuinely
    depends on a potential variable."""
    ws = Q.ws
    pots = set(potentials)
    for dep, eta in Q.etas.items():
        if dep in pots:
            continue
        for p in pots:
            if not ws.has_dependent(p):
                continue
            if not ws.partial(eta, ws.jet_atom(p, 0, 0)).is_zero():
                return True
    return False
