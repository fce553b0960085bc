"""Covariant Hamiltonian side: Legendre map, De Donder-Weyl system, primary
constraints, kernel of the Legendre pushforward, projectability and
restriction of vector fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import sympy as sp

from .symcore import normalize, substitute, VELOCITY
from .exterior import Form, MultiVector, VectorField, wedge, ext_d, contract, schouten
from .jetgeom import (
    JetChart, RestrictedChart, restrict_chart, pullback, LAGRANGIAN,
    HAMILTONIAN, build_jet_chart, JetGeomError,
)
from .lagrangian import LagrangianSystem, ConstraintSet
from . import numcheck

__all__ = [
    "LegendreMap", "HamiltonianSystem", "legendre_map",
    "verify_primary_constraints", "ddw_system", "hdw_equations",
    "kernel_of_legendre", "pushforward_vector_field", "restrict_vector_field",
    "NotAConstraintError", "NonProjectableError", "NotTangentError",
]


class HamiltonianError(Exception):
    pass


class NotAConstraintError(HamiltonianError):
    pass


class NonProjectableError(HamiltonianError):
    pass


class NotTangentError(HamiltonianError):
    pass


@dataclass
class LegendreMap:
    source: JetChart             # lagrangian side
    target: JetChart             # hamiltonian side
    forward: dict                # target Atom -> expr over source chart
    inverse: dict = dc_field(default_factory=dict)  # velocity Atom -> expr over target
    lag: LagrangianSystem = None
    _jacobian: sp.Matrix = None

    @property
    def jacobian(self):
        """d(forward)/d(source coords), rows in target coordinate order;
        computed on first use."""
        if self._jacobian is None:
            self._jacobian = sp.Matrix(
                [[normalize(sp.diff(sp.sympify(self.forward[t]), c.sym))
                  for c in self.source.coords] for t in self.target.coords])
        return self._jacobian

    def pull_scalar(self, e, normal=True):
        """FL* of a function on the momentum chart.  normal=False skips the
        final normalization (for compositions that are only ever evaluated
        numerically, where expanding would be prohibitive)."""
        out = sp.sympify(e).xreplace(
            {a.sym: sp.sympify(v) for a, v in self.forward.items()})
        return normalize(out) if normal else out

    def pull_form(self, a: Form) -> Form:
        return pullback(a, self.source, self.forward)

    def momentum_syms(self):
        return [self.target.mom(i, mu)
                for i in range(self.target.n) for mu in range(self.target.m)]

    def solve_velocities(self):
        """Solve the forward momentum relations for as many velocities as
        possible (they are linear or low-degree in the corpus).  Returns a
        substitution dict velocity sym -> expr over (x, y, p)."""
        ch = self.source
        vels = [ch.vel(i, mu).sym for i in range(ch.n) for mu in range(ch.m)]
        eqs = []
        vset = set(vels)
        for i in range(self.target.n):
            for mu in range(self.target.m):
                p = self.target.mom(i, mu)
                rhs = sp.sympify(self.forward[p])
                # relations without any velocity are constraints on the image,
                # not invertibility data
                if rhs.free_symbols & vset:
                    eqs.append(sp.Eq(p.sym, rhs))
        sols = sp.solve(eqs, vels, dict=True)
        if not sols:
            return {}
        return {k: normalize(v) for k, v in sols[0].items()}


@dataclass
class HamiltonianSystem:
    chart: object                # full momentum chart or restricted P0 chart
    H: sp.Expr
    Theta: Form
    primary: ConstraintSet = None
    fl: LegendreMap = None
    restricted: bool = False
    _omega: Form = None

    @property
    def Omega(self):
        if self._omega is None:
            self._omega = -1 * ext_d(self.Theta)
        return self._omega


def legendre_map(sys: LagrangianSystem, target: JetChart | None = None,
                 inverse: dict | None = None) -> LegendreMap:
    """FL* p^mu_i = dL/dy^i_mu; inverse bindings filled by the built-in
    solver when the momenta are (low-degree) solvable for the velocities,
    or taken from `inverse` (velocity Atom -> momentum-chart expression)
    when the solve is out of reach (opaque coefficients)."""
    chart = sys.chart
    if target is None:
        target = build_jet_chart(chart.spec, HAMILTONIAN)
    forward = {a: a.sym for a in target.base}
    for y in target.fields:
        forward[y] = y.sym
    for i in range(chart.n):
        for mu in range(chart.m):
            forward[target.mom(i, mu)] = normalize(
                sp.diff(sys.L, chart.vel(i, mu).sym))
    fl = LegendreMap(chart, target, forward, lag=sys)
    if inverse is not None:
        fl.inverse = {a: normalize(v) for a, v in inverse.items()}
    elif sys.regular:
        sol = fl.solve_velocities()
        vels = {chart.vel(i, mu).sym for i in range(chart.n) for mu in range(chart.m)}
        if sol and all(not (sp.sympify(v).free_symbols & vels) for v in sol.values()):
            fl.inverse = {chart.spec.atoms._by_sym[k]: v for k, v in sol.items()}
    return fl


def verify_inverse(fl: LegendreMap, domain=None, points=50, tol=1e-9):
    """Composing the inverse bindings with the forward components must be the
    identity on the velocities.  Checked by a numeric roundtrip: sample a
    source point, push it through the forward map, evaluate the inverse
    bindings at the image.  (Symbolic composition is avoided on purpose; for
    radical maps the substituted radicands grow out of control.)"""
    import random as _random
    ch = fl.source
    domain = domain or numcheck.SampleDomain(assumptions=list(ch.spec.assumptions))
    fwd_items = [(a, sp.sympify(v)) for a, v in fl.forward.items()]
    inv_items = [(a, sp.sympify(v)) for a, v in fl.inverse.items()]
    qs = numcheck.evaluation_atoms(*[v for _, v in fwd_items])
    rng = _random.Random(domain.seed)
    for _ in range(points):
        pt = domain.sample(qs, rng)
        image = dict(pt)
        for a, v in fwd_items:
            image[a.sym] = numcheck.eval_scalar(v, pt)
        for a, v in inv_items:
            got = numcheck.eval_scalar(v, image)
            want = float(pt[a.sym])
            if abs(got - want) > tol * (1 + max(abs(got), abs(want))):
                return False
    return True


def verify_primary_constraints(fl: LegendreMap, declared: ConstraintSet,
                               domain=None):
    """Each declared constraint must pull back to zero through the forward
    map; the independent count must equal nm - rank(Hessian)."""
    from .lagrangian import hessian_and_rank
    report = {"verified": [], "count_ok": None, "expected": None}
    for c, _tag in declared.constraints:
        pulled = fl.pull_scalar(c)
        if pulled != 0:
            v = numcheck.equiv(pulled, sp.S.Zero,
                               domain or numcheck.SampleDomain(
                                   assumptions=list(fl.source.spec.assumptions)))
            if not v.passed:
                raise NotAConstraintError(
                    "pullback of constraint is not zero: %s" % pulled)
        report["verified"].append(c)
    sys = fl.lag
    if sys.hessian_rank is None:
        hessian_and_rank(sys)
    expected = sys.nm - sys.hessian_rank
    report["expected"] = expected
    report["count_ok"] = (len(declared) == expected)
    return report


def _express_in_momentum_chart(fl: LegendreMap, e, constraints: ConstraintSet | None):
    """Rewrite a lagrangian-chart scalar in momentum-chart coordinates by
    eliminating velocities through the solved forward relations."""
    ch = fl.source
    vels = {ch.vel(i, mu).sym for i in range(ch.n) for mu in range(ch.m)}
    if fl.inverse:
        inv = {a.sym: sp.sympify(v) for a, v in fl.inverse.items()}
        out = normalize(sp.sympify(e).xreplace(inv))
        if not out.free_symbols & vels:
            if constraints is not None and constraints.solved:
                out = constraints.substitute(out)
            return out
    sol = fl.solve_velocities()
    out = normalize(sp.sympify(e).xreplace(sol)) if sol else normalize(e)
    if out.free_symbols & vels:
        # the momenta alone do not determine the velocities; solve the forward
        # relations on the constraint submanifold parametrically (free
        # velocities remain as parameters and must cancel when the function
        # factors through the map)
        eqs = []
        for i in range(fl.target.n):
            for mu in range(fl.target.m):
                p = fl.target.mom(i, mu)
                lhs = p.sym
                if constraints is not None and constraints.solved:
                    lhs = constraints.substitute(lhs)
                eq = sp.Eq(lhs, sp.sympify(fl.forward[p]))
                if eq is not sp.true:
                    eqs.append(eq)
        sols = sp.solve(eqs, sorted(vels, key=sp.default_sort_key), dict=True)
        if sols:
            out = normalize(sp.sympify(e).xreplace(
                {k: v for k, v in sols[0].items()}))
    if out.free_symbols & vels:
        raise HamiltonianError(
            "cannot express %s in momentum coordinates (velocities remain)" % e)
    if constraints is not None and constraints.solved:
        out = constraints.substitute(out)
    return out


def ddw_system(fl: LegendreMap, constraints: ConstraintSet | None = None,
               candidate=None) -> HamiltonianSystem:
    """Regular case: H = p^mu_i (FL^-1)* y^i_mu - (FL^-1)* L on the full
    momentum chart.  Almost-regular case (constraints with a solved form):
    H0 on the restricted chart P0, fixed by E_L = FL0* H0; the Hamilton-Cartan
    forms are the restrictions of p dy ^ d^{m-1}x_mu - H d^m x.

    `candidate` supplies a closed form for the regular H (useful when the
    composed expression is correct but unmanageable, e.g. square-root
    Lagrangians); it is accepted only after checking the defining identity
    FL* H = E_L."""
    src, tgt = fl.source, fl.target
    m = src.m
    if constraints is None:
        if candidate is not None:
            H = normalize(candidate)
            v = numcheck.equiv(fl.pull_scalar(H, normal=False), fl.lag.E_L,
                               numcheck.SampleDomain(
                                   assumptions=list(src.spec.assumptions)))
            if not v.passed:
                raise HamiltonianError(
                    "candidate H fails FL* H = E_L (worst %g)" % v.worst)
        else:
            if not fl.inverse:
                raise HamiltonianError("regular construction needs inverse bindings")
            inv = {a.sym: sp.sympify(v) for a, v in fl.inverse.items()}
            H = sp.S.Zero
            for i in range(src.n):
                for mu in range(m):
                    H += tgt.mom(i, mu).sym * inv[src.vel(i, mu).sym]
            H -= sp.sympify(fl.lag.L).xreplace(inv)
            H = normalize(H)
        Theta = Form(tgt, m)
        for i, y in enumerate(tgt.fields):
            dy = Form(tgt, 1, {(tgt.index_of(y),): sp.S.One})
            for mu in range(m):
                Theta = Theta + tgt.mom(i, mu).sym * wedge(dy, tgt.dxm(mu))
        Theta = Theta + (-H) * tgt.omega()
        return HamiltonianSystem(tgt, H, Theta, fl=fl)
    # almost-regular
    if not constraints.solved:
        raise HamiltonianError("almost-regular construction needs a solved form")
    if not constraints.solved_ok():
        raise HamiltonianError("solved form does not zero the constraints")
    p0 = restrict_chart(tgt, constraints.solved, name="P0")
    H0 = _express_in_momentum_chart(fl, fl.lag.E_L, constraints)
    # consistency: E_L = FL0* H0
    check = normalize(fl.pull_scalar(H0) - fl.lag.E_L)
    if check != 0:
        v = numcheck.equiv(fl.pull_scalar(H0), fl.lag.E_L,
                           numcheck.SampleDomain(assumptions=list(src.spec.assumptions)))
        if not v.passed:
            raise HamiltonianError("E_L != FL0* H0 (residual %s)" % check)
    full = Form(tgt, m)
    for i, y in enumerate(tgt.fields):
        dy = Form(tgt, 1, {(tgt.index_of(y),): sp.S.One})
        for mu in range(m):
            full = full + tgt.mom(i, mu).sym * wedge(dy, tgt.dxm(mu))
    Theta0 = pullback(full, p0, p0.inclusion_components()) + (-H0) * p0.omega()
    sys0 = HamiltonianSystem(p0, H0, Theta0,
                             primary=constraints, fl=fl, restricted=True)
    return sys0


def hdw_equations(hs: HamiltonianSystem):
    """Hamilton-De Donder-Weyl field equations as formal residuals on section
    components:  dy^i/dx^mu - dH/dp^mu_i  and  dp^mu_i/dx^mu + dH/dy^i.
    Formal derivative atoms NAME_d[..., mu] stand for d(NAME)/dx^mu."""
    ch = hs.chart
    from .symcore import SECOND_JET
    tgt = ch.parent if isinstance(ch, RestrictedChart) else ch
    atoms = tgt.spec.atoms
    coords = ch.coords
    m = tgt.m

    def dcoord(atom, mu):
        return atoms.register(atom.name + "_d", atom.indices + (mu,), SECOND_JET).sym

    if isinstance(ch, RestrictedChart):
        # on a constrained chart the equations are the coefficient conditions
        # of i(Z)Omega = 0 on the formal first-jet multivector of a section
        factors = []
        fiber = [a for a in ch.coords if a not in ch.base]
        for mu in range(m):
            comp = {ch.base[mu]: sp.S.One}
            for a in fiber:
                comp[a] = dcoord(a, mu)
            factors.append(VectorField(ch, comp))
        Z = None
        for f in factors:
            Z = f if Z is None else wedge(Z, f)
        R = contract(Z, hs.Omega)
        return [normalize(c) for c in R.terms.values() if normalize(c) != 0]

    eqs = []
    field_atoms = [a for a in coords if a.kind == "field"]
    mom_atoms = [a for a in coords if a.kind == "momentum"]
    for y in field_atoms:
        for mu in range(m):
            p = None
            for a in mom_atoms:
                if a.name == "p_" + y.name and a.indices == (mu,) + y.indices:
                    p = a
            rhs = normalize(sp.diff(hs.H, p.sym)) if p is not None else None
            if p is None:
                continue
            eqs.append(normalize(dcoord(y, mu) - rhs))
    for y in field_atoms:
        div = sp.S.Zero
        present = False
        for a in mom_atoms:
            if a.name == "p_" + y.name and a.indices[1:] == y.indices:
                div += dcoord(a, a.indices[0])
                present = True
        if present or sp.diff(hs.H, y.sym) != 0:
            eqs.append(normalize(div + sp.diff(hs.H, y.sym)))
    return eqs


def kernel_of_legendre(sys: LagrangianSystem, declared: ConstraintSet | None = None,
                       fl: LegendreMap | None = None):
    """Vertical fields spanning ker FL_*: exact null space of the Hessian
    when its entries are coordinate-free, else FL-pullbacks of the
    p-gradients of the declared constraints.  Each returned field is checked
    to satisfy i(Gamma)Omega_L = 0 and i(Gamma)omega = 0 exactly."""
    from .lagrangian import hessian_and_rank, LagrangianError
    chart = sys.chart
    if sys.hessian is None:
        hessian_and_rank(sys)
    if sys.regular:
        return []
    n, m = chart.n, chart.m
    fields = []
    coordinate_free = all(not (sp.sympify(e).free_symbols & {a.sym for a in chart.coords})
                          and not sp.sympify(e).atoms(sp.Function)
                          for e in sys.hessian)
    if coordinate_free:
        for vec in sys.hessian.nullspace():
            comp = {}
            for r in range(n * m):
                if vec[r] != 0:
                    comp[chart.vel(r // m, r % m)] = vec[r]
            fields.append(VectorField(chart, comp))
    elif declared is not None and fl is not None:
        for c, _tag in declared.constraints:
            comp = {}
            for i in range(n):
                for mu in range(m):
                    g = fl.pull_scalar(sp.diff(sp.sympify(c), fl.target.mom(i, mu).sym))
                    if g != 0:
                        comp[chart.vel(i, mu)] = g
            if comp:
                fields.append(VectorField(chart, comp))
    else:
        raise HamiltonianError(
            "cannot determine kernel: non-constant Hessian and no declared constraints")
    omega = chart.omega()
    for g in fields:
        if not contract(g, sys.Omega).is_zero():
            raise HamiltonianError("kernel candidate fails i(Gamma)Omega_L = 0")
        if not contract(g, omega).is_zero():
            raise HamiltonianError("kernel candidate fails i(Gamma)omega = 0")
    return fields


def _span_membership(B: MultiVector, kernel, domain, tol=1e-7):
    """Does B lie pointwise in the span of the kernel fields?"""
    import numpy as np
    import random as _random
    chart = B.chart
    keys = sorted(set(B.terms) | {k for g in kernel for k in g.terms})
    if not keys:
        return True, None
    quantities = set()
    for obj in [B] + list(kernel):
        for c in obj.terms.values():
            quantities |= numcheck.evaluation_atoms(c)
    rng = _random.Random(domain.seed + 3)
    for _ in range(6):
        pt = domain.sample(quantities, rng)
        A = np.array([[numcheck.eval_scalar(g.terms.get(k, sp.S.Zero), pt)
                       for g in kernel] for k in keys])
        v = np.array([numcheck.eval_scalar(B.terms.get(k, sp.S.Zero), pt)
                      for k in keys])
        if kernel:
            sol, *_ = np.linalg.lstsq(A, v, rcond=None)
            resid = A @ sol - v
        else:
            resid = v
        if np.max(np.abs(resid)) > tol * (1 + np.max(np.abs(v))):
            worst = keys[int(np.argmax(np.abs(resid)))]
            return False, worst
    return True, None


def restrict_vector_field(X: MultiVector, constraints: ConstraintSet,
                          restricted: RestrictedChart | None = None) -> MultiVector:
    """Restrict a vector field to the submanifold of a solved constraint set:
    substitute the solved form into the components and drop the components
    along eliminated coordinates (tangency requires those to vanish there)."""
    chart = X.chart
    if not constraints.solved:
        return X
    if restricted is None:
        restricted = restrict_chart(chart, constraints.solved)
    comp = {}
    for (k,), c in X.terms.items():
        atom = chart.coords[k]
        val = constraints.substitute(c)
        if atom in constraints.solved:
            # tangency along the eliminated coordinate: X(coord - solved) = 0
            target = sp.sympify(constraints.solved[atom])
            directional = val
            for (j,), cj in X.terms.items():
                other = chart.coords[j]
                if other is atom:
                    continue
                d = sp.diff(target, other.sym)
                if d != 0:
                    directional -= constraints.substitute(cj) * d
            if normalize(directional) != 0:
                raise NotTangentError("field is not tangent along %s" % atom.label)
            continue
        if val != 0:
            comp[restricted.coords[restricted.index_of(atom)]] = val
    return VectorField(restricted, {a: c for a, c in comp.items()})


def tangent_to(X: MultiVector, constraints: ConstraintSet) -> bool:
    """L(X)c = 0 modulo the constraint ideal, decided by solved substitution."""
    chart = X.chart
    for c, _tag in constraints.constraints:
        d = sp.S.Zero
        for (k,), comp in X.terms.items():
            d += comp * sp.diff(sp.sympify(c), chart.coords[k].sym)
        if constraints.substitute(d) != 0:
            return False
    return True


def pushforward_vector_field(X: MultiVector, fl: LegendreMap, kernel,
                             from_constraints: ConstraintSet | None = None,
                             target_constraints: ConstraintSet | None = None,
                             domain=None) -> MultiVector:
    """FL_* X onto the momentum chart (or P0 when target_constraints given).

    Projectability is decided by the commutator test [X, ker FL_*] in
    ker FL_* (after restriction to from_constraints when supplied); the
    projected field keeps the base and field components and maps the momentum
    components to X(FL* p), re-expressed in momentum coordinates.
    """
    src = fl.source
    domain = domain or numcheck.SampleDomain(assumptions=list(src.spec.assumptions))
    work_constraints = from_constraints
    if work_constraints is not None and not tangent_to(X, work_constraints):
        raise NotTangentError("field is not tangent to the given constraints")
    for g in kernel:
        B = schouten(X, g)
        if work_constraints is not None and work_constraints.solved:
            B = B.map_coeffs(lambda c: work_constraints.substitute(c))
        kernel_here = kernel
        ok, worst = _span_membership(B, kernel_here, domain)
        if not ok:
            label = src.coords[worst[0]].label if worst else "?"
            raise NonProjectableError(
                "commutator with a kernel field leaves ker FL_* "
                "(component along %s)" % label)
    # build the projected components
    tgt = fl.target
    vels = {src.vel(i, mu).sym for i in range(src.n) for mu in range(src.m)}
    comp_src = {src.coords[k]: sp.sympify(c) for (k,), c in X.terms.items()}

    def X_of(e):
        out = sp.S.Zero
        for atom, c in comp_src.items():
            d = sp.diff(sp.sympify(e), atom.sym)
            if d != 0:
                out += c * d
        return normalize(out)

    out_comp = {}
    for a in tgt.base + tgt.fields:
        c = comp_src.get(src.spec.atoms.get(a.name, *a.indices), sp.S.Zero)
        if work_constraints is not None and work_constraints.solved:
            c = work_constraints.substitute(c)
        if sp.sympify(c).free_symbols & vels:
            # velocity dependence is fine when it factors through the map
            try:
                c = _express_in_momentum_chart(fl, c, target_constraints)
            except HamiltonianError:
                raise NonProjectableError(
                    "component along %s depends on velocities not expressible "
                    "through the map" % a.label)
        if c != 0:
            out_comp[a] = normalize(c)
    for i in range(tgt.n):
        for mu in range(tgt.m):
            p = tgt.mom(i, mu)
            v = X_of(fl.forward[p])
            if work_constraints is not None and work_constraints.solved:
                v = work_constraints.substitute(v)
            if v == 0:
                continue
            v = _express_in_momentum_chart(fl, v, target_constraints)
            out_comp[p] = v
    if target_constraints is not None and target_constraints.solved:
        p0 = restrict_chart(tgt, target_constraints.solved, name="P0")
        comp0 = {}
        for a, c in out_comp.items():
            c = target_constraints.substitute(c)
            if a in target_constraints.solved:
                continue
            if c != 0:
                comp0[a] = c
        return VectorField(p0, comp0)
    return VectorField(tgt, out_comp)
