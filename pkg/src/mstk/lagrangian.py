"""Lagrangian side: Cartan forms, Hessian and regularity, Euler-Lagrange
equations, and the constraints induced by the second-order (holonomy)
condition on decomposable multivector fields.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import sympy as sp

from .symcore import normalize, MOMENTUM, VELOCITY
from .exterior import Form, MultiVector, VectorField, wedge, ext_d, contract
from .jetgeom import JetChart, LAGRANGIAN
from . import numcheck

__all__ = [
    "LagrangianSystem", "ConstraintSet", "cartan_forms", "hessian_and_rank",
    "euler_lagrange", "sopde_constraints", "tangency_constraints",
]


class LagrangianError(Exception):
    pass


@dataclass
class ConstraintSet:
    """Constraint functions on a chart with provenance tags and an optional
    solved form (coordinate -> expression substitution that zeroes them)."""
    chart: object
    constraints: list = dc_field(default_factory=list)  # (expr, tag)
    solved: dict = dc_field(default_factory=dict)       # Atom -> expr

    def exprs(self):
        return [c for c, _tag in self.constraints]

    def add(self, expr, tag):
        self.constraints.append((normalize(expr), tag))

    def substitute(self, e):
        from .symcore import substitute
        if not self.solved:
            return normalize(e)
        return substitute(e, self.solved)

    def solved_ok(self) -> bool:
        return all(self.substitute(c) == 0 for c in self.exprs())

    def __len__(self):
        return len(self.constraints)


@dataclass
class LagrangianSystem:
    chart: JetChart
    L: sp.Expr
    Theta: Form
    E_L: sp.Expr
    hessian: sp.Matrix = None
    hessian_rank: int = None
    regular: bool = None
    rank_evidence: str = ""
    _omega: Form = None

    @property
    def Omega(self):
        """-dTheta, computed on first use (the exterior derivative is the
        expensive step for radical Lagrangians and many consumers never
        touch it)."""
        if self._omega is None:
            self._omega = -1 * ext_d(self.Theta)
        return self._omega

    @property
    def nm(self):
        return self.chart.n * self.chart.m


def _check_lagrangian_side(L, chart):
    if not isinstance(chart, JetChart) or chart.side != LAGRANGIAN:
        raise LagrangianError("expected a lagrangian-side jet chart")
    for s in sp.sympify(L).free_symbols:
        atom = chart.spec.atoms._by_sym.get(s)
        if atom is not None and atom.kind == MOMENTUM:
            raise LagrangianError("lagrangian references momentum coordinate %s"
                                  % atom.label)


def cartan_forms(L, chart: JetChart) -> LagrangianSystem:
    """Theta_L = (dL/dy^i_mu) dy^i ^ d^{m-1}x_mu - E_L d^m x, Omega = -dTheta,
    E_L = (dL/dy^i_mu) y^i_mu - L."""
    L = normalize(L)
    _check_lagrangian_side(L, chart)
    m = chart.m
    E_L = -L
    Theta = Form(chart, m)
    for i, y in enumerate(chart.fields):
        dy = Form(chart, 1, {(chart.index_of(y),): sp.S.One})
        for mu in range(m):
            p = sp.diff(L, chart.vel(i, mu).sym)
            if p == 0:
                continue
            E_L += p * chart.vel(i, mu).sym
            Theta = Theta + p * wedge(dy, chart.dxm(mu))
    E_L = normalize(E_L)
    Theta = Theta + (-E_L) * chart.omega()
    return LagrangianSystem(chart, L, Theta, E_L)


def _coordinate_free(e, chart):
    coords = {a.sym for a in chart.coords}
    e = sp.sympify(e)
    return not (e.free_symbols & coords) and not e.atoms(sp.Function)


def hessian_and_rank(sys_or_L, chart=None, domain=None, points=20):
    """Multi-Hessian H^{mu nu}_{ij} = d^2 L / dy^i_mu dy^j_nu as an
    (nm)x(nm) matrix (row/col index = i*m + mu) plus a rank verdict.

    Rank is exact when every entry is coordinate-free, otherwise the maximum
    numeric rank over assumption-respecting sample points.
    """
    if isinstance(sys_or_L, LagrangianSystem):
        sys = sys_or_L
        chart = sys.chart
    else:
        sys = None
        if chart is None:
            raise LagrangianError("need a chart")
    L = sys.L if sys else normalize(sys_or_L)
    n, m = chart.n, chart.m
    vels = [chart.vel(i, mu).sym for i in range(n) for mu in range(m)]
    firsts = [normalize(sp.diff(L, v)) for v in vels]
    H = sp.Matrix(n * m, n * m,
                  lambda r, c: normalize(sp.diff(firsts[r], vels[c])))
    if all(_coordinate_free(e, chart) for e in H):
        rank = H.rank()
        evidence = "exact"
    else:
        import numpy as np
        domain = domain or numcheck.SampleDomain(
            assumptions=list(chart.spec.assumptions))
        quantities, ev = numcheck.compiled_batch(list(H))
        import random as _random
        rng = _random.Random(domain.seed)
        rank = 0
        for _ in range(points):
            pt = domain.sample(quantities, rng)
            vals = np.array(ev(pt))
            if np.abs(vals.imag).max() > 1e-9:
                continue
            M = vals.real.reshape(H.rows, H.cols)
            rank = max(rank, int(np.linalg.matrix_rank(M, tol=1e-8)))
        evidence = "numeric rank at %d points" % points
    if sys is not None:
        sys.hessian = H
        sys.hessian_rank = rank
        sys.regular = (rank == n * m)
        sys.rank_evidence = evidence
    return H, rank, evidence


def euler_lagrange(L, chart: JetChart):
    """Residuals E_i = dL/dy^i - D_mu(dL/dy^i_mu) on the second-jet-extended
    chart; zero on solutions."""
    L = normalize(L)
    _check_lagrangian_side(L, chart)
    out = []
    for i, y in enumerate(chart.fields):
        e = sp.diff(L, y.sym)
        for mu in range(chart.m):
            e -= chart.total_derivative(sp.diff(L, chart.vel(i, mu).sym), mu)
        out.append(normalize(e))
    return out


def _sopde_ansatz(chart: JetChart):
    """The holonomic decomposable m-vector: factors
    X_mu = d/dx^mu + y^i_mu d/dy^i + G^i_{mu nu} d/dy^i_nu,
    with fresh unknowns G.  Returns (multivector, factors, G atoms)."""
    from .symcore import PARAMETER
    t = chart.spec.atoms
    factors = []
    g_atoms = []
    for mu in range(chart.m):
        comp = {chart.base[mu]: sp.S.One}
        for i in range(chart.n):
            comp[chart.fields[i]] = chart.vel(i, mu).sym
            for nu in range(chart.m):
                g = t.register("G_" + chart.fields[i].label.replace("[", "(").replace("]", ")").replace(",", ";"),
                               (mu, nu), PARAMETER)
                g_atoms.append(g)
                comp[chart.vel(i, nu)] = g.sym
        factors.append(VectorField(chart, comp))
    X = None
    for f in factors:
        X = f if X is None else wedge(X, f)
    X.factors = factors
    return X, factors, g_atoms


def _fraction_free_reduce(rows, unknowns, domain, seed=42):
    """Fraction-free Gaussian elimination of linear equations over scalars.

    rows: list of (coeff dict unknown->expr, constant expr) representing
    sum coeff*g + const = 0.  Pivot viability is decided numerically at an
    assumption-respecting sample point.  Returns (solved rows, residual
    constants) where residual constants are the unknown-free leftovers.
    """
    import random as _random
    rng = _random.Random(seed)
    quantities = set()
    for coeffs, const in rows:
        for e in coeffs.values():
            quantities |= numcheck.evaluation_atoms(e)
        quantities |= numcheck.evaluation_atoms(const)
    pts = [domain.sample(quantities, rng) for _ in range(3)]

    def viable(e):
        e = normalize(e)
        if e == 0:
            return False
        return any(abs(numcheck.eval_scalar(e, p)) > 1e-9 for p in pts)

    work = [({u: normalize(c) for u, c in coeffs.items() if normalize(c) != 0},
             normalize(const)) for coeffs, const in rows]
    solved = []
    for u in unknowns:
        pivot = None
        for r in work:
            if u in r[0] and viable(r[0][u]):
                pivot = r
                break
        if pivot is None:
            continue
        work.remove(pivot)
        pc = pivot[0][u]
        reduced = []
        for coeffs, const in work:
            if u not in coeffs:
                reduced.append((coeffs, const))
                continue
            f = coeffs[u]
            newc = {}
            for k in set(coeffs) | set(pivot[0]):
                if k == u:
                    continue
                v = normalize(pc * coeffs.get(k, 0) - f * pivot[0].get(k, 0))
                if v != 0:
                    newc[k] = v
            newconst = normalize(pc * const - f * pivot[1])
            reduced.append((newc, newconst))
        work = reduced
        solved.append((u, pivot))
    residuals = [const for coeffs, const in work if not coeffs and normalize(const) != 0]
    relations = [(coeffs, const) for coeffs, const in work if coeffs]
    return solved, relations, residuals


def _independent_mod_span(candidate, basis, domain, quantities, npts=8):
    """Numeric linear-independence of a scalar against the span of others."""
    import numpy as np
    import random as _random
    if not basis:
        return normalize(candidate) != 0
    rng = _random.Random(domain.seed + 7)
    pts = [domain.sample(quantities, rng) for _ in range(npts)]
    A = np.array([[numcheck.eval_scalar(b, p) for b in basis] for p in pts])
    v = np.array([numcheck.eval_scalar(candidate, p) for p in pts])
    sol, res, _rank, _sv = np.linalg.lstsq(A, v, rcond=None)
    fit = A @ sol
    return float(np.max(np.abs(fit - v))) > 1e-7 * (1 + float(np.max(np.abs(v))))


def sopde_constraints(sys: LagrangianSystem, domain=None):
    """Impose i(X)Omega_L = 0 on the holonomic ansatz.

    The coefficient equations are linear in the unknown accelerations G;
    solvable relations determine G, and the unknown-free residuals are the
    second-order-condition constraints, reported modulo the span of those
    already found.  Returns (ConstraintSet, relations) where relations are the
    reduced rows still involving G.
    """
    chart = sys.chart
    domain = domain or numcheck.SampleDomain(assumptions=list(chart.spec.assumptions))
    X, factors, g_atoms = _sopde_ansatz(chart)
    R = contract(X, sys.Omega)
    g_syms = [g.sym for g in g_atoms]
    rows = []
    gset = set(g_syms)
    for idx, coeff in R.terms.items():
        coeff = normalize(coeff)
        coeffs = {}
        for g in sorted(coeff.free_symbols & gset, key=sp.default_sort_key):
            c = normalize(sp.diff(coeff, g))
            if c.free_symbols & gset:
                raise LagrangianError("equations nonlinear in the accelerations")
            if c != 0:
                coeffs[g] = c
        const = normalize(coeff.xreplace({g: sp.S.Zero for g in coeffs}))
        rows.append((coeffs, const))
    solved, relations, residuals = _fraction_free_reduce(rows, g_syms, domain,
                                                         seed=domain.seed)
    relations = [row for _u, row in solved] + relations
    cs = ConstraintSet(chart)
    coord_syms = {a.sym for a in chart.coords}
    for r in sorted((normalize(r) for r in residuals), key=sp.count_ops):
        r = cs.substitute(r)
        if r == 0:
            continue
        cs.add(r, "sopde")
        sol = _solve_linear_coordinate(r, coord_syms)
        if sol is not None:
            atom = chart.spec.atoms._by_sym[sol[0]]
            cs.solved[atom] = sol[1]
    return cs, relations


def _solve_linear_coordinate(c, coord_syms, prefer_kind=VELOCITY):
    """Solve a constraint for one coordinate it contains linearly with a
    constant coefficient; velocity coordinates are preferred targets."""
    c = sp.sympify(c)
    candidates = sorted(c.free_symbols & coord_syms, key=sp.default_sort_key)
    best = None
    for s in candidates:
        d = sp.diff(c, s)
        if d == 0 or not d.is_Rational:
            continue
        val = normalize(s - c / d)
        if s in val.free_symbols:
            continue
        best = (s, val)
        if s.name.rsplit("[", 1)[0].endswith("_v"):
            return best
    return best


def tangency_constraints(sys: LagrangianSystem, cs: ConstraintSet, domain=None):
    """One tangency round: directional derivatives of the constraints along
    the ansatz factors, reduced modulo the constraint span; surviving
    unknown-free scalars are new constraints."""
    chart = sys.chart
    domain = domain or numcheck.SampleDomain(assumptions=list(chart.spec.assumptions))
    X, factors, g_atoms = _sopde_ansatz(chart)
    new = []
    quantities = set()
    for c in cs.exprs():
        quantities |= numcheck.evaluation_atoms(c)
    for c in cs.exprs():
        for f in factors:
            d = sp.S.Zero
            for (k,), comp in f.terms.items():
                d += comp * sp.diff(c, chart.coords[k].sym)
            d = cs.substitute(d)
            if d == 0:
                continue
            if any(d.has(g.sym) for g in g_atoms):
                continue  # a condition on the accelerations, not a constraint
            if _independent_mod_span(d, cs.exprs() + new, domain,
                                     quantities | numcheck.evaluation_atoms(d)):
                new.append(normalize(d))
    return new
