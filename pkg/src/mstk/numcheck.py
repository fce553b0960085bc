"""Numeric oracle: seeded random-point evaluation respecting sign-guard
assumptions, expression and form equivalence testing, finite-difference
derivative checks, and on-shell divergence of Noether currents.

Points are exact rationals; all substitution happens in exact arithmetic and
only the final fold produces an IEEE double.  Opaque external-function values
and their derivatives are sampled as independent quantities (their symmetries
are already encoded structurally, one function object per canonical index
tuple).
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import sympy as sp
from sympy.core.function import AppliedUndef

from .symcore import normalize

__all__ = [
    "SampleDomain", "EmptyDomainError", "GuardViolation", "eval_scalar",
    "equiv", "equiv_forms", "finite_diff_check", "onshell_divergence",
    "evaluation_atoms", "Verdict",
]

DRAW_BUDGET = 10_000


class EmptyDomainError(Exception):
    pass


class GuardViolation(Exception):
    pass


def evaluation_atoms(*exprs):
    """The quantities a point must assign: free symbols, applied external
    functions, and their (maximal) derivative objects."""
    out = set()
    for e in exprs:
        e = sp.sympify(e)
        out |= e.atoms(sp.Derivative)
        out |= e.atoms(AppliedUndef)
        out |= e.free_symbols
    return out


def _point_key(q):
    return sp.default_sort_key(q)


@dataclass
class SampleDomain:
    """Rejection sampler over per-quantity rational intervals.

    assumptions: list of (expr, sign) with sign '<' or '>' meaning the
    expression must be negative / positive at every accepted point.
    """
    intervals: dict = dc_field(default_factory=dict)  # quantity -> (lo, hi) floats
    assumptions: list = dc_field(default_factory=list)
    seed: int = 42
    default_interval: tuple = (-2.0, 2.0)

    def sample(self, quantities, rng=None):
        rng = rng or random.Random(self.seed)
        quantities = set(quantities)
        for expr, _sign in self.assumptions:
            quantities |= evaluation_atoms(expr)
        quantities = sorted(quantities, key=_point_key)
        for _ in range(DRAW_BUDGET):
            point = {}
            for q in quantities:
                lo, hi = self.intervals.get(q, self.default_interval)
                num = rng.randint(int(lo * 128), int(hi * 128))
                point[q] = sp.Rational(num, 128)
            if self._accept(point):
                return point
        raise EmptyDomainError("no point satisfied the assumptions in %d draws"
                               % DRAW_BUDGET)

    def _accept(self, point):
        for expr, sign in self.assumptions:
            val = subs_point(expr, point)
            try:
                v = float(val)
            except TypeError:
                return False
            if sign == "<" and not v < 0:
                return False
            if sign == ">" and not v > 0:
                return False
        return True

    def points(self, quantities, trials):
        rng = random.Random(self.seed)
        return [self.sample(quantities, rng) for _ in range(trials)]


def subs_point(e, point):
    """Exact substitution of a rational point; derivative and applied-function
    nodes are replaced before bare symbols."""
    e = sp.sympify(e)
    derivs = {k: v for k, v in point.items() if isinstance(k, sp.Derivative)}
    funcs = {k: v for k, v in point.items() if isinstance(k, AppliedUndef)}
    syms = {k: v for k, v in point.items() if isinstance(k, sp.Symbol)}
    if derivs:
        e = e.xreplace(derivs)
    if funcs:
        e = e.xreplace(funcs)
    if syms:
        e = e.xreplace(syms)
    return e


_COMPILED_CACHE = {}


def _compiled(e):
    """Cached lambdified evaluator for e.  Derivative and applied-function
    atoms are aliased to plain symbols so lambdify accepts them."""
    hit = _COMPILED_CACHE.get(e)
    if hit is None:
        qs, batch = compiled_batch([e])

        def fn_point(point):
            return batch(point)[0]
        hit = (qs, set(qs), fn_point)
        _COMPILED_CACHE[e] = hit
    return hit


def compiled_batch(exprs):
    """One shared lambdified evaluator for a list of expressions.  Returns
    (quantities, fn) where fn(point) -> list of complex values.

    Fractional (and negative composite) powers are evaluated in layers: their
    bases are compiled as separate units and fed in as extra arguments, so
    code generation never walks a radicand repeated across hundreds of
    monomials."""
    from .symcore import _fractional_pows
    exprs = [sp.sympify(e) for e in exprs]
    qs = sorted(evaluation_atoms(*exprs), key=_point_key)
    pows = set()
    for e in exprs:
        pows |= _fractional_pows(e)
    base_ev = None
    gen_syms = []
    if pows:
        bases = sorted({p.base for p in pows}, key=sp.default_sort_key)
        _bqs, base_ev = compiled_batch(bases)
        gens = {b: sp.Dummy() for b in bases}
        reps = {p: gens[p.base] ** p.exp for p in pows}
        exprs = [e.xreplace(reps) for e in exprs]
        gen_syms = [gens[b] for b in bases]
    arep = {q: sp.Dummy() for q in qs if not isinstance(q, sp.Symbol)}
    body = [e.xreplace(arep) if arep else e for e in exprs]
    fn = sp.lambdify([arep.get(q, q) for q in qs] + gen_syms, body,
                     modules="numpy", cse=True)

    def ev(point):
        args = [complex(point[q]) for q in qs]
        if base_ev is not None:
            args += list(base_ev(point))
        return fn(*args)
    return qs, ev


def eval_scalar(e, point) -> float:
    """Evaluate at a point (quantity -> Rational).

    Expressions are compiled once (cached) and reused; inputs are fed as
    complex so a stray even root of a negative argument is detected instead
    of silently turning into nan."""
    e = sp.sympify(e)
    try:
        qs, qset, fn = _compiled(e)
    except Exception:
        qs = qset = fn = None
    if fn is None:
        val = subs_point(e, point)
        val = sp.simplify(val) if val.free_symbols else val
        f = complex(val)
    else:
        missing = qset - set(point)
        if missing:
            raise KeyError("point misses assignments for %s"
                           % sorted(str(s) for s in missing))
        f = complex(fn(point))
    if not (abs(f.real) < 1e300):
        raise GuardViolation("non-finite value at sample point")
    if abs(f.imag) > 1e-9 * (1 + abs(f.real)):
        raise GuardViolation("complex value (negative argument under even root?)")
    return f.real


@dataclass
class Verdict:
    passed: bool
    trials: int
    tol: float
    seed: int
    worst: float = 0.0
    detail: str = ""

    def __bool__(self):
        return self.passed

    def report_line(self, kind="EQUIV"):
        return "%s %s trials=%d tol=%g seed=%d" % (
            kind, "pass" if self.passed else "FAIL", self.trials, self.tol, self.seed)


def _close(x, y, tol):
    return abs(x - y) <= tol * (1 + max(abs(x), abs(y)))


def equiv(a, b, domain: SampleDomain | None = None, trials=100, tol=1e-8) -> Verdict:
    """Probabilistic scalar equivalence: |a-b| <= tol*(1+max(|a|,|b|)) at
    every accepted sample point."""
    domain = domain or SampleDomain()
    a, b = sp.sympify(a), sp.sympify(b)
    # exact shortcut, but only when normalization is affordable; expanding a
    # large composition just to test for literal zero defeats the sampler
    if sp.count_ops(a) + sp.count_ops(b) < 20000:
        if normalize(a - b) == 0:
            return Verdict(True, trials, tol, domain.seed, 0.0, "exact")
    quantities = evaluation_atoms(a, b)
    worst = 0.0
    rng = random.Random(domain.seed)
    for _ in range(trials):
        point = domain.sample(quantities, rng)
        va, vb = eval_scalar(a, point), eval_scalar(b, point)
        worst = max(worst, abs(va - vb) / (1 + max(abs(va), abs(vb))))
        if not _close(va, vb, tol):
            return Verdict(False, trials, tol, domain.seed, worst)
    return Verdict(True, trials, tol, domain.seed, worst)


def equiv_forms(a, b, domain: SampleDomain | None = None, trials=100, tol=1e-8) -> Verdict:
    """Coefficientwise equivalence of two forms on the same chart."""
    domain = domain or SampleDomain()
    if a.grade != b.grade:
        return Verdict(False, trials, tol, domain.seed, detail="grade mismatch")
    keys = set(a.terms) | set(b.terms)
    worst = 0.0
    for k in sorted(keys):
        v = equiv(a.terms.get(k, sp.S.Zero), b.terms.get(k, sp.S.Zero),
                  domain, trials, tol)
        worst = max(worst, v.worst)
        if not v.passed:
            return Verdict(False, trials, tol, domain.seed, worst,
                           "coefficient %s differs" % (k,))
    return Verdict(True, trials, tol, domain.seed, worst)


def finite_diff_check(e, a, domain: SampleDomain | None = None,
                      step=1e-5, rel=1e-6, points=30) -> Verdict:
    """Central finite difference of e in atom a against the symbolic
    derivative."""
    from .symcore import Atom, diff as sdiff
    domain = domain or SampleDomain()
    sym = a.sym if isinstance(a, Atom) else a
    de = sdiff(e, sym)
    quantities = evaluation_atoms(e, de) | {sym}
    h = sp.Rational(step).limit_denominator(10 ** 9)
    rng = random.Random(domain.seed)
    worst = 0.0
    for _ in range(points):
        point = domain.sample(quantities, rng)
        up = dict(point); up[sym] = point[sym] + h
        dn = dict(point); dn[sym] = point[sym] - h
        fd = (eval_scalar(e, up) - eval_scalar(e, dn)) / (2 * float(h))
        ex = eval_scalar(de, point)
        err = abs(fd - ex) / (1 + max(abs(fd), abs(ex)))
        worst = max(worst, err)
        if err > rel:
            return Verdict(False, points, rel, domain.seed, worst)
    return Verdict(True, points, rel, domain.seed, worst)


def divergence_on_grid(current: dict, base_syms, grid_points):
    """Numeric max |sum_mu d_mu j^mu| for a current given as base-coordinate
    component expressions, via exact differentiation of the components."""
    div = sp.S.Zero
    for mu, comp in current.items():
        div += sp.diff(comp, base_syms[mu])
    div = normalize(div)
    worst = 0.0
    for point in grid_points:
        worst = max(worst, abs(eval_scalar(div, point)))
    return worst, div


def onshell_divergence(current: dict, el_residuals, section, grid_points,
                       residual_tol=1e-6):
    """Max divergence magnitude of a Noether current over a grid.

    current: base index -> scalar over base coordinates (already pulled back).
    el_residuals: field-equation residuals on the jet chart; the section must
    satisfy them below residual_tol on the grid, otherwise the residual is
    reported instead of the divergence.
    """
    residual_exprs = [section.pull_scalar(r) for r in el_residuals]
    worst_res = 0.0
    for point in grid_points:
        for r in residual_exprs:
            worst_res = max(worst_res, abs(eval_scalar(r, point)))
    base_syms = [a.sym for a in section.chart.base]
    worst_div, _ = divergence_on_grid(current, base_syms, grid_points)
    if worst_res > residual_tol:
        return {"on_shell": False, "residual": worst_res, "divergence": worst_div}
    return {"on_shell": True, "residual": worst_res, "divergence": worst_div}
