"""Exterior algebra on a chart: forms, multivector fields, d, contraction,
Lie derivatives and the Schouten-Nijenhuis bracket.

A Form of grade k is a map from strictly increasing k-tuples of coordinate
positions to scalar coefficients; a MultiVector is the contravariant
counterpart.  Charts fix the coordinate order, hence the basis orientation.

Sign conventions used throughout the package:
    Omega = -d(Theta)          multisymplectic form from its potential
    J     = -i(X) Theta        multimomentum map
    i(X1 ^ ... ^ Xm) a = i(Xm) ... i(X1) a
    L(X) a = d i(X) a - (-1)^m i(X) d a      for X of grade m
"""

from __future__ import annotations

import itertools

import sympy as sp

from .symcore import Atom, normalize

__all__ = [
    "Chart", "Form", "MultiVector", "VectorField", "wedge", "ext_d",
    "contract", "lie_form", "lie_mv", "lie_cartan", "schouten", "form_to_json",
]


class ChartMismatchError(Exception):
    pass


class Chart:
    """An ordered coordinate system; owns basis orientation and coefficient
    differentiation.  Subclassed by jet charts."""

    def __init__(self, coords, name=""):
        self.coords: list[Atom] = list(coords)
        self.name = name
        self.pos = {a.sym: k for k, a in enumerate(self.coords)}
        if len(self.pos) != len(self.coords):
            raise ValueError("duplicate coordinates in chart")

    @property
    def dim(self):
        return len(self.coords)

    def index_of(self, atom) -> int:
        sym = atom.sym if isinstance(atom, Atom) else atom
        return self.pos[sym]

    def d_coeff(self, e, k):
        """d/d(coordinate k) of a coefficient; external-function values chain
        through their declared arguments automatically."""
        return sp.diff(e, self.coords[k].sym)

    def __repr__(self):
        return "Chart(%s; %d coords)" % (self.name, self.dim)


def _sort_with_sign(seq):
    """Sort a tuple of ints, returning (sorted tuple, permutation sign);
    None if there is a repeat."""
    seq = list(seq)
    if len(set(seq)) != len(seq):
        return None, 0
    sign = 1
    # insertion sort, counting swaps
    for i in range(1, len(seq)):
        j = i
        while j > 0 and seq[j - 1] > seq[j]:
            seq[j - 1], seq[j] = seq[j], seq[j - 1]
            sign = -sign
            j -= 1
    return tuple(seq), sign


class _Graded:
    """Shared storage for Form and MultiVector."""

    def __init__(self, chart: Chart, grade: int, terms=None):
        if grade < 0:
            raise ValueError("negative grade")
        # grades above the chart dimension are allowed and necessarily zero
        self.chart = chart
        self.grade = grade
        self.terms: dict[tuple, sp.Expr] = {}
        for idx, coeff in (terms or {}).items():
            self._accumulate(tuple(idx), coeff)
        self._prune()

    def _accumulate(self, idx, coeff):
        if len(idx) != self.grade:
            raise ValueError("index tuple %s has wrong length" % (idx,))
        sorted_idx, sign = _sort_with_sign(idx)
        if sign == 0:
            return
        self.terms[sorted_idx] = self.terms.get(sorted_idx, sp.S.Zero) + sign * coeff

    def _prune(self):
        self.terms = {idx: c for idx, c in
                      ((i, normalize(c)) for i, c in self.terms.items()) if c != 0}

    def is_zero(self):
        return not self.terms

    def coeff(self, *idx):
        sorted_idx, sign = _sort_with_sign(idx)
        if sign == 0:
            return sp.S.Zero
        return sign * self.terms.get(sorted_idx, sp.S.Zero)

    def map_coeffs(self, fn):
        out = type(self)(self.chart, self.grade)
        for idx, c in self.terms.items():
            out._accumulate(idx, fn(c))
        out._prune()
        return out

    def __add__(self, other):
        self._check_compatible(other)
        out = type(self)(self.chart, self.grade, dict(self.terms))
        for idx, c in other.terms.items():
            out._accumulate(idx, c)
        out._prune()
        return out

    def __sub__(self, other):
        return self + (-1) * other

    def __mul__(self, scalar):
        return self.map_coeffs(lambda c: c * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1

    def _check_compatible(self, other):
        if not isinstance(other, type(self)) or other.chart is not self.chart:
            raise ChartMismatchError("operands on different charts")
        if other.grade != self.grade:
            raise ValueError("grade mismatch")

    def same_as(self, other):
        """Exact coefficientwise equality after normalization."""
        if other.chart is not self.chart or other.grade != self.grade:
            return False
        keys = set(self.terms) | set(other.terms)
        return all(normalize(self.terms.get(k, 0) - other.terms.get(k, 0)) == 0
                   for k in keys)

    def __repr__(self):
        kind = type(self).__name__
        if not self.terms:
            return "%s(grade %d, 0)" % (kind, self.grade)
        return "%s(grade %d, %d terms)" % (kind, self.grade, len(self.terms))


class Form(_Graded):

    def labels(self, idx):
        return ["d" + self.chart.coords[i].label for i in idx]


class MultiVector(_Graded):
    """Contravariant counterpart of Form.  An optional decomposable
    factorization (list of grade-1 fields) may be attached; it is validated
    lazily against the stored components."""

    def __init__(self, chart, grade, terms=None, factors=None):
        super().__init__(chart, grade, terms)
        self.factors = factors

    def labels(self, idx):
        return ["d/d" + self.chart.coords[i].label for i in idx]

    def validate_factorization(self):
        if self.factors is None:
            return True
        prod = None
        for f in self.factors:
            prod = f if prod is None else wedge(prod, f)
        return prod.same_as(MultiVector(self.chart, self.grade, self.terms))


def VectorField(chart, components=None):
    """Grade-1 MultiVector from {coordinate position or Atom: coefficient}."""
    terms = {}
    for key, c in (components or {}).items():
        k = key if isinstance(key, int) else chart.index_of(key)
        terms[(k,)] = terms.get((k,), sp.S.Zero) + c
    return MultiVector(chart, 1, terms)


def wedge(a, b):
    """Graded-commutative product of two Forms or two MultiVectors."""
    if type(a) is not type(b):
        raise TypeError("wedge needs two objects of the same kind")
    if a.chart is not b.chart:
        raise ChartMismatchError("operands on different charts")
    out = type(a)(a.chart, a.grade + b.grade)
    for I, ca in a.terms.items():
        for J, cb in b.terms.items():
            out._accumulate(I + J, ca * cb)
    out._prune()
    return out


def ext_d(a: Form) -> Form:
    """Exterior derivative; d of d is zero by symmetry of mixed partials."""
    out = Form(a.chart, a.grade + 1)
    for idx, c in a.terms.items():
        for k in range(a.chart.dim):
            dc = a.chart.d_coeff(c, k)
            if dc == 0:
                continue
            out._accumulate((k,) + idx, dc)
    out._prune()
    return out


def _contract_single(k, a: Form) -> Form:
    out = Form(a.chart, a.grade - 1)
    for idx, c in a.terms.items():
        if k in idx:
            t = idx.index(k)
            out._accumulate(idx[:t] + idx[t + 1:], ((-1) ** t) * c)
    out._prune()
    return out


def contract(X: MultiVector, a: Form) -> Form:
    """Interior product i(X)a.  For decomposable X = X1 ^ ... ^ Xm this equals
    the iterated contraction i(Xm)...i(X1)a; zero when grade(a) < grade(X)."""
    if X.chart is not a.chart:
        raise ChartMismatchError("operands on different charts")
    if a.grade < X.grade:
        return Form(a.chart, 0)
    out = Form(a.chart, a.grade - X.grade)
    for I, cx in X.terms.items():
        partial = a
        # innermost factor first: i(im)...i(i1), applied left to right on i1
        for k in I:
            partial = _contract_single(k, partial)
        for idx, c in partial.terms.items():
            out._accumulate(idx, cx * c)
    out._prune()
    return out


def lie_form(Y: MultiVector, a: Form) -> Form:
    """Lie derivative of a form along a vector field, via the Cartan formula."""
    if Y.grade != 1:
        raise ValueError("lie_form expects a vector field; use lie_mv")
    return lie_mv(Y, a)


def lie_mv(X: MultiVector, a: Form) -> Form:
    """Graded Lie derivative L(X)a = d i(X)a - (-1)^m i(X) da for grade m.

    A grade-1 field takes the equivalent coordinate transport formula
    instead, which only differentiates coefficients along the directions the
    field actually touches; the identity suite cross-checks the two
    derivations."""
    p, m = a.grade, X.grade
    out_grade = p - m + 1
    if out_grade < 0:
        return Form(X.chart, 0)
    if m == 1:
        return _lie_vector(X, a)
    sign = (-1) ** m
    first = Form(X.chart, out_grade) if p < m else ext_d(contract(X, a))
    return first - sign * contract(X, ext_d(a))


def lie_cartan(X: MultiVector, a: Form) -> Form:
    """The Cartan-formula derivation of lie_mv, kept separate so the two
    computations can be compared term by term."""
    p, m = a.grade, X.grade
    if p - m + 1 < 0:
        return Form(X.chart, 0)
    sign = (-1) ** m
    first = Form(X.chart, p - m + 1) if p < m else ext_d(contract(X, a))
    return first - sign * contract(X, ext_d(a))


def _lie_vector(X: MultiVector, a: Form) -> Form:
    """L(X)a for grade-1 X: transport of the coefficients plus deformation
    of the coordinate coframe, d(X^k) spliced into each slot."""
    chart = a.chart
    comp = {k[0]: sp.sympify(c) for k, c in X.terms.items()}
    out = Form(chart, a.grade)
    for I, co in a.terms.items():
        t = sp.S.Zero
        for j, cj in comp.items():
            d = chart.d_coeff(co, j)
            if d != 0:
                t += cj * d
        if t != 0:
            out._accumulate(I, t)
        for slot, ik in enumerate(I):
            cik = comp.get(ik)
            if cik is None:
                continue
            for j in range(chart.dim):
                d = chart.d_coeff(cik, j)
                if d == 0:
                    continue
                out._accumulate(I[:slot] + (j,) + I[slot + 1:], co * d)
    out._prune()
    return out


def schouten(A: MultiVector, B: MultiVector) -> MultiVector:
    """Schouten-Nijenhuis bracket of multivector fields, grade a+b-1.

    For grade-1 arguments this is the vector-field commutator.  Computed by
    expanding each component term f d1^...^da against g e1^...^eb through the
    decomposable bracket rule; coordinate basis fields commute, so only the
    coefficient derivatives survive.
    """
    if A.chart is not B.chart:
        raise ChartMismatchError("operands on different charts")
    chart = A.chart
    a, b = A.grade, B.grade
    out = MultiVector(chart, a + b - 1)
    for I, f in A.terms.items():
        for J, g in B.terms.items():
            # A-term decomposed as (f d_{I0}) ^ d_{I1} ^ ...; similarly B.
            # [X1,Y1] piece
            dg = chart.d_coeff(g, I[0])
            if dg != 0:
                out._accumulate((J[0],) + I[1:] + J[1:], f * dg)
            df = chart.d_coeff(f, J[0])
            if df != 0:
                out._accumulate((I[0],) + I[1:] + J[1:], -g * df)
            # [X1, Yl] for l >= 2: -(d_{Jl} f) X1-direction, sign (-1)^(1+l)
            for l in range(1, b):
                df = chart.d_coeff(f, J[l])
                if df == 0:
                    continue
                sign = (-1) ** (l + 2)  # (-1)^{1+(l+1)}
                rest = (I[0],) + I[1:] + (J[0],) + J[1:l] + J[l + 1:]
                out._accumulate(rest, -sign * df * g)
            # [Xk, Y1] for k >= 2: (d_{Ik} g) Y1-direction, sign (-1)^(k+1)
            for k in range(1, a):
                dg = chart.d_coeff(g, I[k])
                if dg == 0:
                    continue
                sign = (-1) ** (k + 2)  # (-1)^{(k+1)+1}
                rest = (J[0],) + (I[0],) + I[1:k] + I[k + 1:] + J[1:]
                out._accumulate(rest, sign * f * dg)
    out._prune()
    return out


def form_to_json(a) -> dict:
    """Schema: {"grade": k, "terms": [{"basis": [...], "coeff": "..."}]}."""
    from .symcore import render_scalar
    terms = []
    for idx in sorted(a.terms):
        terms.append({"basis": a.labels(idx), "coeff": render_scalar(a.terms[idx])})
    return {"grade": a.grade, "terms": terms}
