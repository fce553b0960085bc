"""Exact-arithmetic symbolic layer: atoms, indexed families, normalization.

Everything downstream (forms, jet charts, Legendre maps) is built on the
objects defined here.  Expressions are sympy trees restricted to a polynomial
fragment over registered atoms, with exact Rational coefficients, plus a small
set of opaque calls (sqrt, sin, cos, applications of declared external
functions).  Normalization is expansion to a sum of rational-coefficient
monomials, which is a canonical form on that fragment.

Atom kinds:
    base        x^mu, coordinates on the base manifold
    field       y^i, fiber coordinates
    velocity    y^i_mu, jet coordinates
    momentum    p^mu_i, multimomentum coordinates
    parameter   coupling constants, symmetry parameters (T, b_k, chi^a, ...)
    external    values of declared opaque functions (a spacetime metric
                G_{mu nu}(y) stays unexpanded; its partial derivatives are
                sympy Derivative objects, symmetric in mixed partials)
    second_jet  formal y^i_{mu nu}, stored with mu <= nu
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import sympy as sp
from sympy.core.function import AppliedUndef

BASE = "base"
FIELD = "field"
VELOCITY = "velocity"
MOMENTUM = "momentum"
PARAMETER = "parameter"
EXTERNAL = "external"
SECOND_JET = "second_jet"

_KINDS = {BASE, FIELD, VELOCITY, MOMENTUM, PARAMETER, EXTERNAL, SECOND_JET}


class SymcoreError(Exception):
    pass


class UnregisteredSymbolError(SymcoreError):
    pass


class MalformedContractionError(SymcoreError):
    pass


class CyclicBindingError(SymcoreError):
    pass


def atom_name(name: str, indices: tuple[int, ...]) -> str:
    if not indices:
        return name
    return "%s[%s]" % (name, ",".join(str(i) for i in indices))


@dataclass(frozen=True)
class Atom:
    """A registered coordinate or parameter symbol with concrete indices."""

    name: str
    indices: tuple[int, ...]
    kind: str
    sym: sp.Expr  # Symbol, or an applied function for external kind

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SymcoreError("unknown atom kind %r" % self.kind)

    @property
    def label(self) -> str:
        return atom_name(self.name, self.indices)

    def __repr__(self):
        return "Atom(%s:%s)" % (self.label, self.kind)


class AtomTable:
    """Append-only registry of atoms for one theory context."""

    def __init__(self):
        self._by_sym: dict[sp.Expr, Atom] = {}
        self._by_label: dict[str, Atom] = {}

    def register(self, name, indices, kind, args=()) -> Atom:
        indices = tuple(int(i) for i in indices)
        label = atom_name(name, indices)
        if label in self._by_label:
            existing = self._by_label[label]
            if existing.kind != kind:
                raise SymcoreError(
                    "atom %s already registered with kind %s" % (label, existing.kind))
            return existing
        if kind == EXTERNAL:
            fn = sp.Function(label)
            sym = fn(*[a.sym if isinstance(a, Atom) else a for a in args])
        else:
            sym = sp.Symbol(label)
        atom = Atom(name, indices, kind, sym)
        self._by_sym[sym] = atom
        self._by_label[label] = atom
        return atom

    def lookup(self, sym) -> Atom:
        try:
            return self._by_sym[sym]
        except KeyError:
            raise UnregisteredSymbolError(str(sym))

    def get(self, name, *indices) -> Atom:
        label = atom_name(name, tuple(int(i) for i in indices))
        try:
            return self._by_label[label]
        except KeyError:
            raise UnregisteredSymbolError(label)

    def has(self, name, *indices) -> bool:
        return atom_name(name, tuple(int(i) for i in indices)) in self._by_label

    def atoms(self):
        return list(self._by_label.values())

    def check_registered(self, e: sp.Expr):
        """Raise if e mentions a free symbol or undefined function we never issued."""
        for s in e.free_symbols:
            if s not in self._by_sym:
                raise UnregisteredSymbolError(str(s))
        for f in e.atoms(AppliedUndef):
            if f not in self._by_sym:
                raise UnregisteredSymbolError(str(f))


_NORMALIZE_CACHE = {}


def _fractional_pows(e):
    return {p for p in e.atoms(sp.Pow)
            if p.exp.is_Rational
            and (not p.exp.is_Integer or p.exp.is_negative)
            and not p.base.is_Atom}


def normalize(e) -> sp.Expr:
    """Canonical normal form: fully expanded sum of rational monomials.

    Idempotent; two expressions that agree as expanded rational-monomial
    combinations get identical trees (sympy's Add/Mul ordering is canonical).

    Fractional powers of composite expressions (square-root Lagrangians) are
    treated as opaque generators during expansion.  Expanding through the
    radicand is both exponentially slow and useless: no extra cancellation
    can come from it.  Even powers of a generator fold back into the radicand
    automatically on resubstitution.
    """
    e = sp.sympify(e)
    hit = _NORMALIZE_CACHE.get(e)
    if hit is not None:
        return hit
    key = e
    rads = _fractional_pows(e)
    if not rads:
        out = sp.expand(e)
    else:
        gens = {}
        fw = {}
        for p in rads:
            g = gens.setdefault(p.base, sp.Dummy(positive=True))
            q = 2 * p.exp
            fw[p] = g ** (int(q) if q.is_Integer else q)
        e = sp.expand(e.xreplace(fw))
        e = e.xreplace({g: sp.sqrt(b) for b, g in gens.items()})
        out = sp.expand_mul(e, deep=False)
    if len(_NORMALIZE_CACHE) > 200000:
        _NORMALIZE_CACHE.clear()
    _NORMALIZE_CACHE[key] = out
    _NORMALIZE_CACHE[out] = out
    return out


def diff(e, a) -> sp.Expr:
    """Formal partial derivative; atoms other than `a` are independent.

    External-function values differentiate to Derivative objects (their
    registered derivative atoms) by the chain rule over declared arguments.
    """
    target = a.sym if isinstance(a, Atom) else a
    return normalize(sp.diff(sp.sympify(e), target))


def _binding_graph(bindings):
    keys = {(k.sym if isinstance(k, Atom) else k) for k in bindings}
    edges = {}
    for k, v in bindings.items():
        ks = k.sym if isinstance(k, Atom) else k
        edges[ks] = (sp.sympify(v).free_symbols & keys) - {ks}
    return edges


def substitute(e, bindings) -> sp.Expr:
    """Simultaneous substitution followed by normalization.

    Bindings whose values refer back to other bound atoms (a cycle of length
    two or more) are rejected; a binding mentioning its own key is fine since
    the substitution is a single simultaneous pass.
    """
    edges = _binding_graph(bindings)
    seen, done = set(), set()

    def visit(node):
        if node in done:
            return
        if node in seen:
            raise CyclicBindingError(str(node))
        seen.add(node)
        for nxt in edges.get(node, ()):
            visit(nxt)
        done.add(node)

    for node in list(edges):
        visit(node)
    table = {(k.sym if isinstance(k, Atom) else k): sp.sympify(v)
             for k, v in bindings.items()}
    return normalize(sp.sympify(e).xreplace(table))


class IndexedFamily:
    """A named family of components with finite index ranges and symmetries.

    Component access canonicalizes indices through the declared symmetric and
    antisymmetric slot pairs, returning a signed atom (or table entry, for
    families with a concrete numeric table such as eta, epsilon, delta).
    """

    def __init__(self, name, ranges, table=None, symmetric=(), antisymmetric=(),
                 atoms: AtomTable | None = None, kind=PARAMETER, args=()):
        self.name = name
        self.ranges = [tuple(r) for r in ranges]
        self.symmetric = [tuple(p) for p in symmetric]
        self.antisymmetric = [tuple(p) for p in antisymmetric]
        self.table = dict(table) if table is not None else None
        self.atoms = atoms
        self.kind = kind
        self.args = tuple(args)
        if self.table is not None:
            self._check_table()

    def _canonical(self, indices):
        idx = list(indices)
        sign = 1
        changed = True
        while changed:
            changed = False
            for (i, j) in self.symmetric:
                if idx[i] > idx[j]:
                    idx[i], idx[j] = idx[j], idx[i]
                    changed = True
            for (i, j) in self.antisymmetric:
                if idx[i] == idx[j]:
                    return None, 0
                if idx[i] > idx[j]:
                    idx[i], idx[j] = idx[j], idx[i]
                    sign = -sign
                    changed = True
        return tuple(idx), sign

    def _check_table(self):
        for indices in itertools.product(*(range(lo, hi + 1) for lo, hi in self.ranges)):
            canon, sign = self._canonical(indices)
            got = sp.Rational(self.table.get(tuple(indices), 0))
            want = sign * sp.Rational(self.table.get(canon, 0)) if sign else sp.S.Zero
            if got != want:
                raise SymcoreError(
                    "table for %s violates declared symmetries at %s" % (self.name, indices))

    def __call__(self, *indices) -> sp.Expr:
        if len(indices) != len(self.ranges):
            raise SymcoreError("%s expects %d indices" % (self.name, len(self.ranges)))
        for i, (lo, hi) in zip(indices, self.ranges):
            if not (lo <= i <= hi):
                raise SymcoreError("index %s out of range for %s" % (i, self.name))
        canon, sign = self._canonical(indices)
        if sign == 0:
            return sp.S.Zero
        if self.table is not None:
            return sign * sp.Rational(self.table.get(canon, 0))
        if self.atoms is None:
            raise SymcoreError("family %s has neither table nor atom registry" % self.name)
        atom = self.atoms.register(self.name, canon, self.kind, args=self.args)
        return sign * atom.sym


# ---------------------------------------------------------------------------
# Einstein-summation expansion over a small template AST.
#
# Templates are nested tuples:
#   ('num', Fraction|int)           rational literal
#   ('ref', name, idx_names)        indexed reference; idx entries are str
#                                   (summation/range variables) or int
#   ('add', t1, t2, ...)            sum
#   ('mul', t1, t2, ...)            product
#   ('pow', t, int)                 integer power
#   ('call', fname, t)              opaque call (sqrt, sin, cos)
#   ('neg', t)                      negation
# A resolver maps (name, concrete_index_tuple) -> sympy expression.
# ---------------------------------------------------------------------------

def _free_index_occurrences(t, counts):
    tag = t[0]
    if tag == "ref":
        for i in t[2]:
            if isinstance(i, str):
                counts[i] = counts.get(i, 0) + 1
    elif tag in ("add",):
        # occurrences on the branches are parallel: the sum contributes the
        # per-letter max across branches, added to the enclosing product.
        # A letter repeated inside one branch is contracted there and is
        # invisible to the enclosing scope.
        merged = {}
        for sub in t[1:]:
            c = {}
            _free_index_occurrences(sub, c)
            for k, v in c.items():
                if v >= 2:
                    continue
                merged[k] = max(merged.get(k, 0), v)
        for k, v in merged.items():
            counts[k] = counts.get(k, 0) + v
    elif tag in ("mul",):
        for sub in t[1:]:
            _free_index_occurrences(sub, counts)
    elif tag == "pow":
        c = {}
        _free_index_occurrences(t[1], c)
        for k, v in c.items():
            counts[k] = counts.get(k, 0) + v * abs(t[2])
    elif tag == "call":
        _free_index_occurrences(t[2], counts)
    elif tag == "neg":
        _free_index_occurrences(t[1], counts)


def _eval_template(t, binding, resolver, ranges):
    tag = t[0]
    if tag == "num":
        return sp.Rational(Fraction(t[1]))
    if tag == "ref":
        concrete = tuple(binding[i] if isinstance(i, str) else i for i in t[2])
        return resolver(t[1], concrete)
    if tag == "add":
        # branches may carry their own internal contractions
        return sp.Add(*[_expand_sums(s, ranges, resolver, binding)
                        for s in t[1:]])
    if tag == "mul":
        return sp.Mul(*[_eval_template(s, binding, resolver, ranges)
                        for s in t[1:]])
    if tag == "pow":
        return _eval_template(t[1], binding, resolver, ranges) ** t[2]
    if tag == "call":
        fn = {"sqrt": sp.sqrt, "sin": sp.sin, "cos": sp.cos, "exp": sp.exp}[t[1]]
        return fn(_eval_template(t[2], binding, resolver, ranges))
    if tag == "neg":
        return -_eval_template(t[1], binding, resolver, ranges)
    raise SymcoreError("bad template node %r" % (t,))


def _expand_sums(t, ranges, resolver, binding):
    """Evaluate a template, summing over repeated indices innermost-first.

    Summation happens at 'mul' (and bare 'ref') nodes: any named index bound
    nowhere in the enclosing scope and appearing exactly twice in the product
    is summed over its declared range.
    """
    tag = t[0]
    if tag == "add":
        return sp.Add(*[_expand_sums(s, ranges, resolver, binding) for s in t[1:]])
    if tag == "neg":
        return -_expand_sums(t[1], ranges, resolver, binding)
    counts: dict[str, int] = {}
    _free_index_occurrences(t, counts)
    pending = [i for i, c in counts.items() if i not in binding]
    for i in pending:
        if counts[i] > 2:
            raise MalformedContractionError(
                "index %r appears %d times" % (i, counts[i]))
        if i not in ranges:
            raise MalformedContractionError("index %r has no declared range" % i)
    summed = sorted(i for i in pending if counts[i] == 2)
    free = [i for i in pending if counts[i] == 1]
    if free:
        raise MalformedContractionError(
            "unsummed free index %r in scalar template" % free[0])
    total = sp.S.Zero
    for values in itertools.product(*(range(ranges[i][0], ranges[i][1] + 1) for i in summed)):
        b = dict(binding)
        b.update(zip(summed, values))
        total += _eval_template(t, b, resolver, ranges)
    return total


def einsum_expand(template, ranges, resolver, binding=None) -> sp.Expr:
    """Expand an indexed template with Einstein summation to a concrete Scalar.

    ranges: dict index-name -> (lo, hi).  resolver: (name, indices) -> Expr.
    binding: pre-bound index values (used when expanding the component of a
    larger indexed object).  An index repeated three or more times in one
    product raises MalformedContractionError.
    """
    return normalize(_expand_sums(template, ranges, resolver, dict(binding or {})))


# ---------------------------------------------------------------------------
# Canonical rendering
# ---------------------------------------------------------------------------

def _render_pow(base_str, exp):
    if exp == 1:
        return base_str
    if exp == sp.Rational(1, 2):
        return "sqrt(%s)" % base_str
    if exp == -sp.Rational(1, 2):
        return "1/sqrt(%s)" % base_str
    return "%s^%s" % (base_str, exp)


def _render_factor(f):
    if isinstance(f, sp.Pow):
        return _render_pow(_render_factor(f.base), f.exp)
    if isinstance(f, sp.Derivative):
        head = _render_factor(f.expr)
        slots = []
        for var, count in f.variable_count:
            slots.extend([str(var)] * count)
        return "D(%s;%s)" % (head, ",".join(sorted(slots)))
    if isinstance(f, AppliedUndef):
        return f.func.__name__
    if isinstance(f, (sp.Symbol,)):
        return f.name
    if f.is_Function:
        return "%s(%s)" % (f.func.__name__.lower(), render_scalar(f.args[0]))
    if f.is_Add:
        return "(%s)" % render_scalar(f)
    if f.is_Rational:
        return str(f)
    return str(f)


def _monomial_key(term):
    coeff, factors = term
    return (factors, coeff)


def render_scalar(e) -> str:
    """Deterministic string form: ordered monomials, rationals as p/q."""
    e = normalize(e)
    if e == 0:
        return "0"
    terms = []
    for term in sp.Add.make_args(e):
        coeff, rest = term.as_coeff_Mul()
        factors = tuple(sorted(_render_factor(f) for f in sp.Mul.make_args(rest)))
        terms.append((coeff, factors))
    terms.sort(key=_monomial_key)
    out = []
    for coeff, factors in terms:
        body = "*".join(factors) if factors else ""
        if not body:
            piece = str(coeff)
        elif coeff == 1:
            piece = body
        elif coeff == -1:
            piece = "-" + body
        else:
            piece = "%s*%s" % (coeff, body)
        out.append(piece)
    rendered = out[0]
    for piece in out[1:]:
        rendered += piece if piece.startswith("-") else "+" + piece
    return rendered
