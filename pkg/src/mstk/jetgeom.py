"""Jet-bundle and multimomentum charts, canonical lifts, prolongations,
and pullbacks by sections and smooth chart maps.

A bundle specification declares the base dimension, the fields (with internal
indices and base-tensor type), constant indexed families and sign-guard
assumptions.  From it we build:

    lagrangian side    (x^mu ; y^i ; y^i_mu)   with contact forms
    hamiltonian side   (x^mu ; y^i ; p^mu_i)

Velocity atoms are named FIELD_v[..., mu], momenta p_FIELD[mu, ...], formal
second jets FIELD_vv[..., mu, nu] with mu <= nu.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field as dc_field

import sympy as sp

from .symcore import (
    Atom, AtomTable, IndexedFamily, BASE, FIELD, VELOCITY, MOMENTUM,
    PARAMETER, EXTERNAL, SECOND_JET, normalize, SymcoreError,
)
from .exterior import Chart, Form, MultiVector, VectorField, contract, ext_d

__all__ = [
    "FieldDecl", "BundleSpec", "JetChart", "SectionMap", "build_jet_chart",
    "lift_base_vector_to_E", "prolong", "pullback", "section_pullback",
    "lie_derivative_of_section", "RestrictedChart", "restrict_chart",
]

LAGRANGIAN = "lagrangian"
HAMILTONIAN = "hamiltonian"


class JetGeomError(Exception):
    pass


@dataclass
class FieldDecl:
    """One declared field: internal index ranges plus base-tensor type (r,s).

    The flat components carry indices (internal..., upper base..., lower
    base...); scalars are type (0,0) with no indices at all when there are no
    internal slots.
    """
    name: str
    internal: list = dc_field(default_factory=list)  # list of (lo, hi)
    tensor_type: tuple = (0, 0)

    def component_indices(self, m):
        r, s = self.tensor_type
        ranges = [range(lo, hi + 1) for lo, hi in self.internal]
        ranges += [range(m)] * (r + s)
        if not ranges:
            yield ()
            return
        yield from itertools.product(*ranges)


@dataclass
class BundleSpec:
    m: int
    fields: list  # of FieldDecl
    constants: dict = dc_field(default_factory=dict)  # name -> IndexedFamily
    assumptions: list = dc_field(default_factory=list)  # (Expr, '<' or '>') meaning Expr < 0 / > 0
    atoms: AtomTable = dc_field(default_factory=AtomTable)

    def __post_init__(self):
        if self.m < 1:
            raise JetGeomError("base dimension must be >= 1")
        seen = set()
        for f in self.fields:
            if f.name in seen:
                raise JetGeomError("duplicate field name %r" % f.name)
            seen.add(f.name)


class JetChart(Chart):
    """Chart on J^1 pi or on the multimomentum bundle.

    Coordinate order: base x^mu, then field components in declaration order,
    then velocities y^i_mu (or momenta p^mu_i), field-major.
    """

    def __init__(self, spec: BundleSpec, side: str):
        self.spec = spec
        self.side = side
        self.m = spec.m
        t = spec.atoms
        self.base = [t.register("x", (mu,), BASE) for mu in range(spec.m)]
        self.fields = []
        self._field_decl = []
        for decl in spec.fields:
            for idx in decl.component_indices(spec.m):
                self.fields.append(t.register(decl.name, idx, FIELD))
                self._field_decl.append(decl)
        self.n = len(self.fields)
        self._vel = {}
        self._mom = {}
        fiber = []
        if side == LAGRANGIAN:
            for i, y in enumerate(self.fields):
                for mu in range(spec.m):
                    a = t.register(y.name + "_v", y.indices + (mu,), VELOCITY)
                    self._vel[(i, mu)] = a
                    fiber.append(a)
        elif side == HAMILTONIAN:
            for i, y in enumerate(self.fields):
                for mu in range(spec.m):
                    a = t.register("p_" + y.name, (mu,) + y.indices, MOMENTUM)
                    self._mom[(i, mu)] = a
                    fiber.append(a)
        else:
            raise JetGeomError("side must be lagrangian or hamiltonian")
        super().__init__(self.base + self.fields + fiber, name=side)
        self._second = {}
        self._base_chart = None

    # --- coordinate accessors -------------------------------------------
    def field_index(self, atom) -> int:
        return self.fields.index(atom)

    def vel(self, i, mu) -> Atom:
        return self._vel[(i, mu)]

    def mom(self, i, mu) -> Atom:
        return self._mom[(i, mu)]

    def second_jet(self, i, mu, nu) -> Atom:
        """Formal y^i_{mu nu}, symmetric; registered on demand."""
        if mu > nu:
            mu, nu = nu, mu
        key = (i, mu, nu)
        if key not in self._second:
            y = self.fields[i]
            self._second[key] = self.spec.atoms.register(
                y.name + "_vv", y.indices + (mu, nu), SECOND_JET)
        return self._second[key]

    # --- canonical structures -------------------------------------------
    def omega(self) -> Form:
        return Form(self, self.m, {tuple(range(self.m)): sp.S.One})

    def dxm(self, *mus) -> Form:
        """d^{m-k}x_{mu1...muk} = i(d/dx^{muk}) ... i(d/dx^{mu1}) d^m x."""
        a = self.omega()
        for mu in mus:
            a = contract(VectorField(self, {self.base[mu]: sp.S.One}), a)
        return a

    def contact_form(self, i) -> Form:
        if self.side != LAGRANGIAN:
            raise JetGeomError("contact forms live on the lagrangian side")
        terms = {(self.index_of(self.fields[i]),): sp.S.One}
        th = Form(self, 1, terms)
        for mu in range(self.m):
            th = th + Form(self, 1, {(mu,): -self.vel(i, mu).sym})
        return th

    def contact_forms(self):
        return [self.contact_form(i) for i in range(self.n)]

    def base_chart(self) -> Chart:
        if self._base_chart is None:
            self._base_chart = Chart(self.base, name="base")
        return self._base_chart

    def total_derivative(self, e, mu):
        """Formal total derivative D_mu introducing symmetric second jets."""
        if self.side != LAGRANGIAN:
            raise JetGeomError("total derivative needs velocity coordinates")
        e = sp.sympify(e)
        out = sp.diff(e, self.base[mu].sym)
        for i, y in enumerate(self.fields):
            d = sp.diff(e, y.sym)
            if d != 0:
                out += self.vel(i, mu).sym * d
            for nu in range(self.m):
                d = sp.diff(e, self.vel(i, nu).sym)
                if d != 0:
                    out += self.second_jet(i, mu, nu).sym * d
        return normalize(out)


def build_jet_chart(spec: BundleSpec, side: str) -> JetChart:
    return JetChart(spec, side)


def _depends_only_on(e, atoms, chart):
    # free parameters are fine; only other chart coordinates are forbidden
    fiber = set(chart.pos) - {a.sym for a in atoms}
    return not (sp.sympify(e).free_symbols & fiber)


def lift_base_vector_to_E(components: dict, chart: JetChart) -> MultiVector:
    """Canonical lift to E of a base vector field Z = Z^mu d/dx^mu.

    `components` maps base index mu -> Z^mu(x).  Scalar fields get no fiber
    part; (r,s)-tensor fields get the Jacobian-derived global-variation
    components (for the conventional generator Z = -xi^mu d/dx^mu the lift of
    a covector field A is -xi^mu d/dx^mu + A_lam (dxi^lam/dx^mu) d/dA_mu).
    Velocity components are untouched (lift lands on E, prolong separately).
    """
    comp = {mu: sp.sympify(c) for mu, c in components.items()}
    for c in comp.values():
        if not _depends_only_on(c, chart.base, chart):
            raise JetGeomError("not a base vector field: component depends on fiber")
    out = {}
    for mu, c in comp.items():
        if c != 0:
            out[chart.base[mu]] = c
    m = chart.m
    for i, y in enumerate(chart.fields):
        decl = chart._field_decl[i]
        r, s = decl.tensor_type
        if (r, s) == (0, 0):
            continue
        nint = len(decl.internal)
        internal = y.indices[:nint]
        upper = y.indices[nint:nint + r]
        lower = y.indices[nint + r:]
        fiber = sp.S.Zero
        # Delta evaluated on the actual components Z^mu (linear in Z)
        for k in range(r):
            for lam in range(m):
                dz = sp.diff(comp.get(upper[k], sp.S.Zero), chart.base[lam].sym)
                if dz == 0:
                    continue
                repl = internal + upper[:k] + (lam,) + upper[k + 1:] + lower
                fiber += dz * chart.spec.atoms.get(y.name, *repl).sym
        for k in range(s):
            for lam in range(m):
                dz = sp.diff(comp.get(lam, sp.S.Zero), chart.base[lower[k]].sym)
                if dz == 0:
                    continue
                repl = internal + upper + lower[:k] + (lam,) + lower[k + 1:]
                fiber -= dz * chart.spec.atoms.get(y.name, *repl).sym
        fiber = normalize(fiber)
        if fiber != 0:
            out[y] = fiber
    return VectorField(chart, out)


def prolong(Y: MultiVector) -> MultiVector:
    """Canonical lift of a vector field on E to J^1 pi.

    Velocity components are
        V^i_mu = d_mu Y^i + y^j_mu dY^i/dy^j
                 - y^i_nu (d_mu Y^nu + y^j_mu dY^nu/dy^j),
    which handles both projectable fields (base components independent of y,
    the inner y^j_mu term drops) and non-projectable ones.
    """
    chart = Y.chart
    if not isinstance(chart, JetChart) or chart.side != LAGRANGIAN:
        raise JetGeomError("prolong expects a field on a lagrangian jet chart")
    if Y.grade != 1:
        raise JetGeomError("prolong expects a vector field")
    vel_syms = {chart.vel(i, mu).sym
                for i in range(chart.n) for mu in range(chart.m)}
    comp = {}
    for (k,), c in Y.terms.items():
        atom = chart.coords[k]
        if atom.kind == VELOCITY:
            raise JetGeomError("field already has velocity components")
        if sp.sympify(c).free_symbols & vel_syms:
            raise JetGeomError("components may not depend on velocities")
        comp[atom] = sp.sympify(c)

    def dtot(f, mu):
        # first-order part of the total derivative (f depends on x, y only)
        out = sp.diff(f, chart.base[mu].sym)
        for j, y in enumerate(chart.fields):
            d = sp.diff(f, y.sym)
            if d != 0:
                out += chart.vel(j, mu).sym * d
        return out

    out = dict(comp)
    for i, y in enumerate(chart.fields):
        Yi = comp.get(y, sp.S.Zero)
        for mu in range(chart.m):
            v = dtot(Yi, mu)
            for nu in range(chart.m):
                Znu = comp.get(chart.base[nu], sp.S.Zero)
                if Znu == 0:
                    continue
                v -= chart.vel(i, nu).sym * dtot(Znu, mu)
            v = normalize(v)
            if v != 0:
                out[chart.vel(i, mu)] = v
    return VectorField(chart, out)


def pullback(a: Form, source: Chart, comp: dict) -> Form:
    """Pull a form back along a map source -> a.chart.

    `comp` maps every coordinate atom of a.chart to its expression over the
    source chart.  This one routine covers section pullback, Legendre-map
    pullback and restriction to a constraint submanifold.
    """
    table = {}
    for atom in a.chart.coords:
        if atom not in comp:
            raise JetGeomError("map is missing a component for %s" % atom.label)
        table[atom.sym] = sp.sympify(comp[atom])
    # differentials of the components, as forms on the source chart
    dcomp = {}
    for atom in a.chart.coords:
        terms = {}
        for k in range(source.dim):
            d = source.d_coeff(table[atom.sym], k)
            if d != 0:
                terms[(k,)] = d
        dcomp[atom] = Form(source, 1, terms)
    out = Form(source, a.grade)
    from .exterior import wedge
    for idx, c in a.terms.items():
        pulled_c = normalize(sp.sympify(c).xreplace(table))
        if pulled_c == 0:
            continue
        leg = None
        for k in idx:
            w = dcomp[a.chart.coords[k]]
            leg = w if leg is None else wedge(leg, w)
            if leg.is_zero():
                break
        if leg is None:
            leg = Form(source, 0, {(): sp.S.One})
        if leg.is_zero():
            continue
        for lidx, lc in leg.terms.items():
            out._accumulate(lidx, pulled_c * lc)
    out._prune()
    return out


class RestrictedChart(Chart):
    """A chart on a submanifold cut out by a solved substitution form:
    the eliminated coordinates become functions of the remaining ones."""

    def __init__(self, parent: Chart, solved: dict, name=""):
        self.parent = parent
        self.solved = dict(solved)
        remaining = [a for a in parent.coords if a not in self.solved]
        super().__init__(remaining, name=name or (parent.name + "|restricted"))
        allowed = {a.sym for a in remaining}
        for atom, e in self.solved.items():
            bad = {s for s in sp.sympify(e).free_symbols
                   if s in parent.pos and s not in allowed}
            if bad:
                raise JetGeomError("solved form for %s mentions eliminated coordinates"
                                   % atom.label)
        self.m = getattr(parent, "m", None)
        if self.m is not None:
            self.base = [a for a in getattr(parent, "base", []) if a in remaining]
            if len(self.base) != self.m:
                self.base = None

    def inclusion_components(self) -> dict:
        comp = {a: a.sym for a in self.coords}
        comp.update({a: sp.sympify(e) for a, e in self.solved.items()})
        return comp

    def omega(self) -> Form:
        if not self.base:
            raise JetGeomError("restricted chart lost its base coordinates")
        idx = tuple(self.index_of(a) for a in self.base)
        return Form(self, self.m, {idx: sp.S.One})

    def dxm(self, *mus) -> Form:
        a = self.omega()
        for mu in mus:
            a = contract(VectorField(self, {self.base[mu]: sp.S.One}), a)
        return a


def restrict_chart(chart: Chart, solved: dict, name="") -> RestrictedChart:
    """Memoized so that restricting twice by the same solved form yields the
    identical chart object (forms on it then interoperate)."""
    cache = getattr(chart, "_restriction_cache", None)
    if cache is None:
        cache = chart._restriction_cache = {}
    key = frozenset((a, sp.sympify(e)) for a, e in solved.items())
    if key not in cache:
        cache[key] = RestrictedChart(chart, solved, name=name)
    return cache[key]


class SectionMap:
    """A section of the jet bundle: fiber coordinates as functions of x.

    Field components are supplied; velocity components may be auto-filled by
    prolongation (the holonomic case).  Second-jet atoms are resolved to
    repeated x-derivatives on pullback.
    """

    def __init__(self, chart: JetChart, field_components: dict, velocity_components=None):
        self.chart = chart
        self.comp = {}
        for atom, e in field_components.items():
            if not _depends_only_on(e, chart.base, chart):
                raise JetGeomError("section component must depend on base only")
            self.comp[atom] = sp.sympify(e)
        for y in chart.fields:
            if y not in self.comp:
                raise JetGeomError("missing section component for %s" % y.label)
        self.prolonged = velocity_components is None and chart.side == LAGRANGIAN
        if chart.side == LAGRANGIAN:
            if velocity_components is None:
                for i, y in enumerate(chart.fields):
                    for mu in range(chart.m):
                        self.comp[chart.vel(i, mu)] = sp.diff(
                            self.comp[y], chart.base[mu].sym)
            else:
                for atom, e in velocity_components.items():
                    self.comp[atom] = sp.sympify(e)

    def is_holonomic(self):
        for i, y in enumerate(self.chart.fields):
            for mu in range(self.chart.m):
                v = self.comp.get(self.chart.vel(i, mu))
                if v is None or normalize(v - sp.diff(self.comp[y], self.chart.base[mu].sym)) != 0:
                    return False
        return True

    def map_components(self) -> dict:
        comp = {a: a.sym for a in self.chart.base}
        comp.update(self.comp)
        return comp

    def pull_scalar(self, e):
        """Substitute section components, resolving second-jet atoms to
        second x-derivatives of the field components."""
        e = sp.sympify(e)
        table = {atom.sym: val for atom, val in self.comp.items()}
        for (i, mu, nu), atom in self.chart._second.items():
            y = self.chart.fields[i]
            table[atom.sym] = sp.diff(self.comp[y],
                                      self.chart.base[mu].sym,
                                      self.chart.base[nu].sym)
        return normalize(e.xreplace(table))


def section_pullback(s: SectionMap, a: Form) -> Form:
    """Pull a form on the jet chart back to the base along the section."""
    if a.chart is not s.chart:
        raise JetGeomError("form lives on a different chart than the section")
    return pullback(a, s.chart.base_chart(), s.map_components())


def lie_derivative_of_section(Z_E: MultiVector, s: SectionMap, order: int = 0):
    """Lie derivative of a section along a projectable vector field on E.

    With Z_E = -xi^mu d/dx^mu - xi^i d/dy^i the order-0 result per field is
        L(Z) phi^i = xi^nu d(phi^i)/dx^nu - xi^i o phi,
    the negative of the physicists' local field variation delta y^i.  Order 1
    appends the velocity variations, which equal the base derivatives of the
    order-0 components.
    """
    chart = s.chart
    if order == 1 and not s.prolonged and not s.is_holonomic():
        raise JetGeomError("order-1 Lie derivative needs a prolonged section")
    comp = {}
    for (k,), c in Z_E.terms.items():
        comp[chart.coords[k]] = sp.sympify(c)
    out = {}
    section_table = {atom.sym: val for atom, val in s.comp.items()}
    for i, y in enumerate(chart.fields):
        xi_nu = {mu: -comp.get(chart.base[mu], sp.S.Zero) for mu in range(chart.m)}
        xi_i = -comp.get(y, sp.S.Zero)
        val = sp.S.Zero
        for mu in range(chart.m):
            val += xi_nu[mu] * sp.diff(s.comp[y], chart.base[mu].sym)
        val -= sp.sympify(xi_i).xreplace(section_table)
        out[y] = normalize(val)
    if order == 1:
        for i, y in enumerate(chart.fields):
            for mu in range(chart.m):
                out[chart.vel(i, mu)] = normalize(
                    sp.diff(out[y], chart.base[mu].sym))
    return out
